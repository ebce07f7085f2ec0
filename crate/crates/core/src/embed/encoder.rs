//! Dilated causal convolution encoder with hand-derived backpropagation.
//!
//! Input: one scalar per timestep. A per-timestep affine projection lifts it
//! to `hidden` channels, masked timesteps are zeroed, and a stack of residual
//! blocks `h + conv2(gelu(conv1(gelu(h))))` produces per-timestep features.
//! Convolutions are causal: the output at `t` only reads inputs at `<= t`.
//! All activations are laid out time-major (`[t * channels + c]`).

use rand::Rng;

use super::params::{Grads, Param, ParamSet};

pub const KERNEL: usize = 3;

/// Parameter layout: input weight, input bias, then four tensors per block.
const BLOCK_BASE: usize = 2;
const PER_BLOCK: usize = 4;

pub fn init_params(hidden: usize, depth: usize, rng: &mut impl Rng) -> ParamSet {
    let mut ps = ParamSet::default();
    ps.push(Param::uniform("input.weight", &[hidden], 1, rng));
    ps.push(Param::uniform("input.bias", &[hidden], 1, rng));
    let fan_in = hidden * KERNEL;
    for l in 0..depth {
        for conv in 1..=2 {
            ps.push(Param::uniform(format!("block{l}.conv{conv}.weight"), &[KERNEL, hidden, hidden], fan_in, rng));
            ps.push(Param::uniform(format!("block{l}.conv{conv}.bias"), &[hidden], fan_in, rng));
        }
    }
    ps
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub len: usize,
    valid: Vec<bool>,
    input: Vec<f64>,
    keep: Vec<bool>,
    /// Residual stream; `stream[l]` enters block `l`, the last entry is the output.
    stream: Vec<Vec<f64>>,
    act1: Vec<Vec<f64>>,
    pre2: Vec<Vec<f64>>,
    act2: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.stream.last().expect("stream always holds the projected input")
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

pub struct TsEncoder<'a> {
    params: &'a ParamSet,
    hidden: usize,
    dilations: &'a [usize],
}

impl<'a> TsEncoder<'a> {
    pub fn new(params: &'a ParamSet, hidden: usize, dilations: &'a [usize]) -> Self {
        debug_assert_eq!(params.params.len(), BLOCK_BASE + PER_BLOCK * dilations.len());
        TsEncoder { params, hidden, dilations }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `x` holds normalized values; NaN entries are padding. `keep[t] == false`
    /// zeroes the projected input at `t` (timestamp masking).
    pub fn forward(&self, x: &[f64], keep: Option<&[bool]>) -> ForwardCache {
        let (t_len, h) = (x.len(), self.hidden);
        let valid: Vec<bool> = x.iter().map(|v| !v.is_nan()).collect();
        let input: Vec<f64> = x.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
        let keep: Vec<bool> = (0..t_len)
            .map(|t| valid[t] && keep.is_none_or(|k| k[t]))
            .collect();

        let (w_in, b_in) = (self.params.get(0), self.params.get(1));
        let mut h0 = vec![0.0; t_len * h];
        for t in 0..t_len {
            if keep[t] {
                for c in 0..h {
                    h0[t * h + c] = input[t] * w_in[c] + b_in[c];
                }
            }
        }

        let depth = self.dilations.len();
        let mut cache = ForwardCache {
            len: t_len,
            valid,
            input,
            keep,
            stream: Vec::with_capacity(depth + 1),
            act1: Vec::with_capacity(depth),
            pre2: Vec::with_capacity(depth),
            act2: Vec::with_capacity(depth),
        };
        cache.stream.push(h0);
        for (l, &d) in self.dilations.iter().enumerate() {
            let base = BLOCK_BASE + PER_BLOCK * l;
            let hin = cache.stream.last().unwrap();
            let a1: Vec<f64> = hin.iter().map(|v| gelu(*v)).collect();
            let mut u = vec![0.0; t_len * h];
            conv_forward(self.params.get(base), self.params.get(base + 1), &a1, t_len, h, d, &mut u);
            let a2: Vec<f64> = u.iter().map(|v| gelu(*v)).collect();
            let mut out = vec![0.0; t_len * h];
            conv_forward(self.params.get(base + 2), self.params.get(base + 3), &a2, t_len, h, d, &mut out);
            for (o, r) in out.iter_mut().zip(hin) {
                *o += r;
            }
            cache.act1.push(a1);
            cache.pre2.push(u);
            cache.act2.push(a2);
            cache.stream.push(out);
        }
        cache
    }

    /// Accumulates parameter gradients for `d loss / d output = grad_out`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut Grads) {
        let (t_len, h) = (cache.len, self.hidden);
        let mut g = grad_out.to_vec();
        for (l, &d) in self.dilations.iter().enumerate().rev() {
            let base = BLOCK_BASE + PER_BLOCK * l;
            // Residual path carries `g` through unchanged.
            let mut g_a2 = vec![0.0; t_len * h];
            {
                let (gw, gb) = two_mut(&mut grads.0, base + 2, base + 3);
                conv_backward(self.params.get(base + 2), &cache.act2[l], &g, t_len, h, d, gw, gb, &mut g_a2);
            }
            let g_u: Vec<f64> = g_a2
                .iter()
                .zip(&cache.pre2[l])
                .map(|(ga, u)| ga * gelu_grad(*u))
                .collect();
            let mut g_a1 = vec![0.0; t_len * h];
            {
                let (gw, gb) = two_mut(&mut grads.0, base, base + 1);
                conv_backward(self.params.get(base), &cache.act1[l], &g_u, t_len, h, d, gw, gb, &mut g_a1);
            }
            for ((gi, ga), hin) in g.iter_mut().zip(&g_a1).zip(&cache.stream[l]) {
                *gi += ga * gelu_grad(*hin);
            }
        }
        let (gw, gb) = two_mut(&mut grads.0, 0, 1);
        for t in 0..t_len {
            if !cache.keep[t] {
                continue;
            }
            for c in 0..h {
                let gv = g[t * h + c];
                gw[c] += gv * cache.input[t];
                gb[c] += gv;
            }
        }
    }

    /// Max over valid timesteps of the final features.
    pub fn pooled(&self, cache: &ForwardCache) -> Vec<f64> {
        let h = self.hidden;
        let out = cache.output();
        let mut pooled = vec![f64::NEG_INFINITY; h];
        for t in (0..cache.len).filter(|t| cache.valid[*t]) {
            for c in 0..h {
                pooled[c] = pooled[c].max(out[t * h + c]);
            }
        }
        pooled
    }
}

fn two_mut(v: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (left, right) = v.split_at_mut(j);
    (&mut left[i], &mut right[0])
}

/// Causal dilated convolution; weight layout `[k][out][in]`, square channels.
pub(crate) fn conv_forward(w: &[f64], b: &[f64], input: &[f64], t_len: usize, ch: usize, dilation: usize, out: &mut [f64]) {
    for t in 0..t_len {
        let row = &mut out[t * ch..(t + 1) * ch];
        row.copy_from_slice(b);
        for k in 0..KERNEL {
            let shift = (KERNEL - 1 - k) * dilation;
            if t < shift {
                continue;
            }
            let src = &input[(t - shift) * ch..(t - shift + 1) * ch];
            let wk = &w[k * ch * ch..(k + 1) * ch * ch];
            for (o, r) in row.iter_mut().enumerate() {
                *r += dot(&wk[o * ch..(o + 1) * ch], src);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    w: &[f64],
    input: &[f64],
    grad_out: &[f64],
    t_len: usize,
    ch: usize,
    dilation: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: &mut [f64],
) {
    for t in 0..t_len {
        let go = &grad_out[t * ch..(t + 1) * ch];
        for (gb, g) in grad_b.iter_mut().zip(go) {
            *gb += g;
        }
        for k in 0..KERNEL {
            let shift = (KERNEL - 1 - k) * dilation;
            if t < shift {
                continue;
            }
            let s = t - shift;
            let src = &input[s * ch..(s + 1) * ch];
            let wk = &w[k * ch * ch..(k + 1) * ch * ch];
            let gwk = &mut grad_w[k * ch * ch..(k + 1) * ch * ch];
            let gin = &mut grad_in[s * ch..(s + 1) * ch];
            for (o, &g) in go.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wrow = &wk[o * ch..(o + 1) * ch];
                let gwrow = &mut gwk[o * ch..(o + 1) * ch];
                for i in 0..ch {
                    gwrow[i] += g * src[i];
                    gin[i] += g * wrow[i];
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn output_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dil = [1, 2];
        let ps = init_params(6, 2, &mut rng);
        let enc = TsEncoder::new(&ps, 6, &dil);
        let a = enc.forward(&[0.1, -0.3, 0.7, 1.2, -0.5, 0.2], None);
        let b = enc.forward(&[0.1, -0.3, 0.7, 9.0, 4.0, -2.0], None);
        assert_eq!(a.output()[..3 * 6], b.output()[..3 * 6]);
        assert_ne!(a.output()[3 * 6..], b.output()[3 * 6..]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dil = [1, 2];
        let mut ps = init_params(3, 2, &mut rng);
        let x = [0.3, -1.1, 0.5, 0.9, -0.2];
        let keep = [true, false, true, true, true];
        let proj: Vec<f64> = (0..x.len() * 3).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let loss = |ps: &ParamSet| {
            let enc = TsEncoder::new(ps, 3, &dil);
            dot(enc.forward(&x, Some(&keep)).output(), &proj)
        };
        let mut grads = ps.zeros_like();
        {
            let enc = TsEncoder::new(&ps, 3, &dil);
            let cache = enc.forward(&x, Some(&keep));
            enc.backward(&cache, &proj, &mut grads);
        }
        for (t, o) in ps.scalar_index() {
            let orig = ps.params[t].data[o];
            ps.params[t].data[o] = orig + 1e-5;
            let up = loss(&ps);
            ps.params[t].data[o] = orig - 1e-5;
            let down = loss(&ps);
            ps.params[t].data[o] = orig;
            let fd = (up - down) / 2e-5;
            let an = grads.0[t][o];
            assert!((fd - an).abs() <= 1e-7 * (1.0 + an.abs()), "{} [{o}]: fd {fd} vs {an}", ps.params[t].name);
        }
    }
}
