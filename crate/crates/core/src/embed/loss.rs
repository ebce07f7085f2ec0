//! Hierarchical contrastive loss over two augmented views.
//!
//! At every scale the loss combines an instance term (same timestamp,
//! other batch instances are negatives) and a temporal term (same instance,
//! other timestamps are negatives). Both are cross-entropies over dot-product
//! similarities with the self-similarity removed. Between scales, features are
//! max-pooled over time with kernel 2 until a single timestep remains.

use super::encoder::dot;

/// Weight of the instance term; the temporal term gets the remainder.
pub const INSTANCE_WEIGHT: f64 = 0.5;

/// Views for one batch: `views[b]` is a `len x channels` row-major block.
#[derive(Debug, Clone)]
pub struct ViewBatch<'a> {
    pub left: &'a [Vec<f64>],
    pub right: &'a [Vec<f64>],
    pub len: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_left: Vec<Vec<f64>>,
    pub grad_right: Vec<Vec<f64>>,
}

struct Scale {
    len: usize,
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    /// Source timestep in the finer scale for each pooled entry.
    arg_left: Vec<Vec<usize>>,
    arg_right: Vec<Vec<usize>>,
}

pub fn hierarchical_contrastive_loss(views: &ViewBatch<'_>) -> LossOutput {
    let (b, c) = (views.left.len(), views.channels);
    assert_eq!(views.right.len(), b);

    let mut scales = vec![Scale {
        len: views.len,
        left: views.left.to_vec(),
        right: views.right.to_vec(),
        arg_left: Vec::new(),
        arg_right: Vec::new(),
    }];
    while scales.last().unwrap().len > 1 {
        let prev = scales.last().unwrap();
        let (left, arg_left): (Vec<_>, Vec<_>) = prev.left.iter().map(|z| max_pool2(z, prev.len, c)).unzip();
        let (right, arg_right): (Vec<_>, Vec<_>) = prev.right.iter().map(|z| max_pool2(z, prev.len, c)).unzip();
        scales.push(Scale { len: prev.len / 2, left, right, arg_left, arg_right });
    }

    let depth = scales.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = scales
        .iter()
        .map(|s| (vec![vec![0.0; s.len * c]; b], vec![vec![0.0; s.len * c]; b]))
        .collect();
    for (s, (gl, gr)) in scales.iter().zip(grads.iter_mut()) {
        loss += instance_term(s, c, INSTANCE_WEIGHT / depth, gl, gr);
        if s.len > 1 {
            loss += temporal_term(s, c, (1.0 - INSTANCE_WEIGHT) / depth, gl, gr);
        }
    }

    // Route pooled gradients back down to the input scale.
    for k in (1..scales.len()).rev() {
        let (finer, coarser) = grads.split_at_mut(k);
        let (gl_f, gr_f) = &mut finer[k - 1];
        let (gl_c, gr_c) = &coarser[0];
        let s = &scales[k];
        for i in 0..b {
            unpool(&gl_c[i], &s.arg_left[i], s.len, c, &mut gl_f[i]);
            unpool(&gr_c[i], &s.arg_right[i], s.len, c, &mut gr_f[i]);
        }
    }
    let (grad_left, grad_right) = grads.swap_remove(0);
    LossOutput { loss, grad_left, grad_right }
}

fn instance_term(s: &Scale, c: usize, weight: f64, gl: &mut [Vec<f64>], gr: &mut [Vec<f64>]) -> f64 {
    let b = s.left.len();
    if b < 2 {
        return 0.0;
    }
    let n = 2 * b;
    let mut block = vec![0.0; n * c];
    let mut gblock = vec![0.0; n * c];
    let mut total = 0.0;
    for t in 0..s.len {
        for i in 0..b {
            block[i * c..(i + 1) * c].copy_from_slice(&s.left[i][t * c..(t + 1) * c]);
            block[(b + i) * c..(b + i + 1) * c].copy_from_slice(&s.right[i][t * c..(t + 1) * c]);
        }
        gblock.iter_mut().for_each(|g| *g = 0.0);
        total += info_nce(&block, n, c, weight / s.len as f64, &mut gblock);
        for i in 0..b {
            add_into(&mut gl[i][t * c..(t + 1) * c], &gblock[i * c..(i + 1) * c]);
            add_into(&mut gr[i][t * c..(t + 1) * c], &gblock[(b + i) * c..(b + i + 1) * c]);
        }
    }
    total
}

fn temporal_term(s: &Scale, c: usize, weight: f64, gl: &mut [Vec<f64>], gr: &mut [Vec<f64>]) -> f64 {
    let (b, t_len) = (s.left.len(), s.len);
    let n = 2 * t_len;
    let mut block = vec![0.0; n * c];
    let mut gblock = vec![0.0; n * c];
    let mut total = 0.0;
    for i in 0..b {
        block[..t_len * c].copy_from_slice(&s.left[i]);
        block[t_len * c..].copy_from_slice(&s.right[i]);
        gblock.iter_mut().for_each(|g| *g = 0.0);
        total += info_nce(&block, n, c, weight / b as f64, &mut gblock);
        add_into(&mut gl[i], &gblock[..t_len * c]);
        add_into(&mut gr[i], &gblock[t_len * c..]);
    }
    total
}

/// Mean over rows `r` of `-log softmax_{j != r}(z_r . z_j)` at `j = (r + n/2) % n`,
/// scaled by `weight`. Gradients (also scaled) are added to `grad`.
pub fn info_nce(z: &[f64], n: usize, c: usize, weight: f64, grad: &mut [f64]) -> f64 {
    let half = n / 2;
    let row_w = weight / n as f64;
    let mut sims = vec![0.0; n];
    let mut total = 0.0;
    for r in 0..n {
        let zr = &z[r * c..(r + 1) * c];
        for j in 0..n {
            sims[j] = if j == r { f64::NEG_INFINITY } else { dot(zr, &z[j * c..(j + 1) * c]) };
        }
        let pos = (r + half) % n;
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = sims.iter().map(|s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - sims[pos];
        for j in 0..n {
            if j == r {
                continue;
            }
            let p = (sims[j] - lse).exp();
            let g = row_w * (p - if j == pos { 1.0 } else { 0.0 });
            if g == 0.0 {
                continue;
            }
            for k in 0..c {
                grad[r * c + k] += g * z[j * c + k];
                grad[j * c + k] += g * z[r * c + k];
            }
        }
    }
    total * row_w
}

fn max_pool2(z: &[f64], t_len: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = t_len / 2;
    let mut out = vec![0.0; out_len * c];
    let mut arg = vec![0; out_len * c];
    for t in 0..out_len {
        for k in 0..c {
            let (a, b) = (z[2 * t * c + k], z[(2 * t + 1) * c + k]);
            // Ties go to the earlier timestep.
            let (v, src) = if b > a { (b, 2 * t + 1) } else { (a, 2 * t) };
            out[t * c + k] = v;
            arg[t * c + k] = src;
        }
    }
    (out, arg)
}

fn unpool(grad: &[f64], arg: &[usize], len: usize, c: usize, into: &mut [f64]) {
    for t in 0..len {
        for k in 0..c {
            into[arg[t * c + k] * c + k] += grad[t * c + k];
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
