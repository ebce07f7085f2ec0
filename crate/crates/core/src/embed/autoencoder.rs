//! Reconstruction autoencoder baseline.
//!
//! Encoder: one causal temporal convolution (1 -> H channels, tanh), masked
//! mean-pool over valid timesteps, affine map to the embedding. Decoder:
//! affine map back to H (tanh), then a position-wise affine read-out for
//! every padded position. Loss is the mean squared error over valid positions.

use rand::seq::SliceRandom;
use rand::Rng;

use super::encoder::{dot, KERNEL};
use super::params::{Adam, Grads, Param, ParamSet};
use super::{EncoderConfig, ModelCheckpoint, ModelKind, Normalizer};
use crate::error::{Error, Result};
use crate::model::{IntervalSequence, MAX_SEQUENCE_LEN};
use crate::rng;

const CONV_W: usize = 0;
const CONV_B: usize = 1;
const ENC_W: usize = 2;
const ENC_B: usize = 3;
const DEC_W: usize = 4;
const DEC_B: usize = 5;
const OUT_W: usize = 6;
const OUT_B: usize = 7;

pub fn init_params(hidden: usize, dim: usize, rng: &mut impl Rng) -> ParamSet {
    let len = MAX_SEQUENCE_LEN;
    let mut ps = ParamSet::default();
    ps.push(Param::uniform("conv.weight", &[KERNEL, hidden], KERNEL, rng));
    ps.push(Param::uniform("conv.bias", &[hidden], KERNEL, rng));
    ps.push(Param::uniform("encode.weight", &[dim, hidden], hidden, rng));
    ps.push(Param::uniform("encode.bias", &[dim], hidden, rng));
    ps.push(Param::uniform("decode.weight", &[hidden, dim], dim, rng));
    ps.push(Param::uniform("decode.bias", &[hidden], dim, rng));
    ps.push(Param::uniform("readout.weight", &[len, hidden], hidden, rng));
    ps.push(Param::uniform("readout.bias", &[len], hidden, rng));
    ps
}

struct Trace {
    x: Vec<f64>,
    n_valid: usize,
    conv: Vec<f64>,
    pooled: Vec<f64>,
    code: Vec<f64>,
    dec: Vec<f64>,
    out: Vec<f64>,
}

pub struct Autoencoder<'a> {
    params: &'a ParamSet,
    hidden: usize,
    dim: usize,
}

impl<'a> Autoencoder<'a> {
    pub fn new(params: &'a ParamSet, hidden: usize, dim: usize) -> Self {
        Autoencoder { params, hidden, dim }
    }

    /// `x` holds normalized values; trailing NaN entries are padding.
    fn forward(&self, x: &[f64]) -> Trace {
        let (h, d) = (self.hidden, self.dim);
        let valid = x.iter().take_while(|v| !v.is_nan()).count();
        let x: Vec<f64> = x[..valid].to_vec();
        let (cw, cb) = (self.params.get(CONV_W), self.params.get(CONV_B));

        let mut conv = vec![0.0; valid * h];
        let mut pooled = vec![0.0; h];
        for t in 0..valid {
            for c in 0..h {
                let mut acc = cb[c];
                for k in 0..KERNEL {
                    let shift = KERNEL - 1 - k;
                    if t >= shift {
                        acc += cw[k * h + c] * x[t - shift];
                    }
                }
                let e = acc.tanh();
                conv[t * h + c] = e;
                pooled[c] += e;
            }
        }
        let inv = if valid > 0 { 1.0 / valid as f64 } else { 0.0 };
        pooled.iter_mut().for_each(|p| *p *= inv);

        let (ew, eb) = (self.params.get(ENC_W), self.params.get(ENC_B));
        let code: Vec<f64> = (0..d).map(|i| eb[i] + dot(&ew[i * h..(i + 1) * h], &pooled)).collect();
        let (dw, db) = (self.params.get(DEC_W), self.params.get(DEC_B));
        let dec: Vec<f64> = (0..h).map(|i| (db[i] + dot(&dw[i * d..(i + 1) * d], &code)).tanh()).collect();
        let (ow, ob) = (self.params.get(OUT_W), self.params.get(OUT_B));
        let out: Vec<f64> = (0..valid).map(|t| ob[t] + dot(&ow[t * h..(t + 1) * h], &dec)).collect();
        Trace { x, n_valid: valid, conv, pooled, code, dec, out }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).code
    }

    /// Squared error summed over valid positions, with gradients scaled by `scale`.
    fn backward(&self, tr: &Trace, scale: f64, grads: &mut Grads) -> f64 {
        let (h, d) = (self.hidden, self.dim);
        let mut sse = 0.0;
        let mut g_dec = vec![0.0; h];
        {
            let ow = self.params.get(OUT_W);
            for t in 0..tr.n_valid {
                let r = tr.out[t] - tr.x[t];
                sse += r * r;
                let g = 2.0 * r * scale;
                grads.0[OUT_B][t] += g;
                for c in 0..h {
                    grads.0[OUT_W][t * h + c] += g * tr.dec[c];
                    g_dec[c] += g * ow[t * h + c];
                }
            }
        }
        let g_pre: Vec<f64> = g_dec.iter().zip(&tr.dec).map(|(g, y)| g * (1.0 - y * y)).collect();
        let dw = self.params.get(DEC_W);
        let mut g_code = vec![0.0; d];
        for c in 0..h {
            grads.0[DEC_B][c] += g_pre[c];
            for i in 0..d {
                grads.0[DEC_W][c * d + i] += g_pre[c] * tr.code[i];
                g_code[i] += g_pre[c] * dw[c * d + i];
            }
        }
        let ew = self.params.get(ENC_W);
        let mut g_pool = vec![0.0; h];
        for i in 0..d {
            grads.0[ENC_B][i] += g_code[i];
            for c in 0..h {
                grads.0[ENC_W][i * h + c] += g_code[i] * tr.pooled[c];
                g_pool[c] += g_code[i] * ew[i * h + c];
            }
        }
        if tr.n_valid == 0 {
            return sse;
        }
        let inv = 1.0 / tr.n_valid as f64;
        for t in 0..tr.n_valid {
            for c in 0..h {
                let e = tr.conv[t * h + c];
                let g = g_pool[c] * inv * (1.0 - e * e);
                grads.0[CONV_B][c] += g;
                for k in 0..KERNEL {
                    let shift = KERNEL - 1 - k;
                    if t >= shift {
                        grads.0[CONV_W][k * h + c] += g * tr.x[t - shift];
                    }
                }
            }
        }
        sse
    }

    /// Mean squared reconstruction error over all valid positions, and its gradient.
    pub fn loss_and_grad(&self, batch: &[&[f64]]) -> (f64, Grads) {
        let traces: Vec<Trace> = batch.iter().map(|x| self.forward(x)).collect();
        let total: usize = traces.iter().map(|t| t.n_valid).sum();
        let scale = 1.0 / total.max(1) as f64;
        let mut grads = self.params.zeros_like();
        let sse: f64 = traces.iter().map(|tr| self.backward(tr, scale, &mut grads)).sum();
        (sse * scale, grads)
    }
}

pub fn train_autoencoder(seqs: &[IntervalSequence], cfg: &EncoderConfig) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if seqs.len() < cfg.batch_size {
        return Err(Error::InsufficientData { need: cfg.batch_size, got: seqs.len() });
    }
    let normalizer = Normalizer::fit(seqs);
    let values: Vec<Vec<f64>> = seqs.iter().map(|s| normalizer.apply_all(&s.intervals)).collect();

    let mut rng = rng::stream(cfg.seed, &[b"autoencoder"]);
    let mut params = init_params(cfg.hidden_dim, cfg.hidden_dim, &mut rng);
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..values.len()).collect();

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trace.len() >= m) {
                break 'epochs;
            }
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| values[i].as_slice()).collect();
            let (loss, grads) = Autoencoder::new(&params, cfg.hidden_dim, cfg.hidden_dim).loss_and_grad(&batch);
            adam.step(&mut params, &grads);
            trace.push(loss);
        }
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("training diverged to non-finite parameters".into()));
    }
    Ok(ModelCheckpoint::new(ModelKind::Autoencoder, cfg.clone(), normalizer, params, trace))
}
