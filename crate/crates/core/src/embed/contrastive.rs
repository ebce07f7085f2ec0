//! Contrastive training of the dilated convolution encoder.
//!
//! Each batch item yields two overlapping random crops. Timestamps in each
//! crop are masked independently, both crops are encoded, and the
//! hierarchical contrastive loss is applied to the overlapping segment.

use rand::seq::SliceRandom;
use rand::Rng;

use super::encoder::{init_params, TsEncoder};
use super::loss::{hierarchical_contrastive_loss, ViewBatch};
use super::params::{Adam, Grads, ParamSet};
use super::{EncoderConfig, ModelCheckpoint, ModelKind, Normalizer};
use crate::error::{Error, Result};
use crate::model::IntervalSequence;
use crate::rng;

/// Two views of a batch plus their masks. The overlap is the last `overlap`
/// steps of each left view and the first `overlap` steps of each right view.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
    pub keep_left: Vec<Vec<bool>>,
    pub keep_right: Vec<Vec<bool>>,
    pub overlap: usize,
}

/// Samples crop boundaries shared by the batch and a per-item offset, so each
/// crop lies inside its own sequence. `values` are normalized sequences.
pub fn sample_batch(values: &[&[f64]], mask_prob: f64, rng: &mut impl Rng) -> Result<TrainingBatch> {
    let ts_len = values.iter().map(|v| v.len()).min().unwrap_or(0);
    if ts_len < 2 {
        return Err(Error::OverlapTooShort(ts_len));
    }
    let crop_len = rng.random_range(2..=ts_len);
    let crop_left = rng.random_range(0..=ts_len - crop_len);
    let crop_right = crop_left + crop_len;
    let crop_eleft = rng.random_range(0..=crop_left);
    let crop_eright = rng.random_range(crop_right..=ts_len);

    let mut batch = TrainingBatch {
        left: Vec::with_capacity(values.len()),
        right: Vec::with_capacity(values.len()),
        keep_left: Vec::with_capacity(values.len()),
        keep_right: Vec::with_capacity(values.len()),
        overlap: crop_len,
    };
    for v in values {
        let lo = -(crop_eleft as i64);
        let hi = (v.len() - crop_eright) as i64;
        let offset = rng.random_range(lo..=hi);
        let at = |i: usize| (offset + i as i64) as usize;
        let left = v[at(crop_eleft)..at(crop_right)].to_vec();
        let right = v[at(crop_left)..at(crop_eright)].to_vec();
        batch.keep_left.push((0..left.len()).map(|_| !rng.random_bool(mask_prob)).collect());
        batch.keep_right.push((0..right.len()).map(|_| !rng.random_bool(mask_prob)).collect());
        batch.left.push(left);
        batch.right.push(right);
    }
    Ok(batch)
}

/// Loss and exact parameter gradients for one prepared batch.
pub fn batch_loss_and_grad(params: &ParamSet, cfg: &EncoderConfig, batch: &TrainingBatch) -> (f64, Grads) {
    let h = cfg.hidden_dim;
    let enc = TsEncoder::new(params, h, &cfg.dilations);
    let ov = batch.overlap;

    let left: Vec<_> = batch
        .left
        .iter()
        .zip(&batch.keep_left)
        .map(|(x, k)| enc.forward(x, Some(k)))
        .collect();
    let right: Vec<_> = batch
        .right
        .iter()
        .zip(&batch.keep_right)
        .map(|(x, k)| enc.forward(x, Some(k)))
        .collect();
    let z_left: Vec<Vec<f64>> = left.iter().map(|c| c.output()[(c.len - ov) * h..].to_vec()).collect();
    let z_right: Vec<Vec<f64>> = right.iter().map(|c| c.output()[..ov * h].to_vec()).collect();

    let out = hierarchical_contrastive_loss(&ViewBatch { left: &z_left, right: &z_right, len: ov, channels: h });

    let mut grads = params.zeros_like();
    for (cache, g) in left.iter().zip(&out.grad_left) {
        let mut full = vec![0.0; cache.len * h];
        full[(cache.len - ov) * h..].copy_from_slice(g);
        enc.backward(cache, &full, &mut grads);
    }
    for (cache, g) in right.iter().zip(&out.grad_right) {
        let mut full = vec![0.0; cache.len * h];
        full[..ov * h].copy_from_slice(g);
        enc.backward(cache, &full, &mut grads);
    }
    (out.loss, grads)
}

pub fn train_contrastive(seqs: &[IntervalSequence], cfg: &EncoderConfig) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let usable: Vec<&IntervalSequence> = seqs.iter().filter(|s| s.len() >= 2).collect();
    if usable.len() < cfg.batch_size {
        return Err(Error::InsufficientData { need: cfg.batch_size, got: usable.len() });
    }
    let normalizer = Normalizer::fit(seqs);
    let values: Vec<Vec<f64>> = usable.iter().map(|s| normalizer.apply_all(&s.intervals)).collect();

    let mut rng = rng::stream(cfg.seed, &[b"contrastive"]);
    let mut params = init_params(cfg.hidden_dim, cfg.depth, &mut rng);
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..values.len()).collect();

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trace.len() >= m) {
                break 'epochs;
            }
            let items: Vec<&[f64]> = chunk.iter().map(|&i| values[i].as_slice()).collect();
            let batch = sample_batch(&items, cfg.mask_prob, &mut rng)?;
            let (loss, grads) = batch_loss_and_grad(&params, cfg, &batch);
            adam.step(&mut params, &grads);
            trace.push(loss);
        }
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("training diverged to non-finite parameters".into()));
    }
    Ok(ModelCheckpoint::new(ModelKind::Contrastive, cfg.clone(), normalizer, params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crops_overlap_and_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..12).map(f64::from).collect();
        let b: Vec<f64> = (100..130).map(f64::from).collect();
        for _ in 0..500 {
            let batch = sample_batch(&[&a, &b], 0.5, &mut rng).unwrap();
            assert!(batch.overlap >= 2);
            for (l, r) in batch.left.iter().zip(&batch.right) {
                assert!(l.len() >= batch.overlap && r.len() >= batch.overlap);
                // The shared segment holds the same raw values in both views.
                assert_eq!(l[l.len() - batch.overlap..], r[..batch.overlap]);
            }
        }
    }

    #[test]
    fn single_step_sequences_cannot_be_cropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = [1.0];
        assert!(matches!(sample_batch(&[&a], 0.5, &mut rng), Err(Error::OverlapTooShort(1))));
    }

    #[test]
    fn too_few_sequences() {
        let seqs = vec![IntervalSequence::new("a", vec![1.0; 5], 6).unwrap()];
        let cfg = EncoderConfig { batch_size: 4, ..EncoderConfig::default() };
        assert!(matches!(train_contrastive(&seqs, &cfg), Err(Error::InsufficientData { need: 4, got: 1 })));
    }
}
