//! Representation models mapping interval sequences to fixed-size embeddings.
//!
//! Two learned models share one checkpoint format: the contrastive dilated
//! convolution encoder and the reconstruction autoencoder baseline. DTW is
//! provided as a direct distance for the quality harness.

pub mod autoencoder;
pub mod contrastive;
pub mod dtw;
pub mod encoder;
pub mod loss;
pub mod normalize;
pub mod params;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use autoencoder::train_autoencoder;
pub use contrastive::train_contrastive;
pub use dtw::{dtw, dtw_distance};
pub use normalize::Normalizer;
pub use params::ParamSet;

use crate::error::{Error, Result};
use crate::model::{Embedding, IntervalSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub dilations: Vec<usize>,
    pub mask_prob: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Optional cap on optimizer steps across all epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 64,
            depth: 4,
            dilations: vec![1, 2, 4, 8],
            mask_prob: 0.5,
            batch_size: 16,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 0,
            max_steps: None,
        }
    }
}

impl EncoderConfig {
    /// Depth and dilations for a stack of `depth` blocks with dilation `2^l`.
    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self.dilations = (0..depth).map(|l| 1 << l).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden_dim == 0 || self.depth == 0 {
            return bad("hidden_dim and depth must be positive".into());
        }
        if self.dilations.len() != self.depth || self.dilations.contains(&0) {
            return bad(format!("need {} positive dilations, got {:?}", self.depth, self.dilations));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob {} outside [0, 1)", self.mask_prob));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Contrastive,
    Autoencoder,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Contrastive => "contrastive",
            ModelKind::Autoencoder => "autoencoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model_tag: String,
    pub kind: ModelKind,
    pub config: EncoderConfig,
    pub normalizer: Normalizer,
    pub params: ParamSet,
    pub loss_trace: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"LVSCKPT\0";
const FORMAT_VERSION: u32 = 1;

impl ModelCheckpoint {
    pub fn new(kind: ModelKind, config: EncoderConfig, normalizer: Normalizer, params: ParamSet, loss_trace: Vec<f64>) -> Self {
        let mut h = Sha256::new();
        for p in &params.params {
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        let digest = hex::encode(&h.finalize()[..4]);
        let model_tag = format!(
            "{kind}-h{}-d{}-s{}-{digest}",
            config.hidden_dim, config.depth, config.seed
        );
        ModelCheckpoint { model_tag, kind, config, normalizer, params, loss_trace }
    }

    pub fn dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Layout: magic, little-endian u32 version, u64 header length, JSON
    /// header (everything except tensor data), then every tensor's values as
    /// little-endian f64 in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(self)?;
        let mut out = Vec::with_capacity(header.len() + 8 * self.params.num_scalars() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let mut ckpt: ModelCheckpoint = serde_json::from_slice(body)?;
        let mut data = &bytes[20 + header_len..];
        for p in &mut ckpt.params.params {
            let n: usize = p.shape.iter().product();
            if data.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated tensor {}", p.name)));
            }
            p.data = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[n * 8..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensors"));
        }
        ckpt.check_layout()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        crate::io::atomic_write(path, |w| Ok(w.write_all(&bytes)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn check_layout(&self) -> Result<()> {
        let first = self.params.params.first().ok_or_else(|| Error::Checkpoint("no tensors".into()))?;
        let width = match self.kind {
            ModelKind::Contrastive => first.shape[0],
            ModelKind::Autoencoder => *first.shape.last().unwrap_or(&0),
        };
        if width != self.config.hidden_dim {
            return Err(Error::DimensionMismatch { expected: self.config.hidden_dim, got: width });
        }
        Ok(())
    }

    /// Embedding of values already normalized; trailing NaN entries are padding.
    pub fn embed_normalized(&self, values: &[f64]) -> Vec<f64> {
        let h = self.config.hidden_dim;
        match self.kind {
            ModelKind::Contrastive => {
                let enc = encoder::TsEncoder::new(&self.params, h, &self.config.dilations);
                enc.pooled(&enc.forward(values, None))
            }
            ModelKind::Autoencoder => autoencoder::Autoencoder::new(&self.params, h, h).encode(values),
        }
    }

    /// Embeds raw minutes. NaN entries mark padding and are ignored.
    pub fn embed_values(&self, minutes: &[f64]) -> Result<Vec<f64>> {
        if minutes.iter().all(|v| v.is_nan()) {
            return Err(Error::EmptySequence);
        }
        Ok(self.embed_normalized(&self.normalizer.apply_all(minutes)))
    }
}

/// Full-sequence forward pass (no masking, no cropping) pooled to one vector.
pub fn embed_sequence(ckpt: &ModelCheckpoint, seq: &IntervalSequence) -> Result<Embedding> {
    let vector = ckpt.embed_values(&seq.intervals)?;
    if vector.len() != ckpt.dim() {
        return Err(Error::DimensionMismatch { expected: ckpt.dim(), got: vector.len() });
    }
    Ok(Embedding { character_id: seq.character_id.clone(), vector, model_tag: ckpt.model_tag.clone() })
}

/// Embeds every sequence, checking the checkpoint against the expected width.
pub fn embed_all(ckpt: &ModelCheckpoint, seqs: &[IntervalSequence], expected_dim: Option<usize>) -> Result<Vec<Embedding>> {
    if let Some(d) = expected_dim.filter(|d| *d != ckpt.dim()) {
        return Err(Error::DimensionMismatch { expected: d, got: ckpt.dim() });
    }
    seqs.iter().map(|s| embed_sequence(ckpt, s)).collect()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn train(kind: ModelKind, seqs: &[IntervalSequence], cfg: &EncoderConfig) -> Result<ModelCheckpoint> {
    match kind {
        ModelKind::Contrastive => train_contrastive(seqs, cfg),
        ModelKind::Autoencoder => train_autoencoder(seqs, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(n: usize) -> Vec<IntervalSequence> {
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..12 + i % 5).map(|t| 3.0 + ((t * 7 + i * 3) % 11) as f64).collect();
                let len = v.len() as u32;
                IntervalSequence::new(format!("c{i:03}"), v, len + 1).unwrap()
            })
            .collect()
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { hidden_dim: 8, batch_size: 4, epochs: 2, seed: 3, ..EncoderConfig::default() }.with_depth(2)
    }

    #[test]
    fn checkpoint_round_trip_reproduces_embeddings() {
        let data = seqs(8);
        for kind in [ModelKind::Contrastive, ModelKind::Autoencoder] {
            let ckpt = train(kind, &data, &small_cfg()).unwrap();
            let back = ModelCheckpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ckpt);
            for s in &data {
                assert_eq!(embed_sequence(&ckpt, s).unwrap(), embed_sequence(&back, s).unwrap());
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let ckpt = train(ModelKind::Contrastive, &seqs(4), &small_cfg()).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ModelCheckpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelCheckpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn embedding_shape_and_finiteness() {
        let data = seqs(6);
        let ckpt = train(ModelKind::Contrastive, &data, &small_cfg()).unwrap();
        let embs = embed_all(&ckpt, &data, Some(8)).unwrap();
        assert!(embs.iter().all(|e| e.dim() == 8 && e.is_finite() && e.model_tag == ckpt.model_tag));
        assert!(matches!(embed_all(&ckpt, &data, Some(64)), Err(Error::DimensionMismatch { expected: 64, got: 8 })));
    }

    #[test]
    fn padding_sentinel_leaves_embedding_unchanged() {
        let data = seqs(6);
        for kind in [ModelKind::Contrastive, ModelKind::Autoencoder] {
            let ckpt = train(kind, &data, &small_cfg()).unwrap();
            for s in &data {
                let mut padded = s.intervals.clone();
                padded.extend([f64::NAN; 7]);
                assert_eq!(ckpt.embed_values(&s.intervals).unwrap(), ckpt.embed_values(&padded).unwrap());
            }
        }
    }

    #[test]
    fn embedding_ignores_call_order() {
        let data = seqs(6);
        let ckpt = train(ModelKind::Contrastive, &data, &small_cfg()).unwrap();
        let forward = embed_all(&ckpt, &data, None).unwrap();
        let mut reversed: Vec<_> = data.iter().rev().cloned().collect();
        let mut back = embed_all(&ckpt, &reversed, None).unwrap();
        back.reverse();
        reversed.reverse();
        assert_eq!(forward, back);
    }

    #[test]
    fn dilations_must_match_depth() {
        let cfg = EncoderConfig { depth: 3, ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }
}
