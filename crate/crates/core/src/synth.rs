//! Deterministic synthetic level-up logs with planted bot farms.
//!
//! Each farm follows its own route (a per-farm perturbation of the base
//! curve) and its bots replay that route with a small multiplicative jitter.
//! Legitimate players draw every interval independently from a log-normal
//! centred on the base curve. Contaminants are legitimate players that share
//! a farm's access key and mostly follow its route, but idle for
//! `contaminant_deviation` times longer on a few levels.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LevelUpEvent, CREATION_LEVEL};
use crate::rng;

pub const BASE_CURVE_LEN: usize = 49;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_farms: usize,
    pub farm_size: usize,
    pub bot_jitter_pct: f64,
    pub n_legit: usize,
    pub legit_cv: f64,
    /// Minutes per level for levels 2..=50.
    pub base_curve: Vec<f64>,
    /// Coefficient of variation of each farm's route around the base curve.
    pub route_cv: f64,
    pub contaminants_per_farm: usize,
    /// Multiplier applied to a contaminant's interval on its idle levels.
    pub contaminant_deviation: f64,
    pub contaminant_idle_levels: usize,
    /// Give contaminants their own access key instead of the farm's.
    pub contaminant_own_key: bool,
    pub shared_access_keys: bool,
    pub window_days: u32,
    #[serde(with = "crate::model::rfc3339_seconds")]
    pub window_start: DateTime<Utc>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_farms: 20,
            farm_size: 5,
            bot_jitter_pct: 0.02,
            n_legit: 200,
            legit_cv: 0.6,
            base_curve: default_base_curve(),
            route_cv: 0.3,
            contaminants_per_farm: 0,
            contaminant_deviation: 10.0,
            contaminant_idle_levels: 3,
            contaminant_own_key: false,
            shared_access_keys: true,
            window_days: 14,
            window_start: Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

/// Geometric ramp from 3 to 60 minutes across levels 2..=50.
pub fn default_base_curve() -> Vec<f64> {
    let ratio = (60.0f64 / 3.0).powf(1.0 / (BASE_CURVE_LEN as f64 - 1.0));
    (0..BASE_CURVE_LEN).map(|i| 3.0 * ratio.powi(i as i32)).collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_farms > 0 && self.farm_size < 3 {
            return bad(format!("farm_size {} < 3", self.farm_size));
        }
        if self.base_curve.len() != BASE_CURVE_LEN {
            return bad(format!(
                "base_curve has {} entries, expected {BASE_CURVE_LEN}",
                self.base_curve.len()
            ));
        }
        if self.base_curve.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("base_curve entries must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bot_jitter_pct) {
            return bad(format!("bot_jitter_pct {} outside [0, 1)", self.bot_jitter_pct));
        }
        if !(self.legit_cv > 0.0) || !(self.route_cv >= 0.0) {
            return bad("legit_cv must be positive and route_cv non-negative".into());
        }
        if self.contaminants_per_farm > 0 {
            if !(self.contaminant_deviation > 0.0) {
                return bad("contaminant_deviation must be positive".into());
            }
            if self.contaminant_idle_levels > BASE_CURVE_LEN {
                return bad("contaminant_idle_levels exceeds the curve length".into());
            }
        }
        if self.window_days == 0 {
            return bad("window_days must be positive".into());
        }
        Ok(())
    }

    pub fn n_characters(&self) -> usize {
        self.n_farms * (self.farm_size + self.contaminants_per_farm) + self.n_legit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "snake_case")]
pub enum TruthLabel {
    Bot { farm_id: usize },
    Legit,
    Contaminant { farm_id: usize },
}

impl TruthLabel {
    pub fn is_bot(self) -> bool {
        matches!(self, TruthLabel::Bot { .. })
    }

    pub fn farm(self) -> Option<usize> {
        match self {
            TruthLabel::Bot { farm_id } | TruthLabel::Contaminant { farm_id } => Some(farm_id),
            TruthLabel::Legit => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: BTreeMap<String, TruthLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub character_id: String,
    #[serde(flatten)]
    pub label: TruthLabel,
}

impl GroundTruth {
    pub fn records(&self) -> Vec<TruthRecord> {
        self.labels
            .iter()
            .map(|(id, label)| TruthRecord { character_id: id.clone(), label: *label })
            .collect()
    }

    pub fn from_records(records: Vec<TruthRecord>) -> Self {
        GroundTruth {
            labels: records.into_iter().map(|r| (r.character_id, r.label)).collect(),
        }
    }

    pub fn count(&self, pred: impl Fn(TruthLabel) -> bool) -> usize {
        self.labels.values().filter(|l| pred(**l)).count()
    }
}

struct Planned {
    label: TruthLabel,
    minutes: Vec<f64>,
    access_key: String,
}

pub fn generate(config: &SynthConfig) -> Result<(Vec<LevelUpEvent>, GroundTruth)> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &[b"synth"]);

    let route_dist = unit_mean_lognormal(config.route_cv)?;
    let mut planned = Vec::with_capacity(config.n_characters());
    for farm_id in 0..config.n_farms {
        let route: Vec<f64> = config
            .base_curve
            .iter()
            .map(|b| b * route_dist.sample(&mut rng))
            .collect();
        let shared_key = format!("farm-{farm_id:03}");
        for bot in 0..config.farm_size {
            let minutes = jittered(&route, config.bot_jitter_pct, &mut rng);
            let access_key = if config.shared_access_keys {
                shared_key.clone()
            } else {
                format!("farm-{farm_id:03}-{bot}")
            };
            planned.push(Planned { label: TruthLabel::Bot { farm_id }, minutes, access_key });
        }
        for c in 0..config.contaminants_per_farm {
            let mut minutes = jittered(&route, config.bot_jitter_pct, &mut rng);
            let mut levels: Vec<usize> = (0..BASE_CURVE_LEN).collect();
            levels.shuffle(&mut rng);
            for &lv in &levels[..config.contaminant_idle_levels] {
                minutes[lv] *= config.contaminant_deviation;
            }
            planned.push(Planned {
                label: TruthLabel::Contaminant { farm_id },
                minutes,
                access_key: if config.contaminant_own_key {
                    format!("acc-f{farm_id:03}-{c}")
                } else {
                    shared_key.clone()
                },
            });
        }
    }
    let legit_dist = unit_mean_lognormal(config.legit_cv)?;
    for i in 0..config.n_legit {
        let minutes = config
            .base_curve
            .iter()
            .map(|b| b * legit_dist.sample(&mut rng))
            .collect();
        planned.push(Planned {
            label: TruthLabel::Legit,
            minutes,
            access_key: format!("acc-{i:05}"),
        });
    }

    // Opaque ids: the id order carries no information about the label.
    let mut order: Vec<usize> = (0..planned.len()).collect();
    order.shuffle(&mut rng);

    let window_secs = i64::from(config.window_days) * 86_400;
    let mut events = Vec::with_capacity(planned.len() * (BASE_CURVE_LEN + 1));
    let mut truth = GroundTruth::default();
    for (slot, p) in order.into_iter().zip(&planned) {
        let character_id = format!("c{slot:05}");
        let total: i64 = p.minutes.iter().map(|m| minutes_to_secs(*m)).sum();
        let latest_start = (window_secs - total).max(1);
        let start = config.window_start + Duration::seconds(rng.random_range(0..latest_start));
        let world_id = format!("w{}", rng.random_range(1..=3));

        let mut ts = start;
        let mut push = |level: u32, ts: DateTime<Utc>| {
            events.push(LevelUpEvent {
                character_id: character_id.clone(),
                level,
                timestamp: ts,
                access_key: p.access_key.clone(),
                paid_boost: false,
                world_id: world_id.clone(),
            })
        };
        push(CREATION_LEVEL, ts);
        for (i, m) in p.minutes.iter().enumerate() {
            ts += Duration::seconds(minutes_to_secs(*m));
            push(CREATION_LEVEL + 1 + i as u32, ts);
        }
        truth.labels.insert(character_id, p.label);
    }
    events.sort_by(|a, b| a.character_id.cmp(&b.character_id).then(a.level.cmp(&b.level)));
    Ok((events, truth))
}

fn jittered(route: &[f64], jitter: f64, rng: &mut impl Rng) -> Vec<f64> {
    route
        .iter()
        .map(|r| {
            let u = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            r * (1.0 + u)
        })
        .collect()
}

/// Log-normal with mean 1 and the given coefficient of variation.
fn unit_mean_lognormal(cv: f64) -> Result<LogNormal<f64>> {
    let sigma2 = (1.0 + cv * cv).ln();
    LogNormal::new(-sigma2 / 2.0, sigma2.sqrt())
        .map_err(|e| Error::InvalidConfig(format!("log-normal with cv={cv}: {e}")))
}

fn minutes_to_secs(m: f64) -> i64 {
    ((m * 60.0).round() as i64).max(1)
}
