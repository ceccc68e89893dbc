//! Seeded synthetic embeddings.
//!
//! Each class has a unit prototype sharing a common component. Foreground
//! features are noisy prototypes; full-image features add a background
//! direction shared by every class, weighted by `fg_advantage`. The prior
//! sees a weaker copy of the background and scores against its own, noisier
//! prototype bank.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ClassBank, Dataset, SampleRecord, SplitManifest};
use crate::error::{Error, Result};

const COMMON_WEIGHT: f64 = 1.0;
const BACKGROUND_SCALE: f64 = 3.0;
const PRIOR_BACKGROUND: f64 = 0.25;
const BASE_TEXT_NOISE: f64 = 0.02;
const NEW_TEXT_NOISE: f64 = 0.2;
const PRIOR_TEXT_NOISE: f64 = 0.08;
const PRIOR_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    /// Training samples per base class.
    pub shots: usize,
    pub fg_advantage: f64,
    pub noise: f64,
    /// Evaluation samples per class, base and new.
    pub eval_per_class: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, classes: usize, dim: usize) -> Self {
        Self {
            seed,
            classes,
            dim,
            shots: 16,
            fg_advantage: 0.8,
            noise: 0.1,
            eval_per_class: 50,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.dim < 4 {
            return Err(Error::Config(format!(
                "need dimension at least 4, got {}",
                self.dim
            )));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_advantage) {
            return Err(Error::Config(format!(
                "fg_advantage {} outside [0, 1]",
                self.fg_advantage
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(format!(
                "noise must be a non-negative number, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `normalize(a + k·b)`.
fn perturb(a: &[f64], k: f64, b: &[f64]) -> Vec<f64> {
    normalized(a.iter().zip(b).map(|(x, y)| x + k * y).collect())
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (c, d) = (cfg.classes, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let common = normalized(gaussian(&mut rng, d));
    let background = normalized(gaussian(&mut rng, d));
    let protos: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let own = normalized(gaussian(&mut rng, d));
            perturb(&own, COMMON_WEIGHT, &common)
        })
        .collect();
    let split = SplitManifest::halves(c, cfg.shots);

    let mut bank_backbone = Vec::with_capacity(c * d);
    for (k, p) in protos.iter().enumerate() {
        let noise = if split.base_classes.contains(&k) {
            BASE_TEXT_NOISE
        } else {
            NEW_TEXT_NOISE
        };
        bank_backbone.extend(to_f32(&perturb(p, noise, &gaussian(&mut rng, d))));
    }
    let prior_bank: Vec<Vec<f64>> = protos
        .iter()
        .map(|p| perturb(p, PRIOR_TEXT_NOISE, &gaussian(&mut rng, d)))
        .collect();

    let sample = |rng: &mut ChaCha8Rng, id: String, label: usize| -> SampleRecord {
        let g = gaussian(rng, d);
        let w = cfg.fg_advantage * BACKGROUND_SCALE * rng.random_range(0.0..2.0);
        let area: f64 = rng.random_range(0.1..0.9);
        let object: Vec<f64> = protos[label]
            .iter()
            .zip(&g)
            .map(|(m, n)| m + cfg.noise * n)
            .collect();
        let fg = normalized(object.clone());
        let full = perturb(&object, w, &background);
        let view = perturb(&object, PRIOR_BACKGROUND * w, &background);
        let z_clip: Vec<f32> = prior_bank
            .iter()
            .map(|t| {
                (PRIOR_LOGIT_SCALE * t.iter().zip(&view).map(|(a, b)| a * b).sum::<f64>()) as f32
            })
            .collect();
        SampleRecord {
            id,
            label,
            feat_full: to_f32(&full),
            feat_fg: to_f32(&fg),
            area_ratio: area as f32,
            z_clip: Some(z_clip),
        }
    };

    let mut records = Vec::new();
    for &k in &split.base_classes {
        for s in 0..cfg.shots {
            records.push(sample(&mut rng, format!("train-{k}-{s}"), k));
        }
    }
    let train_count = records.len();
    for k in 0..c {
        for s in 0..cfg.eval_per_class {
            records.push(sample(&mut rng, format!("eval-{k}-{s}"), k));
        }
    }

    let meta = BTreeMap::from([
        ("generator".to_string(), "synth".to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("fg_advantage".to_string(), cfg.fg_advantage.to_string()),
        ("noise".to_string(), cfg.noise.to_string()),
        ("eval_per_class".to_string(), cfg.eval_per_class.to_string()),
    ]);
    let ds = Dataset {
        dim: d,
        records,
        banks: ClassBank {
            names: (0..c).map(|k| format!("class_{k}")).collect(),
            feats_backbone: bank_backbone,
            feats_prior: prior_bank.iter().flat_map(|p| to_f32(p)).collect(),
        },
        split,
        train_count,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}
