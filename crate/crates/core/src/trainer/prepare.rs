use crate::dataio::{Dataset, SampleRecord};
use crate::diffmath::Mat;
use crate::error::{Error, Result};
use crate::fdc::BaseSample;
use crate::indicators::{backbone_logits, build_frg_stats, frg_supervision, LogitBundle};
use crate::pc::{InferInput, PriorSample};

use super::TrainConfig;

/// One evaluation record with logits restricted to its branch's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub id: String,
    /// Index within the branch's class list.
    pub label: usize,
    pub feat_full: Vec<f64>,
    pub feat_fg: Vec<f64>,
    pub area_ratio: f64,
    pub z_full: Vec<f64>,
    pub z_fg: Vec<f64>,
    pub z_clip: Vec<f64>,
}

impl EvalSample {
    pub fn input(&self) -> InferInput<'_> {
        InferInput {
            feat_full: &self.feat_full,
            feat_fg: &self.feat_fg,
            area_ratio: self.area_ratio,
            z_full: &self.z_full,
            z_fg: &self.z_fg,
            z_clip: Some(&self.z_clip),
        }
    }
}

/// f64 views of a dataset, split by branch, with frozen logits and gate
/// statistics precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub dim: usize,
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub base_bank: Mat,
    pub new_bank: Mat,
    pub base_train: Vec<BaseSample>,
    pub prior_train: Vec<PriorSample>,
    pub eval_base: Vec<EvalSample>,
    pub eval_new: Vec<EvalSample>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn rows(flat: &[f32], dim: usize, classes: &[usize]) -> Result<Mat> {
    let data = classes
        .iter()
        .flat_map(|&c| flat[c * dim..(c + 1) * dim].iter().map(|&x| f64::from(x)))
        .collect();
    Mat::from_vec(classes.len(), dim, data)
}

struct Views<'a> {
    dim: usize,
    scale: f64,
    bank: Mat,
    prior: Mat,
    classes: &'a [usize],
}

impl<'a> Views<'a> {
    fn new(ds: &Dataset, classes: &'a [usize], scale: f64) -> Result<Self> {
        Ok(Self {
            dim: ds.dim,
            scale,
            bank: rows(&ds.banks.feats_backbone, ds.dim, classes)?,
            prior: rows(&ds.banks.feats_prior, ds.dim, classes)?,
            classes,
        })
    }

    fn local(&self, r: &SampleRecord) -> Option<usize> {
        self.classes.iter().position(|&c| c == r.label)
    }

    fn eval(&self, r: &SampleRecord) -> Result<Option<EvalSample>> {
        let Some(label) = self.local(r) else {
            return Ok(None);
        };
        let feat_full = widen(&r.feat_full);
        let feat_fg = widen(&r.feat_fg);
        if feat_full.len() != self.dim {
            return Err(Error::shape(self.dim, feat_full.len(), "record feature"));
        }
        let z_clip = match &r.z_clip {
            Some(z) => self.classes.iter().map(|&c| f64::from(z[c])).collect(),
            None => backbone_logits(&feat_full, &self.prior, self.scale)?,
        };
        Ok(Some(EvalSample {
            id: r.id.clone(),
            label,
            z_full: backbone_logits(&feat_full, &self.bank, self.scale)?,
            z_fg: backbone_logits(&feat_fg, &self.bank, self.scale)?,
            z_clip,
            feat_full,
            feat_fg,
            area_ratio: f64::from(r.area_ratio),
        }))
    }
}

impl Prepared {
    pub fn new(ds: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let d = ds.dim;
        let base = Views::new(ds, &ds.split.base_classes, cfg.logit_scale)?;
        let new = Views::new(ds, &ds.split.new_classes, cfg.logit_scale)?;

        let mut base_train = Vec::with_capacity(ds.train_count);
        let mut prior_train = Vec::with_capacity(ds.train_count);
        for r in ds.train() {
            let s = base.eval(r)?.ok_or_else(|| Error::Validation {
                id: r.id.clone(),
                msg: "training record outside the base classes".into(),
            })?;
            let bundle = LogitBundle::new(s.z_full.clone(), s.z_fg.clone(), None)?;
            base_train.push(BaseSample {
                frg_stats: build_frg_stats(&bundle, s.area_ratio, cfg.tau_d)?.to_array(),
                r_star: frg_supervision(&s.z_full, &s.z_fg, s.label, cfg.tau_d)?,
                feat_full: s.feat_full,
                label: s.label,
                z_full: s.z_full.clone(),
                z_fg: s.z_fg,
            });
            prior_train.push(PriorSample::new(s.label, s.z_full, s.z_clip, cfg.tau_d)?);
        }

        let mut eval_base = Vec::new();
        let mut eval_new = Vec::new();
        for r in ds.eval() {
            if let Some(s) = base.eval(r)? {
                eval_base.push(s);
            } else if let Some(s) = new.eval(r)? {
                eval_new.push(s);
            }
        }
        Ok(Self {
            dim: d,
            base_classes: ds.split.base_classes.clone(),
            new_classes: ds.split.new_classes.clone(),
            base_bank: base.bank,
            new_bank: new.bank,
            base_train,
            prior_train,
            eval_base,
            eval_new,
        })
    }
}
