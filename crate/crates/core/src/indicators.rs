//! Reliability statistics computed from frozen backbone and prior logits.

use crate::diffmath::{cosine, cross_entropy, entropy, kl_to_logits, softmax_temp, Mat};
use crate::error::{Error, Result};

/// Number of statistics fed to each reliability gate.
pub const NUM_INDICATORS: usize = 3;

/// `z[c] = scale · ⟨img, class_c⟩` for every row of `class_feats`.
pub fn backbone_logits(img_feat: &[f64], class_feats: &Mat, scale: f64) -> Result<Vec<f64>> {
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Config(format!(
            "logit scale must be positive, got {scale}"
        )));
    }
    if img_feat.len() != class_feats.cols() {
        return Err(Error::shape(
            class_feats.cols(),
            img_feat.len(),
            "image feature",
        ));
    }
    Ok(class_feats
        .matvec(img_feat)?
        .into_iter()
        .map(|v| scale * v)
        .collect())
}

/// Logits of one sample over one candidate class set.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    pub z_full: Vec<f64>,
    pub z_fg: Vec<f64>,
    pub z_clip: Option<Vec<f64>>,
}

impl LogitBundle {
    pub fn new(z_full: Vec<f64>, z_fg: Vec<f64>, z_clip: Option<Vec<f64>>) -> Result<Self> {
        let n = z_full.len();
        if n == 0 {
            return Err(Error::Shape("logit bundle over zero classes".into()));
        }
        if z_fg.len() != n {
            return Err(Error::shape(n, z_fg.len(), "foreground logits"));
        }
        if let Some(z) = &z_clip {
            if z.len() != n {
                return Err(Error::shape(n, z.len(), "prior logits"));
            }
        }
        Ok(Self {
            z_full,
            z_fg,
            z_clip,
        })
    }

    pub fn class_count(&self) -> usize {
        self.z_full.len()
    }

    pub fn require_clip(&self) -> Result<&[f64]> {
        self.z_clip
            .as_deref()
            .ok_or_else(|| Error::Config("prior logits are required for this operation".into()))
    }
}

/// Foreground gate input `[ΔH, cos(p_full, p_fg), area ratio]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrgStats {
    pub delta_h: f64,
    pub cos_full_fg: f64,
    pub area_ratio: f64,
}

impl FrgStats {
    pub fn to_array(self) -> [f64; NUM_INDICATORS] {
        [self.delta_h, self.cos_full_fg, self.area_ratio]
    }
}

/// Prior gate input `[H(p_full), H(p_clip), cos(p_full, p_clip)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrgStats {
    pub h_full: f64,
    pub h_clip: f64,
    pub cos_full_clip: f64,
}

impl BrgStats {
    pub fn to_array(self) -> [f64; NUM_INDICATORS] {
        [self.h_full, self.h_clip, self.cos_full_clip]
    }
}

/// Hard foreground-reliability target: 1 iff the foreground view has strictly
/// lower cross-entropy than the full image.
pub fn frg_supervision(z_full: &[f64], z_fg: &[f64], label: usize, tau_d: f64) -> Result<u8> {
    let full = cross_entropy(z_full, label, tau_d)?;
    let fg = cross_entropy(z_fg, label, tau_d)?;
    Ok(u8::from(fg < full))
}

pub fn build_frg_stats(bundle: &LogitBundle, area_ratio: f64, tau_d: f64) -> Result<FrgStats> {
    if !(0.0..=1.0).contains(&area_ratio) {
        return Err(Error::Domain(format!(
            "area ratio {area_ratio} outside [0, 1]"
        )));
    }
    let p_full = softmax_temp(&bundle.z_full, tau_d)?;
    let p_fg = softmax_temp(&bundle.z_fg, tau_d)?;
    Ok(FrgStats {
        delta_h: entropy(&p_full)? - entropy(&p_fg)?,
        cos_full_fg: cosine(&p_full, &p_fg)?,
        area_ratio,
    })
}

pub fn build_brg_stats(bundle: &LogitBundle, tau_d: f64) -> Result<BrgStats> {
    let z_clip = bundle.require_clip()?;
    let p_full = softmax_temp(&bundle.z_full, tau_d)?;
    let p_clip = softmax_temp(z_clip, tau_d)?;
    Ok(BrgStats {
        h_full: entropy(&p_full)?,
        h_clip: entropy(&p_clip)?,
        cos_full_clip: cosine(&p_full, &p_clip)?,
    })
}

/// Foreground shift index `KL(p_full || p_fg)`.
pub fn fg_shift_index(z_full: &[f64], z_fg: &[f64], tau_d: f64) -> Result<f64> {
    let p_full = softmax_temp(z_full, tau_d)?;
    let (kl, _) = kl_to_logits(&p_full, z_fg, tau_d)?;
    Ok(kl.max(0.0))
}
