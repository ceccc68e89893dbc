//! On-disk datasets of pre-extracted embeddings.
//!
//! A dataset directory holds `manifest.txt` (TOML) plus one tensor block per
//! array. Training records come first; `train_count` marks the boundary.

pub mod format;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{synth_generate, SynthConfig};

pub const MANIFEST: &str = "manifest.txt";
pub const FEAT_FULL: &str = "feat_full.bin";
pub const FEAT_FG: &str = "feat_fg.bin";
pub const BANK_BACKBONE: &str = "bank_backbone.bin";
pub const BANK_PRIOR: &str = "bank_prior.bin";
pub const Z_CLIP: &str = "z_clip.bin";
pub const AUX: &str = "aux.bin";

/// Unit-norm tolerance accepted silently.
pub const UNIT_TOL: f64 = 1e-4;
/// Beyond [`UNIT_TOL`] and up to this, features are renormalized on read.
pub const RENORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub feat_full: Vec<f32>,
    pub feat_fg: Vec<f32>,
    pub area_ratio: f32,
    pub z_clip: Option<Vec<f32>>,
}

/// Per-class text features, row-major `[class][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBank {
    pub names: Vec<String>,
    pub feats_backbone: Vec<f32>,
    pub feats_prior: Vec<f32>,
}

impl ClassBank {
    pub fn class_count(&self) -> usize {
        self.names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub shots: usize,
}

impl SplitManifest {
    /// First half of the classes are base, the rest new.
    pub fn halves(class_count: usize, shots: usize) -> Self {
        let half = class_count / 2;
        Self {
            base_classes: (0..half).collect(),
            new_classes: (half..class_count).collect(),
            shots,
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        let mut seen = vec![false; class_count];
        for &c in self.base_classes.iter().chain(&self.new_classes) {
            if c >= class_count {
                return Err(Error::Config(format!(
                    "split names class {c} of {class_count}"
                )));
            }
            if seen[c] {
                return Err(Error::Config(format!(
                    "class {c} appears twice in the split"
                )));
            }
            seen[c] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub records: Vec<SampleRecord>,
    pub banks: ClassBank,
    pub split: SplitManifest,
    /// Records `[0, train_count)` are the training split.
    pub train_count: usize,
    /// Free-form provenance (generator parameters and the like).
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.banks.class_count()
    }

    pub fn train(&self) -> &[SampleRecord] {
        &self.records[..self.train_count]
    }

    pub fn eval(&self) -> &[SampleRecord] {
        &self.records[self.train_count..]
    }

    pub fn has_z_clip(&self) -> bool {
        self.records.first().is_some_and(|r| r.z_clip.is_some())
    }

    /// Check every invariant that `write_dataset` relies on.
    pub fn validate(&self) -> Result<()> {
        let (d, c) = (self.dim, self.class_count());
        if self.banks.feats_backbone.len() != c * d || self.banks.feats_prior.len() != c * d {
            return Err(Error::Shape(format!("class banks must be {c}x{d}")));
        }
        for (i, row) in self
            .banks
            .feats_backbone
            .chunks(d.max(1))
            .chain(self.banks.feats_prior.chunks(d.max(1)))
            .enumerate()
        {
            check_unit(row, &format!("bank row {i}"))?;
        }
        self.split.validate(c)?;
        if self.train_count > self.records.len() {
            return Err(Error::Config(format!(
                "train_count {} exceeds {} records",
                self.train_count,
                self.records.len()
            )));
        }
        let with_clip = self.has_z_clip();
        for (i, r) in self.records.iter().enumerate() {
            let bad = |msg: String| Error::Validation {
                id: r.id.clone(),
                msg,
            };
            if r.feat_full.len() != d || r.feat_fg.len() != d {
                return Err(bad(format!("features must have dimension {d}")));
            }
            check_unit(&r.feat_full, &r.id)?;
            check_unit(&r.feat_fg, &r.id)?;
            if r.label >= c {
                return Err(bad(format!("label {} outside {c} classes", r.label)));
            }
            if i < self.train_count && !self.split.base_classes.contains(&r.label) {
                return Err(bad(format!(
                    "training label {} is not a base class",
                    r.label
                )));
            }
            if !(0.0..=1.0).contains(&r.area_ratio) {
                return Err(bad(format!("area ratio {} outside [0, 1]", r.area_ratio)));
            }
            match &r.z_clip {
                Some(z) if !with_clip => {
                    return Err(bad("prior logits present on some records only".into()))
                }
                None if with_clip => return Err(bad("prior logits missing".into())),
                Some(z) if z.len() != c => {
                    return Err(bad(format!("prior logits must have length {c}")))
                }
                Some(z) if z.iter().any(|v| !v.is_finite()) => {
                    return Err(bad("non-finite prior logit".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Indices of at most `shots` training records per base class, drawn
    /// without replacement and returned in ascending order.
    pub fn few_shot<R: Rng>(&self, shots: usize, rng: &mut R) -> Vec<usize> {
        let mut picked = Vec::new();
        for &c in &self.split.base_classes {
            let mut idx: Vec<usize> = (0..self.train_count)
                .filter(|&i| self.records[i].label == c)
                .collect();
            idx.shuffle(rng);
            idx.truncate(shots);
            picked.extend(idx);
        }
        picked.sort_unstable();
        picked
    }
}

fn norm32(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

fn check_unit(v: &[f32], id: &str) -> Result<()> {
    let n = norm32(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Validation {
            id: id.to_string(),
            msg: format!("feature norm {n} is not within {UNIT_TOL} of 1"),
        });
    }
    Ok(())
}

/// Keep, renormalize or reject a feature read from disk.
fn admit_unit(v: &mut [f32], id: &str) -> Result<()> {
    let n = norm32(v);
    let dev = (n - 1.0).abs();
    if dev <= UNIT_TOL {
        return Ok(());
    }
    if dev <= RENORM_TOL {
        warn!("renormalizing `{id}` (norm {n})");
        for x in v.iter_mut() {
            *x = (f64::from(*x) / n) as f32;
        }
        return Ok(());
    }
    Err(Error::Validation {
        id: id.to_string(),
        msg: format!("feature norm {n} deviates from 1 by more than {RENORM_TOL}"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dim: usize,
    class_count: usize,
    record_count: usize,
    train_count: usize,
    has_z_clip: bool,
    class_names: Vec<String>,
    record_ids: Vec<String>,
    split: SplitManifest,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, d, c) = (ds.records.len(), ds.dim, ds.class_count());
    let flat = |f: fn(&SampleRecord) -> &[f32]| -> Vec<f32> {
        ds.records
            .iter()
            .flat_map(|r| f(r).iter().copied())
            .collect()
    };

    format::write_f32(&dir.join(FEAT_FULL), n, d, &flat(|r| &r.feat_full))?;
    format::write_f32(&dir.join(FEAT_FG), n, d, &flat(|r| &r.feat_fg))?;
    format::write_f32(&dir.join(BANK_BACKBONE), c, d, &ds.banks.feats_backbone)?;
    format::write_f32(&dir.join(BANK_PRIOR), c, d, &ds.banks.feats_prior)?;
    let z_path = dir.join(Z_CLIP);
    if ds.has_z_clip() {
        format::write_f32(
            &z_path,
            n,
            c,
            &flat(|r| r.z_clip.as_deref().unwrap_or_default()),
        )?;
    } else if z_path.exists() {
        fs::remove_file(&z_path).map_err(|e| Error::io(&z_path, e))?;
    }
    let aux: Vec<u32> = ds
        .records
        .iter()
        .flat_map(|r| [r.label as u32, r.area_ratio.to_bits()])
        .collect();
    format::write_u32(&dir.join(AUX), n, 2, &aux)?;

    let manifest = Manifest {
        format: "FVGE".into(),
        version: format::VERSION_F32,
        dim: d,
        class_count: c,
        record_count: n,
        train_count: ds.train_count,
        has_z_clip: ds.has_z_clip(),
        class_names: ds.banks.names.clone(),
        record_ids: ds.records.iter().map(|r| r.id.clone()).collect(),
        split: ds.split.clone(),
        meta: ds.meta.clone(),
    };
    let text =
        toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn expect_dims(path: &Path, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::format(
            path,
            format!(
                "block is {}x{}, manifest implies {}x{}",
                got.0, got.1, want.0, want.1
            ),
        ));
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.format != "FVGE" || m.version != format::VERSION_F32 {
        return Err(Error::format(
            &mpath,
            format!("unsupported format {} v{}", m.format, m.version),
        ));
    }
    if m.class_names.len() != m.class_count || m.record_ids.len() != m.record_count {
        return Err(Error::format(
            &mpath,
            "name or id list disagrees with declared counts",
        ));
    }
    let (n, d, c) = (m.record_count, m.dim, m.class_count);

    let load = |name: &str, want: (usize, usize)| -> Result<Vec<f32>> {
        let p = dir.join(name);
        let (r, k, data) = format::read_f32(&p)?;
        expect_dims(&p, (r, k), want)?;
        Ok(data)
    };
    let mut full = load(FEAT_FULL, (n, d))?;
    let mut fg = load(FEAT_FG, (n, d))?;
    let mut bb = load(BANK_BACKBONE, (c, d))?;
    let mut bp = load(BANK_PRIOR, (c, d))?;
    let z = if m.has_z_clip {
        Some(load(Z_CLIP, (n, c))?)
    } else {
        None
    };
    let aux_path = dir.join(AUX);
    let (ar, ac, aux) = format::read_u32(&aux_path)?;
    expect_dims(&aux_path, (ar, ac), (n, 2))?;

    if d > 0 {
        for (i, row) in bb.chunks_mut(d).enumerate() {
            admit_unit(row, &format!("backbone bank row {i}"))?;
        }
        for (i, row) in bp.chunks_mut(d).enumerate() {
            admit_unit(row, &format!("prior bank row {i}"))?;
        }
        for (i, id) in m.record_ids.iter().enumerate() {
            admit_unit(&mut full[i * d..(i + 1) * d], id)?;
            admit_unit(&mut fg[i * d..(i + 1) * d], id)?;
        }
    }

    let records = (0..n)
        .map(|i| SampleRecord {
            id: m.record_ids[i].clone(),
            label: aux[2 * i] as usize,
            feat_full: full[i * d..(i + 1) * d].to_vec(),
            feat_fg: fg[i * d..(i + 1) * d].to_vec(),
            area_ratio: f32::from_bits(aux[2 * i + 1]),
            z_clip: z.as_ref().map(|z| z[i * c..(i + 1) * c].to_vec()),
        })
        .collect();
    let ds = Dataset {
        dim: d,
        records,
        banks: ClassBank {
            names: m.class_names,
            feats_backbone: bb,
            feats_prior: bp,
        },
        split: m.split,
        train_count: m.train_count,
        meta: m.meta,
    };
    ds.validate()?;
    Ok(ds)
}
