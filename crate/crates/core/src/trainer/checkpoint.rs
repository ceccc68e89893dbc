//! Checkpoint directory: a TOML manifest plus one f64 block per parameter.

use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::dataio::format;
use crate::diffmath::{Mat, ParamSet};
use crate::error::{Error, Result};
use crate::fdc::{AdapterParams, BaseBranch, BaseLayout};
use crate::gates::{GateDepth, GateParams, IndicatorMask, Standardizer};
use crate::losses::Branch;
use crate::pc::{NewBranch, NewLayout};

use super::TrainConfig;

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.toml";
const KIND: &str = "FVGE-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dim: usize,
    pub base: Option<BaseBranch>,
    pub new: Option<NewBranch>,
    pub base_epochs: usize,
    pub pc_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BaseEntry {
    bottleneck: usize,
    textual: bool,
    gate_depth: GateDepth,
    gate_hidden: usize,
    norm: Standardizer,
    mask: IndicatorMask,
    params: Vec<BlockEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NewEntry {
    gate_depth: GateDepth,
    gate_hidden: usize,
    norm: Standardizer,
    mask: IndicatorMask,
    params: Vec<BlockEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    version: u32,
    dim: usize,
    base_epochs: usize,
    pc_epochs: usize,
    config: TrainConfig,
    base: Option<BaseEntry>,
    new: Option<NewEntry>,
}

fn write_params(ps: &ParamSet, dir: &Path) -> Result<Vec<BlockEntry>> {
    ps.ids()
        .map(|id| {
            let v = ps.value(id);
            let file = format!("{}.bin", ps.name(id));
            format::write_f64(&dir.join(&file), v.rows(), v.cols(), v.as_slice())?;
            Ok(BlockEntry {
                name: ps.name(id).to_string(),
                file,
                rows: v.rows(),
                cols: v.cols(),
            })
        })
        .collect()
}

fn read_params(entries: &[BlockEntry], dir: &Path) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    for e in entries {
        let path = dir.join(&e.file);
        let (r, c, data) = format::read_f64(&path)?;
        if (r, c) != (e.rows, e.cols) {
            return Err(Error::format(
                &path,
                format!("block is {r}x{c}, manifest says {}x{}", e.rows, e.cols),
            ));
        }
        ps.register(e.name.clone(), Mat::from_vec(r, c, data)?);
    }
    Ok(ps)
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let base = match &ck.base {
        Some(b) => Some(BaseEntry {
            bottleneck: b.layout.adapter.bottleneck(),
            textual: b.layout.adapter.has_textual(),
            gate_depth: b.layout.frg.depth(),
            gate_hidden: b.layout.frg.hidden(),
            norm: b.layout.frg_norm,
            mask: b.layout.frg_mask,
            params: write_params(&b.params, dir)?,
        }),
        None => None,
    };
    let new = match &ck.new {
        Some(n) => Some(NewEntry {
            gate_depth: n.layout.brg.depth(),
            gate_hidden: n.layout.brg.hidden(),
            norm: n.layout.brg_norm,
            mask: n.layout.brg_mask,
            params: write_params(&n.params, dir)?,
        }),
        None => None,
    };
    let m = Manifest {
        kind: KIND.into(),
        version: format::VERSION_F64,
        dim: ck.dim,
        base_epochs: ck.base_epochs,
        pc_epochs: ck.pc_epochs,
        config: ck.config.clone(),
        base,
        new,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = toml::to_string(&m).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Load the requested branches only; other parameter files are not opened.
pub fn load_checkpoint(dir: &Path, branches: &[Branch]) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.kind != KIND || m.version != format::VERSION_F64 {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint {} v{}", m.kind, m.version),
        ));
    }
    let base = match (&m.base, branches.contains(&Branch::Base)) {
        (Some(e), true) => {
            info!("loading adapter and foreground-gate parameters");
            let params = read_params(&e.params, dir)?;
            let adapter = AdapterParams::attach(&params, m.dim, e.bottleneck, e.textual)?;
            let frg = GateParams::attach(&params, "frg", e.gate_depth, e.gate_hidden)?;
            Some(BaseBranch {
                params,
                layout: BaseLayout {
                    adapter,
                    frg,
                    frg_norm: e.norm,
                    frg_mask: e.mask,
                },
            })
        }
        _ => None,
    };
    let new = match (&m.new, branches.contains(&Branch::New)) {
        (Some(e), true) => {
            info!("loading reliability-gate parameters");
            let params = read_params(&e.params, dir)?;
            let brg = GateParams::attach(&params, "brg", e.gate_depth, e.gate_hidden)?;
            Some(NewBranch {
                params,
                layout: NewLayout {
                    brg,
                    brg_norm: e.norm,
                    brg_mask: e.mask,
                },
            })
        }
        _ => None,
    };
    Ok(Checkpoint {
        config: m.config,
        dim: m.dim,
        base,
        new,
        base_epochs: m.base_epochs,
        pc_epochs: m.pc_epochs,
    })
}
