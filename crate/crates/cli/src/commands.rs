use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;

use fvg_core::dataio::{read_dataset, synth_generate, write_dataset, SynthConfig};
use fvg_core::gates::{GateDepth, IndicatorMask};
use fvg_core::indicators::NUM_INDICATORS;
use fvg_core::losses::Branch;
use fvg_core::trainer::{
    apply_ablation, gradient_suite, load_checkpoint, run_report, save_checkpoint, train_base,
    train_pc, Checkpoint, EpochRecord, LrSchedule, Prepared, RunReport, TrainConfig,
};

use crate::{
    AblateArgs, BranchArg, EvalArgs, GradcheckArgs, HyperArgs, Schedule, SynthArgs, TrainArgs,
};

pub const REPORT: &str = "report.jsonl";
pub const HISTORY: &str = "history.jsonl";
pub const TIMING: &str = "timing.jsonl";

fn parse_mask(flag: &str, digits: &str) -> Result<IndicatorMask> {
    let bits: Vec<bool> = digits
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => bail!("--{flag} takes 0/1 digits, got `{digits}`"),
        })
        .collect::<Result<_>>()?;
    let arr: [bool; NUM_INDICATORS] = bits.try_into().map_err(|_| {
        anyhow::anyhow!("--{flag} needs exactly {NUM_INDICATORS} digits, got `{digits}`")
    })?;
    Ok(IndicatorMask::new(arr)?)
}

fn build_config(h: &HyperArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig {
        lr: h.lr,
        epochs: h.epochs,
        batch: h.batch,
        tau_d: h.tau_d,
        lambda_d: h.lambda_d,
        dim_fdc: h.dim_fdc,
        dim_rg: h.dim_rg,
        seed: h.seed,
        logit_scale: h.logit_scale,
        textual_adapter: !h.no_textual_adapter,
        frg_mask: parse_mask("frg-indicators", &h.frg_indicators)?,
        brg_mask: parse_mask("brg-indicators", &h.brg_indicators)?,
        gate_depth: GateDepth::try_from(h.gate_layers)?,
        stop_grad_trust: h.stop_grad_trust,
        fixed_r: h.fixed_r,
        fixed_b: h.fixed_b,
        lr_schedule: match h.lr_schedule {
            Schedule::Constant => LrSchedule::Constant,
            Schedule::Cosine => LrSchedule::Cosine,
        },
        ..TrainConfig::default()
    };
    if let Some(name) = &h.ablate {
        apply_ablation(name, &mut cfg.toggles)?;
    }
    for t in &h.disabled {
        cfg.toggles.disable(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T], append: bool) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        classes: a.classes,
        dim: a.dim,
        shots: a.shots,
        fg_advantage: a.fg_advantage,
        noise: a.noise,
        eval_per_class: a.eval_per_class,
    };
    let ds = synth_generate(&cfg)?;
    write_dataset(&ds, &a.out)?;
    info!(
        "wrote {} records ({} classes, dim {}) to {}",
        ds.records.len(),
        ds.class_count(),
        ds.dim,
        a.out.display()
    );
    Ok(())
}

struct Trained {
    ck: Checkpoint,
    history: Vec<EpochRecord>,
    timing: Vec<serde_json::Value>,
    diverged: Option<String>,
}

fn train_branches(prep: &Prepared, cfg: &TrainConfig, base: bool, new: bool) -> Result<Trained> {
    let mut history = Vec::new();
    let mut timing = Vec::new();
    let mut diverged = None;
    let mut ck = Checkpoint {
        config: cfg.clone(),
        dim: prep.dim,
        base: None,
        new: None,
        base_epochs: 0,
        pc_epochs: 0,
    };
    if base {
        let t = Instant::now();
        let run = train_base(prep, cfg)?;
        timing.push(json!({"phase": "base", "seconds": t.elapsed().as_secs_f64()}));
        info!(
            "base branch: {} trainable parameters, foreground gate {} parameters",
            run.state.num_trainable(),
            run.state.layout.frg.param_count()
        );
        history.extend(run.history);
        ck.base = Some(run.state);
        ck.base_epochs = run.epochs_done;
        diverged = run.diverged.map(|m| format!("base branch: {m}"));
    }
    if new && diverged.is_none() && cfg.uses_prior() {
        let t = Instant::now();
        let run = train_pc(prep, cfg)?;
        timing.push(json!({"phase": "pc", "seconds": t.elapsed().as_secs_f64()}));
        info!(
            "reliability gate: {} parameters",
            run.state.layout.brg.param_count()
        );
        history.extend(run.history);
        ck.new = Some(run.state);
        ck.pc_epochs = run.epochs_done;
        diverged = run.diverged.map(|m| format!("prior branch: {m}"));
    }
    Ok(Trained {
        ck,
        history,
        timing,
        diverged,
    })
}

/// Save everything for one run into `out`, returning its report.
fn finish_run(
    prep: &Prepared,
    t: &Trained,
    out: &Path,
    ablation: Option<&str>,
) -> Result<RunReport> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_checkpoint(&t.ck, out)?;
    let start = Instant::now();
    let report = run_report(prep, &t.ck, ablation)?;
    let mut timing = t.timing.clone();
    timing.push(json!({"phase": "eval", "seconds": start.elapsed().as_secs_f64()}));
    write_lines(&out.join(REPORT), std::slice::from_ref(&report), false)?;
    write_lines(&out.join(HISTORY), &t.history, false)?;
    write_lines(&out.join(TIMING), &timing, false)?;
    Ok(report)
}

fn print_report(r: &RunReport) -> Result<()> {
    println!("{}", serde_json::to_string(r)?);
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = build_config(&a.hyper)?;
    let ds = read_dataset(&a.data)?;
    let prep = Prepared::new(&ds, &cfg)?;
    let trained = train_branches(&prep, &cfg, !a.pc_only, !a.base_only)?;
    let report = finish_run(&prep, &trained, &a.out, a.hyper.ablate.as_deref())?;
    print_report(&report)?;
    if let Some(msg) = trained.diverged {
        bail!(
            "training diverged ({msg}); last good state saved to {}",
            a.out.display()
        );
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let branches: &[Branch] = match a.branch {
        BranchArg::Base => &[Branch::Base],
        BranchArg::New => &[Branch::New],
        BranchArg::Both => &[Branch::Base, Branch::New],
    };
    // without prior terms the new branch is served by the adapters
    let probe = load_checkpoint(&a.checkpoint, &[])?;
    let needs_adapter = a.branch != BranchArg::New || !probe.config.uses_prior();
    let ck = if needs_adapter && !branches.contains(&Branch::Base) {
        load_checkpoint(&a.checkpoint, &[Branch::Base, Branch::New])?
    } else {
        load_checkpoint(&a.checkpoint, branches)?
    };
    if !needs_adapter {
        info!("adapters not loaded");
    }
    let ds = read_dataset(&a.data)?;
    let prep = Prepared::new(&ds, &ck.config)?;
    let mut report = run_report(&prep, &ck, None)?;
    if a.branch == BranchArg::Base {
        report.new = None;
        report.hm = None;
        report.mean_b = None;
    }
    print_report(&report)?;
    if let Some(path) = &a.report {
        write_lines(path, std::slice::from_ref(&report), true)?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = TrainConfig {
        tau_d: a.tau_d,
        lambda_d: a.lambda_d,
        logit_scale: a.logit_scale,
        gate_depth: GateDepth::try_from(a.gate_layers)?,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let entries = gradient_suite(&cfg, a.seed, a.inject_fault)?;
    let failed = entries.iter().filter(|e| !e.passed).count();
    for e in &entries {
        println!("{}", serde_json::to_string(e)?);
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", entries.len());
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    if a.hyper.ablate.is_some() {
        bail!("use --presets with `ablate`, not --ablate");
    }
    let base_cfg = build_config(&a.hyper)?;
    let ds = read_dataset(&a.data)?;
    let prep = Prepared::new(&ds, &base_cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let summary = a.out.join(REPORT);
    File::create(&summary).with_context(|| format!("creating {}", summary.display()))?;
    for name in &a.presets {
        let mut cfg = base_cfg.clone();
        apply_ablation(name, &mut cfg.toggles)?;
        info!("preset {name}");
        let trained = train_branches(&prep, &cfg, true, true)?;
        if let Some(msg) = &trained.diverged {
            bail!("preset {name} diverged: {msg}");
        }
        let report = finish_run(&prep, &trained, &a.out.join(name), Some(name))?;
        write_lines(&summary, std::slice::from_ref(&report), true)?;
        print_report(&report)?;
    }
    Ok(())
}
