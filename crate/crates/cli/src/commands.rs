use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use e2emil::autodiff::Precision;
use e2emil::data::{generate_dataset, read_dataset, summarize, write_dataset, DatasetConfig, SyntheticSlide};
use e2emil::fabric::ReductionMode;
use e2emil::nn::{init_params, save_checkpoint, BnMode, ModelDims};
use e2emil::protocol::{
    attention_localization, fit, prepare_step, split_slides, sweep_k, sweep_medians, write_history_csv,
    write_sweep_csv, DistributedTrainer, EpochRecord, Localization, ReferenceTrainer, RunSummary, StepTrace,
    TrainConfig, TrainMode, Trainer,
};
use e2emil::verify::{
    compare_runs, finite_diff_gradcheck, gradcheck_grid, write_metrics_csv, GradCheckReport, GridReport, Perturbed,
};

use crate::config::RunConfig;
use crate::error::CliError;

/// Records above this fail `verify-equivalence` in deterministic mode.
pub const EQUIVALENCE_THRESHOLD: f64 = 1e-10;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn load_slides(cfg: &RunConfig) -> Result<(Vec<SyntheticSlide>, usize), CliError> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(CliError::Io(format!(
            "dataset {} not found; run gen-data first or pass --dataset",
            path.display()
        )));
    }
    let slides = read_dataset(&path).map_err(|e| CliError::io(&path, e))?;
    let d = slides
        .first()
        .map(|s| s.tiles.cols())
        .ok_or_else(|| CliError::Io(format!("{}: dataset holds no slides", path.display())))?;
    Ok((slides, d))
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let slides = generate_dataset(&cfg.dataset_config(), cfg.seed)?;
    let path = cfg.dataset_path();
    write_dataset(&slides, &path).map_err(|e| CliError::io(&path, e))?;
    let summary = summarize(&slides);
    write_json(&cfg.out.join("dataset_summary.json"), &summary)?;
    println!(
        "wrote {} slides of dimension {} to {} (sha256 {})",
        summary.n_slides,
        summary.d,
        path.display(),
        summary.checksum
    );
    println!(
        "label balance {:.3} ({} positive, {} negative), {} tiles, {} witnesses",
        summary.label_balance, summary.n_positive, summary.n_negative, summary.tiles_total, summary.witness_total
    );
    let q: Vec<String> = summary
        .tile_quantiles
        .iter()
        .map(|(p, t)| format!("q{:.2}={t}", p))
        .collect();
    println!("tiles per slide: {}", q.join(" "));
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct TrainSummary {
    #[serde(flatten)]
    pub run: RunSummary,
    pub n_train: usize,
    pub n_val: usize,
    pub dims: ModelDims,
    pub localization: Localization,
    pub final_checksum: String,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    steps: usize,
    mean_loss: f64,
    val_auc: Option<f64>,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
}

fn write_epochs_csv(path: &Path, epochs: &[EpochRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    for e in epochs {
        w.serialize(EpochRow {
            epoch: e.epoch,
            steps: e.steps,
            mean_loss: e.mean_loss,
            val_auc: e.val_auc,
            ci_lo: e.val_ci.map(|c| c.0),
            ci_hi: e.val_ci.map(|c| c.1),
        })
        .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let (slides, d) = load_slides(cfg)?;
    let (train, val) = split_slides(&slides, cfg.train_fraction, cfg.seed)?;
    let dims = cfg.model_dims(d);
    let tcfg = cfg.train_config();
    let init = init_params(cfg.seed, &dims)?;
    save_checkpoint(&init, &cfg.out.join("init.ckpt"))?;
    log::info!(
        "training {:?} mode, N={}, K={}, {} train / {} val slides",
        cfg.mode,
        tcfg.n_encoders,
        tcfg.tiles_per_rank,
        train.len(),
        val.len()
    );
    let result = fit(&train, &val, &init, &tcfg, cfg.mode)?;
    write_history_csv(&cfg.out.join("history.csv"), &result.history)?;
    write_epochs_csv(&cfg.out.join("epochs.csv"), &result.epochs)?;
    save_checkpoint(&result.best_params, &cfg.out.join("best.ckpt"))?;
    save_checkpoint(&result.final_params, &cfg.out.join("final.ckpt"))?;
    let summary = TrainSummary {
        run: RunSummary::new(&result, &tcfg, cfg.mode),
        n_train: train.len(),
        n_val: val.len(),
        dims,
        localization: attention_localization(&result.final_params, &val, tcfg.max_val_tiles)?,
        final_checksum: result.final_params.checksum(),
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    let auc = summary.run.best_val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    let ci = summary
        .run
        .best_val_ci
        .map_or(String::new(), |(lo, hi)| format!(" [{lo:.4}, {hi:.4}]"));
    println!(
        "{} steps: loss {:.4} -> {:.4}, best val AUC {auc}{ci} at epoch {}",
        summary.run.steps,
        summary.run.initial_loss,
        summary.run.final_loss,
        summary.run.best_epoch.map_or("-".to_string(), |e| e.to_string())
    );
    Ok(())
}

#[derive(Serialize)]
struct EquivalenceRow {
    n_encoders: usize,
    steps: usize,
    max_nl1: f64,
    max_loss_absdiff: f64,
    /// `Σ|reference encoder grad| / Σ|distributed encoder grad|` at step 0.
    encoder_grad_ratio: f64,
    pass: bool,
}

#[derive(Serialize)]
struct EquivalenceReport {
    reduction: ReductionMode,
    precision: Precision,
    no_n_scaling: bool,
    threshold: f64,
    enforced: bool,
    pass: bool,
    runs: Vec<EquivalenceRow>,
}

const EQUIVALENCE_STEPS: u64 = 20;

fn equivalence_data(seed: u64) -> Result<Vec<SyntheticSlide>, CliError> {
    let cfg = DatasetConfig {
        n_slides: 8,
        d: 6,
        tiles_median: 40.0,
        tiles_min: 3,
        tiles_max: 80,
        witness_fraction: 0.1,
        ..DatasetConfig::default()
    };
    Ok(generate_dataset(&cfg, seed)?)
}

fn run_trainer(
    trainer: &mut dyn Trainer,
    tcfg: &TrainConfig,
    data: &[SyntheticSlide],
) -> Result<Vec<StepTrace>, CliError> {
    (0..EQUIVALENCE_STEPS)
        .map(|s| {
            let input = prepare_step(&data[s as usize % data.len()], tcfg, 0, s)?;
            Ok(trainer.step(&input, tcfg.optim.lr)?)
        })
        .collect()
}

fn encoder_grad_ratio(r: &StepTrace, d: &StepTrace) -> f64 {
    let l1 = |t: &StepTrace| -> f64 {
        t.tracked
            .iter()
            .filter(|l| l.name.starts_with("encoder"))
            .map(|l| l.grad.data().iter().map(|x| x.abs()).sum::<f64>())
            .sum()
    };
    l1(r) / l1(d)
}

/// Paired reference and distributed runs of a tiny model for N = 1, 2, 5.
pub fn verify_equivalence(cfg: &RunConfig) -> Result<(), CliError> {
    let drift = cfg.reduction == ReductionMode::Drift;
    let precision = if drift { Precision::F32 } else { cfg.precision };
    if drift {
        log::info!("drift mode: permuted reductions at 32-bit, report only");
    }
    let dims = ModelDims::new(6, vec![8], 4).with_attn(3).with_batch_norm(Some(BnMode::Synced));
    let data = equivalence_data(cfg.seed)?;
    let init = init_params(cfg.seed, &dims)?;
    let mut runs = Vec::new();
    for n in [1, 2, 5] {
        let tcfg = TrainConfig {
            n_encoders: n,
            tiles_per_rank: 5,
            precision,
            ..cfg.train_config()
        };
        let mut r = ReferenceTrainer::new(init.clone(), &tcfg)?;
        let mut d = DistributedTrainer::new(init.clone(), &tcfg)?;
        let rt = run_trainer(&mut r, &tcfg, &data)?;
        let dt = run_trainer(&mut d, &tcfg, &data)?;
        let records = compare_runs(&rt, &dt)?;
        write_metrics_csv(&cfg.out.join(format!("metrics_n{n}.csv")), &records)?;
        let max_nl1 = records.iter().map(|m| m.max_nl1()).fold(0.0, f64::max);
        let max_loss = records.iter().map(|m| m.loss_absdiff).fold(0.0, f64::max);
        runs.push(EquivalenceRow {
            n_encoders: n,
            steps: records.len(),
            max_nl1,
            max_loss_absdiff: max_loss,
            encoder_grad_ratio: encoder_grad_ratio(&rt[0], &dt[0]),
            pass: max_nl1 <= EQUIVALENCE_THRESHOLD && max_loss <= EQUIVALENCE_THRESHOLD,
        });
    }
    let pass = runs.iter().all(|r| r.pass);
    let report = EquivalenceReport {
        reduction: cfg.reduction,
        precision,
        no_n_scaling: cfg.no_n_scaling,
        threshold: EQUIVALENCE_THRESHOLD,
        enforced: !drift,
        pass,
        runs,
    };
    write_json(&cfg.out.join("equivalence.json"), &report)?;
    println!("{:>3} {:>6} {:>12} {:>12} {:>10}  status", "N", "steps", "max nL1", "max |dloss|", "grad ratio");
    for r in &report.runs {
        println!(
            "{:>3} {:>6} {:>12.3e} {:>12.3e} {:>10.4}  {}",
            r.n_encoders,
            r.steps,
            r.max_nl1,
            r.max_loss_absdiff,
            r.encoder_grad_ratio,
            if r.pass { "ok" } else if drift { "drift" } else { "FAIL" }
        );
    }
    if drift || pass {
        return Ok(());
    }
    let worst = report
        .runs
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("N={} nL1 {:.3e} grad ratio {:.4}", r.n_encoders, r.max_nl1, r.encoder_grad_ratio))
        .collect::<Vec<_>>()
        .join(", ");
    Err(CliError::Verification(format!("drift above {EQUIVALENCE_THRESHOLD:e}: {worst}")))
}

pub fn gradcheck(cfg: &RunConfig, inject_fault: bool) -> Result<(), CliError> {
    let opts = cfg.gradcheck_options();
    let mut cases: Vec<(String, GradCheckReport)> = Vec::new();
    for case in gradcheck_grid() {
        let (loss, start) = case.build()?;
        let report = if inject_fault {
            let bad = Perturbed {
                inner: &loss,
                tensor: 0,
                coord: 0,
                factor: 1.01,
            };
            finite_diff_gradcheck(&bad, &start, &opts)?
        } else {
            finite_diff_gradcheck(&loss, &start, &opts)?
        };
        cases.push((case.name.clone(), report));
    }
    let report = GridReport {
        pass: cases.iter().all(|(_, r)| r.pass),
        coords: cases.iter().map(|(_, r)| r.coords).sum(),
        max_rel_error: cases.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max),
        cases,
    };
    write_json(&cfg.out.join("gradcheck.json"), &report)?;
    for (name, r) in &report.cases {
        println!("{name}: {} coords, max rel {:.3e} {}", r.coords, r.max_rel_error, if r.pass { "ok" } else { "FAIL" });
        for p in &r.params {
            println!("    {:<24} {:>4} coords  rel {:.3e}  abs {:.3e}", p.name, p.coords, p.max_rel_error, p.max_abs_error);
        }
    }
    println!(
        "{} coordinates, max relative error {:.3e} (tolerance {:e})",
        report.coords, report.max_rel_error, opts.tolerance
    );
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "max relative error {:.3e} exceeds {:e}",
            report.max_rel_error, opts.tolerance
        )))
    }
}

#[derive(Serialize)]
struct MedianRow {
    k: usize,
    runs: usize,
    median_final_loss: f64,
    median_best_val_auc: Option<f64>,
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let (slides, d) = load_slides(cfg)?;
    let (train, val) = split_slides(&slides, cfg.train_fraction, cfg.seed)?;
    let seeds: Vec<u64> = (0..cfg.sweep_seeds as u64).map(|i| cfg.seed + i).collect();
    let rows = sweep_k(&train, &val, &cfg.model_dims(d), &cfg.train_config(), &cfg.k_grid, &seeds, cfg.mode)?;
    write_sweep_csv(&cfg.out.join("sweep_k.csv"), &rows)?;
    let medians = sweep_medians(&rows);
    let path = cfg.out.join("sweep_k_summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
    println!("{:>6} {:>5} {:>18} {:>18}", "K", "runs", "median final loss", "median best AUC");
    for m in &medians {
        w.serialize(MedianRow {
            k: m.k,
            runs: m.runs,
            median_final_loss: m.median_final_loss,
            median_best_val_auc: m.median_best_val_auc,
        })
        .map_err(|e| CliError::io(&path, e))?;
        println!(
            "{:>6} {:>5} {:>18.5} {:>18}",
            m.k,
            m.runs,
            m.median_final_loss,
            m.median_best_val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub mode: String,
    pub n_encoders: usize,
    pub tiles_per_rank: usize,
    pub final_loss: f64,
    pub best_val_auc: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

fn report_row(dir: &Path) -> Result<ReportRow, CliError> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("run directory {}: cannot read summary.json: {e}", dir.display())))?;
    let s: TrainSummary = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("run directory {}: corrupt summary.json: {e}", dir.display())))?;
    let mode = match (s.run.mode, s.run.frozen_encoder) {
        (_, true) => "frozen",
        (TrainMode::Reference, false) => "reference",
        (TrainMode::Distributed, false) => "distributed",
    };
    Ok(ReportRow {
        run: dir.display().to_string(),
        mode: mode.to_string(),
        n_encoders: s.run.n_encoders,
        tiles_per_rank: s.run.tiles_per_rank,
        final_loss: s.run.final_loss,
        best_val_auc: s.run.best_val_auc,
        ci_lo: s.run.best_val_ci.map(|c| c.0),
        ci_hi: s.run.best_val_ci.map(|c| c.1),
    })
}

/// Table of finished runs, best validation AUC first.
pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut rows = dirs.iter().map(|d| report_row(d)).collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| {
        let key = |r: &ReportRow| r.best_val_auc.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a))
    });
    println!(
        "{:<32} {:<12} {:>3} {:>5} {:>11} {:>24}",
        "run", "mode", "N", "K", "final loss", "best AUC (95% CI)"
    );
    for r in &rows {
        let auc = match (r.best_val_auc, r.ci_lo, r.ci_hi) {
            (Some(a), Some(lo), Some(hi)) => format!("{a:.4} ({lo:.3}-{hi:.3})"),
            (Some(a), _, _) => format!("{a:.4}"),
            _ => "n/a".to_string(),
        };
        println!(
            "{:<32} {:<12} {:>3} {:>5} {:>11.5} {:>24}",
            r.run, r.mode, r.n_encoders, r.tiles_per_rank, r.final_loss, auc
        );
    }
    if let Some(out) = out {
        let path = out.join("report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
        for r in &rows {
            w.serialize(r).map_err(|e| CliError::io(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}
