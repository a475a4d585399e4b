use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    prepare_step, stream_rng, DistributedTrainer, ProtocolError, ReferenceTrainer, StepTrace, TrainConfig,
    Trainer, EPOCH_STREAM,
};
use crate::autodiff::kernels::sigmoid;
use crate::autodiff::Graph;
use crate::data::{epoch_subsample, DataError, SyntheticSlide};
use crate::nn::{
    default_warmup, encoder_forward, gma_forward, lr_schedule, BoundEncoder, BoundGma, ModelParams,
};
use crate::verify::{bootstrap_ci, roc_auc, VerifyError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Distributed,
    Reference,
}

/// Slide-level prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub probability: f64,
    pub logit: f64,
    /// Attention weight of every tile used, in tile order.
    pub attention: Vec<f64>,
}

/// Forward pass over the first `max_tiles` tiles of `slide` (all tiles when
/// `None`). Batch norm uses the statistics of those tiles.
pub fn infer_slide_detailed(
    params: &ModelParams,
    slide: &SyntheticSlide,
    max_tiles: Option<usize>,
) -> Result<Inference, ProtocolError> {
    let t = slide.n_tiles();
    if t == 0 {
        return Err(DataError::EmptySlide(slide.id).into());
    }
    let used = max_tiles.map_or(t, |m| m.min(t));
    let mut g = Graph::new();
    let enc = BoundEncoder::bind(&mut g, &params.encoder, false);
    let gma = BoundGma::bind(&mut g, &params.gma, false);
    let x = g.constant(slide.tiles.slice_rows(0, used)?);
    let h = encoder_forward(&mut g, &enc, x)?;
    let out = gma_forward(&mut g, &gma, h)?;
    let logit = g.value(out.logit).item().expect("scalar logit");
    Ok(Inference {
        probability: sigmoid(logit),
        logit,
        attention: g.value(out.attn).data().to_vec(),
    })
}

pub fn infer_slide(params: &ModelParams, slide: &SyntheticSlide, max_tiles: Option<usize>) -> Result<f64, ProtocolError> {
    Ok(infer_slide_detailed(params, slide, max_tiles)?.probability)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Absent when the validation split holds a single class.
    pub val_auc: Option<f64>,
    /// 95% bootstrap interval of `val_auc`.
    pub val_ci: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub history: Vec<StepTrace>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_params: ModelParams,
    pub final_params: ModelParams,
}

impl FitResult {
    pub fn initial_loss(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.mean_loss)
    }

    /// Mean training loss of the last epoch.
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.epochs[e])
    }
}

/// Validation AUC and its bootstrap interval; `None` for single-class sets.
fn validate(
    params: &ModelParams,
    val: &[SyntheticSlide],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Option<f64>, Option<(f64, f64)>), ProtocolError> {
    let scores = val
        .iter()
        .map(|s| infer_slide(params, s, cfg.max_val_tiles))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    match roc_auc(&labels, &scores) {
        Ok(auc) => {
            let ci = bootstrap_ci(&labels, &scores, cfg.n_boot, 0.05, cfg.seed.wrapping_add(epoch as u64))?;
            Ok((Some(auc), Some((ci.lo, ci.hi))))
        }
        Err(VerifyError::SingleClass) => Ok((None, None)),
        Err(e) => Err(e.into()),
    }
}

/// Trains from `init` for `cfg.epochs` epochs. Every epoch visits a fresh
/// random `cfg.subsample` share of `train`, one step per slide, then scores
/// `val`. The parameters of the epoch with the highest validation AUC are
/// kept as `best_params`.
pub fn fit(
    train: &[SyntheticSlide],
    val: &[SyntheticSlide],
    init: &ModelParams,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<FitResult, ProtocolError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ProtocolError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(ProtocolError::EmptySplit("validation"));
    }
    let mut trainer: Box<dyn Trainer> = match mode {
        TrainMode::Distributed => Box::new(DistributedTrainer::new(init.clone(), cfg)?),
        TrainMode::Reference => Box::new(ReferenceTrainer::new(init.clone(), cfg)?),
    };
    let ids: Vec<u64> = (0..train.len() as u64).collect();
    let per_epoch = ((cfg.subsample * ids.len() as f64).round() as usize).clamp(1, ids.len());
    let total = per_epoch * cfg.epochs;
    let warmup = cfg.warmup_steps.unwrap_or_else(|| default_warmup(total));
    if warmup > total {
        return Err(ProtocolError::InvalidConfig(format!(
            "warmup of {warmup} steps exceeds the {total} training steps"
        )));
    }

    let mut history = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = epoch_subsample(&ids, cfg.subsample, &mut stream_rng(cfg.seed, EPOCH_STREAM, epoch as u64))?;
        let mut loss_sum = 0.0;
        for &i in &order {
            let input = prepare_step(&train[i as usize], cfg, epoch as u32, step)?;
            let lr = lr_schedule(step as usize, total, warmup, cfg.optim.lr)?;
            let trace = trainer.step(&input, lr)?;
            loss_sum += trace.loss;
            history.push(trace);
            step += 1;
        }
        let params = trainer.params();
        let (val_auc, val_ci) = validate(&params, val, cfg, epoch)?;
        let mean_loss = loss_sum / order.len() as f64;
        log::info!(
            "epoch {epoch}: {} steps, mean loss {mean_loss:.5}, val auc {}",
            order.len(),
            val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        if let Some(auc) = val_auc {
            if best.as_ref().is_none_or(|(_, b, _)| auc > *b) {
                best = Some((epoch, auc, params));
            }
        }
        epochs.push(EpochRecord {
            epoch,
            steps: order.len(),
            mean_loss,
            val_auc,
            val_ci,
        });
    }
    let final_params = trainer.params();
    let (best_epoch, best_params) = match best {
        Some((e, _, p)) => (Some(e), p),
        None => (None, final_params.clone()),
    };
    Ok(FitResult {
        history,
        epochs,
        best_epoch,
        best_params,
        final_params,
    })
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: u32,
    step: u64,
    slide_id: u64,
    loss: f64,
    lr: f64,
}

/// One row per step: `epoch,step,slide_id,loss,lr`.
pub fn write_history_csv(path: &Path, history: &[StepTrace]) -> Result<(), ProtocolError> {
    let mut w = csv::Writer::from_path(path)?;
    for t in history {
        w.serialize(HistoryRow {
            epoch: t.epoch,
            step: t.step,
            slide_id: t.slide_id,
            loss: t.loss,
            lr: t.lr,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// JSON summary of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub frozen_encoder: bool,
    pub n_encoders: usize,
    pub tiles_per_rank: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_val_auc: Option<f64>,
    pub best_val_ci: Option<(f64, f64)>,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochRecord>,
    pub config: TrainConfig,
}

impl RunSummary {
    pub fn new(result: &FitResult, cfg: &TrainConfig, mode: TrainMode) -> Self {
        let best = result.best();
        Self {
            mode,
            frozen_encoder: cfg.frozen_encoder,
            n_encoders: cfg.n_encoders,
            tiles_per_rank: cfg.tiles_per_rank,
            steps: result.history.len(),
            initial_loss: result.initial_loss(),
            final_loss: result.final_loss(),
            best_val_auc: best.and_then(|e| e.val_auc),
            best_val_ci: best.and_then(|e| e.val_ci),
            best_epoch: result.best_epoch,
            epochs: result.epochs.clone(),
            config: cfg.clone(),
        }
    }
}
