//! One optimization step of end-to-end encoder/aggregator training, in two
//! forms that must agree:
//!
//! * [`DistributedTrainer`]: `N` encoder ranks and an aggregator rank. The
//!   encoders send their features to rank 0, which runs the aggregator and
//!   loss, backpropagates to the features and scatters the feature
//!   gradients back. Each encoder then backpropagates the pseudo-loss
//!   `N·Σ f⊙g`, and encoder gradients are averaged across ranks.
//! * [`ReferenceTrainer`]: the same tiles, in the same rank order, encoded
//!   in a single graph with one backward pass.
//!
//! Averaging `N·g_rᵀ ∂f_r/∂θ` over `N` ranks gives `Σ_r g_rᵀ ∂f_r/∂θ`, the
//! gradient of the true loss; dropping the factor `N` divides every
//! encoder gradient by `N`.

mod distributed;
mod experiment;
mod fit;
mod reference;

pub use distributed::{DistributedTrainer, RankState, ReplicaState};
pub use experiment::{
    attention_localization, median, split_slides, sweep_k, sweep_medians, write_sweep_csv, Localization,
    SweepMedian, SweepRow,
};
pub use fit::{
    fit, infer_slide, infer_slide_detailed, write_history_csv, EpochRecord, FitResult, Inference,
    RunSummary, TrainMode,
};
pub use reference::ReferenceTrainer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Precision, Tensor, Var};
use crate::data::{assign_to_ranks, sample_tiles, DataError, SyntheticSlide};
use crate::fabric::{FabricError, ReductionMode, SchedulerKind};
use crate::nn::{MlpEncoder, ModelParams, NnError, OptimConfig};
use crate::verify::VerifyError;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("pseudo-loss: features have shape {features:?}, gradient has {grad:?}")]
    ShapeMismatch { features: Vec<usize>, grad: Vec<usize> },
    #[error("encoder replicas out of sync before step {step}: checksums {checksums:x?} for ranks 1..")]
    Desync { step: u64, checksums: Vec<u64> },
    #[error("step input has {got} rank batches, expected {expected}")]
    BatchCount { expected: usize, got: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Encoder ranks `N`.
    pub n_encoders: usize,
    /// Tiles per encoder rank per step `K`.
    pub tiles_per_rank: usize,
    pub epochs: usize,
    /// Share of training slides visited per epoch.
    pub subsample: f64,
    pub optim: OptimConfig,
    /// Linear warmup length; defaults to 5% of all steps.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    pub scheduler: SchedulerKind,
    pub reduction: ReductionMode,
    pub precision: Precision,
    /// Keep encoder parameters fixed and train only the aggregator.
    pub frozen_encoder: bool,
    /// Drop the `×N` factor of the pseudo-loss. Only useful to demonstrate
    /// that the factor is needed.
    pub no_n_scaling: bool,
    /// Compare encoder checksums at rank 0 before every step.
    pub check_sync: bool,
    /// Tiles used per slide at validation; all when unset.
    pub max_val_tiles: Option<usize>,
    /// Bootstrap resamples for validation AUC intervals.
    pub n_boot: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_encoders: 2,
            tiles_per_rank: 16,
            epochs: 5,
            subsample: 0.5,
            optim: OptimConfig::default(),
            warmup_steps: None,
            seed: 0,
            scheduler: SchedulerKind::Sequential,
            reduction: ReductionMode::Deterministic,
            precision: Precision::F64,
            frozen_encoder: false,
            no_n_scaling: false,
            check_sync: true,
            max_val_tiles: None,
            n_boot: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::InvalidConfig(m.to_string()));
        if self.n_encoders == 0 {
            return bad("n_encoders must be at least 1");
        }
        if self.tiles_per_rank == 0 {
            return bad("tiles_per_rank must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if !(self.optim.lr.is_finite() && self.optim.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.max_val_tiles == Some(0) {
            return bad("max_val_tiles must be at least 1");
        }
        if self.n_boot == 0 {
            return bad("n_boot must be at least 1");
        }
        Ok(())
    }

    /// Tiles per slide per step, `N·K`.
    pub fn tiles_per_step(&self) -> usize {
        self.n_encoders * self.tiles_per_rank
    }
}

/// Everything a step consumes besides the model: the sampled tiles, split
/// into one batch per encoder rank.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub epoch: u32,
    /// Global step counter, starting at 0.
    pub step: u64,
    pub slide_id: u64,
    pub label: u8,
    /// `batches[i]` goes to rank `i + 1`.
    pub batches: Vec<Tensor>,
}

pub(crate) const TILE_STREAM: u64 = 1;
pub(crate) const EPOCH_STREAM: u64 = 2;
pub(crate) const PLAN_STREAM: u64 = 3;

/// Independent generator for `(seed, purpose, index)`.
pub(crate) fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

/// Samples `N·K` tiles from `slide` and deals them out to the ranks.
pub fn prepare_step(slide: &SyntheticSlide, cfg: &TrainConfig, epoch: u32, step: u64) -> Result<StepInput, ProtocolError> {
    let mut rng = stream_rng(cfg.seed, TILE_STREAM, step);
    let (tiles, _) = sample_tiles(slide, cfg.tiles_per_step(), &mut rng)?;
    Ok(StepInput {
        epoch,
        step,
        slide_id: slide.id,
        label: slide.label,
        batches: assign_to_ranks(&tiles, cfg.n_encoders, cfg.tiles_per_rank)?,
    })
}

/// `l_e = n·Σ f⊙g`, so that `∂l_e/∂f = n·g`. `g` is a plain tensor and
/// therefore never part of the graph.
pub fn pseudo_loss(graph: &mut Graph, f: Var, g: &Tensor, n: usize) -> Result<Var, ProtocolError> {
    let fv = graph.value(f);
    if fv.shape() != g.shape() {
        return Err(ProtocolError::ShapeMismatch {
            features: fv.shape().to_vec(),
            grad: g.shape().to_vec(),
        });
    }
    let g = graph.constant(g.clone());
    let prod = graph.mul(f, g)?;
    let total = graph.reduce_sum(prod)?;
    Ok(graph.scale(total, n as f64)?)
}

/// Parameters and gradients of one tracked layer, weight then bias,
/// flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedLayer {
    pub name: String,
    /// After the step's update.
    pub param: Tensor,
    /// The gradient the update used.
    pub grad: Tensor,
}

/// Record of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub epoch: u32,
    pub step: u64,
    pub slide_id: u64,
    pub loss: f64,
    pub lr: f64,
    /// Fingerprint of each rank's feature block, in rank order.
    pub feature_checksums: Vec<u64>,
    /// Fingerprint of each encoder replica after the update.
    pub replica_checksums: Vec<u64>,
    /// First encoder linear, last encoder linear, classifier.
    pub tracked: Vec<TrackedLayer>,
}

/// Index of layer `i`'s weight in [`MlpEncoder::tensors`], and of its bias.
fn layer_slots(enc: &MlpEncoder, i: usize) -> (usize, Option<usize>) {
    let w = enc.layers[..i].iter().map(|l| 1 + usize::from(l.b.is_some())).sum();
    (w, enc.layers[i].b.as_ref().map(|_| w + 1))
}

fn flatten(parts: &[&Tensor]) -> Tensor {
    Tensor::vector(parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

pub(crate) fn tracked_layers(params: &ModelParams, enc_grads: &[Tensor], gma_grads: &[Tensor]) -> Vec<TrackedLayer> {
    let enc = &params.encoder;
    let enc_params = enc.tensors();
    let last = enc.layers.len() - 1;
    let mut layers: Vec<usize> = vec![0, last];
    layers.dedup();
    let mut out: Vec<TrackedLayer> = layers
        .into_iter()
        .map(|i| {
            let (w, b) = layer_slots(enc, i);
            let idx: Vec<usize> = std::iter::once(w).chain(b).collect();
            TrackedLayer {
                name: format!("encoder.{i}"),
                param: flatten(&idx.iter().map(|&j| enc_params[j]).collect::<Vec<_>>()),
                grad: flatten(&idx.iter().map(|&j| &enc_grads[j]).collect::<Vec<_>>()),
            }
        })
        .collect();
    // classifier weight and bias are the last entries of GatedAttention::tensors
    let gma_params = params.gma.tensors();
    let start = 3;
    out.push(TrackedLayer {
        name: "classifier".into(),
        param: flatten(&gma_params[start..]),
        grad: flatten(&gma_grads[start..].iter().collect::<Vec<_>>()),
    });
    out
}

/// A trainer advances the model by one slide per call.
pub trait Trainer {
    fn step(&mut self, input: &StepInput, lr: f64) -> Result<StepTrace, ProtocolError>;

    /// Current parameters: encoder replica and aggregator.
    fn params(&self) -> ModelParams;
}

/// Splits a flat vector back into tensors shaped like `like`.
pub(crate) fn unflatten(flat: &Tensor, like: &[&Tensor]) -> Vec<Tensor> {
    let mut start = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let part = flat.data()[start..start + n].to_vec();
            start += n;
            Tensor::new(t.shape(), part).expect("sized")
        })
        .collect()
}

#[cfg(test)]
mod tests;
