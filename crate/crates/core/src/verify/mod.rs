//! Checks that the distributed step computes what the single-graph step
//! computes, that autodiff gradients match finite differences, and
//! slide-level ranking metrics.

mod auc;
mod gradcheck;

pub use auc::{bootstrap_ci, roc_auc, AucInterval};
pub use gradcheck::{
    finite_diff_gradcheck, gradcheck_grid, run_gradcheck_grid, Differentiable, GradCheckOptions,
    GradCheckReport, GridCase, GridReport, ParamError, Perturbed, PipelineLoss,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor};
use crate::nn::NnError;
use crate::protocol::StepTrace;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("shapes {a:?} and {b:?} differ")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("traces do not line up: {0}")]
    TraceMismatch(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("loss is not deterministic: {first} then {second} at the same parameters")]
    NonDeterministic { first: f64, second: f64 },
    #[error("both classes must be present")]
    SingleClass,
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("labels must be 0 or 1, got {0}")]
    InvalidLabel(u8),
    #[error("{0} parameter tensors given, the loss expects {1}")]
    ParamCount(usize, usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `Σ|aᵢ − bᵢ| / (Σ|aᵢ| + 1e-12)`, with `a` the reference.
pub fn normalized_l1(a: &Tensor, b: &Tensor) -> Result<f64, VerifyError> {
    if a.shape() != b.shape() {
        return Err(VerifyError::ShapeMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    let norm: f64 = a.data().iter().map(|x| x.abs()).sum();
    Ok(diff / (norm + 1e-12))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer: String,
    pub param_nl1: f64,
    pub grad_nl1: f64,
}

/// Reference-vs-candidate drift at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub layers: Vec<LayerDrift>,
    pub loss_absdiff: f64,
}

impl MetricsRecord {
    /// Largest parameter or gradient drift over all layers.
    pub fn max_nl1(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| [l.param_nl1, l.grad_nl1])
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.max_nl1() == 0.0 && self.loss_absdiff == 0.0
    }
}

/// Per-step drift of `candidate` from `reference` on every tracked layer.
pub fn compare_runs(reference: &[StepTrace], candidate: &[StepTrace]) -> Result<Vec<MetricsRecord>, VerifyError> {
    if reference.len() != candidate.len() {
        return Err(VerifyError::TraceMismatch(format!(
            "{} reference steps, {} candidate steps",
            reference.len(),
            candidate.len()
        )));
    }
    reference
        .iter()
        .zip(candidate)
        .map(|(r, c)| {
            if r.step != c.step || r.slide_id != c.slide_id {
                return Err(VerifyError::TraceMismatch(format!(
                    "step {} (slide {}) paired with step {} (slide {})",
                    r.step, r.slide_id, c.step, c.slide_id
                )));
            }
            let names = |t: &StepTrace| t.tracked.iter().map(|l| l.name.clone()).collect::<Vec<_>>();
            if names(r) != names(c) {
                return Err(VerifyError::TraceMismatch(format!(
                    "tracked layers {:?} vs {:?} at step {}",
                    names(r),
                    names(c),
                    r.step
                )));
            }
            let layers = r
                .tracked
                .iter()
                .zip(&c.tracked)
                .map(|(a, b)| {
                    Ok(LayerDrift {
                        layer: a.name.clone(),
                        param_nl1: normalized_l1(&a.param, &b.param)?,
                        grad_nl1: normalized_l1(&a.grad, &b.grad)?,
                    })
                })
                .collect::<Result<_, VerifyError>>()?;
            Ok(MetricsRecord {
                step: r.step,
                layers,
                loss_absdiff: (r.loss - c.loss).abs(),
            })
        })
        .collect()
}

/// Flat metrics row, one per `(step, layer)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub layer: String,
    pub param_nl1: f64,
    pub grad_nl1: f64,
    pub loss_absdiff: f64,
}

pub fn metrics_rows(records: &[MetricsRecord]) -> Vec<MetricsRow> {
    records
        .iter()
        .flat_map(|r| {
            r.layers.iter().map(move |l| MetricsRow {
                step: r.step,
                layer: l.layer.clone(),
                param_nl1: l.param_nl1,
                grad_nl1: l.grad_nl1,
                loss_absdiff: r.loss_absdiff,
            })
        })
        .collect()
}

/// Columns `step,layer,param_nl1,grad_nl1,loss_absdiff`.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), VerifyError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in metrics_rows(records) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
