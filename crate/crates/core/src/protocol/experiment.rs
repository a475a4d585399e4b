//! Multi-run experiments on synthetic data: K sweeps and attention checks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fit, infer_slide_detailed, ProtocolError, TrainConfig, TrainMode};
use crate::data::{mccv_splits, SyntheticSlide};
use crate::nn::{init_params, ModelDims, ModelParams};

/// Training and validation slides of one random split.
pub fn split_slides(
    slides: &[SyntheticSlide],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<SyntheticSlide>, Vec<SyntheticSlide>), ProtocolError> {
    let ids: Vec<u64> = (0..slides.len() as u64).collect();
    let plan = mccv_splits(&ids, 1, train_frac, seed)?;
    let pick = |ids: &[u64]| ids.iter().map(|&i| slides[i as usize].clone()).collect();
    Ok((pick(&plan.splits[0].train), pick(&plan.splits[0].val)))
}

/// How many positive slides put more mean attention on witness tiles than
/// on background tiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Positive slides with both witness and background tiles in view.
    pub slides: usize,
    pub localized: usize,
}

impl Localization {
    pub fn fraction(&self) -> f64 {
        if self.slides == 0 {
            return f64::NAN;
        }
        self.localized as f64 / self.slides as f64
    }
}

pub fn attention_localization(
    params: &ModelParams,
    slides: &[SyntheticSlide],
    max_tiles: Option<usize>,
) -> Result<Localization, ProtocolError> {
    let mut out = Localization { slides: 0, localized: 0 };
    for slide in slides.iter().filter(|s| s.label == 1) {
        let inf = infer_slide_detailed(params, slide, max_tiles)?;
        let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (&a, &is_witness) in inf.attention.iter().zip(&slide.witness) {
            if is_witness {
                w += a;
                nw += 1;
            } else {
                b += a;
                nb += 1;
            }
        }
        if nw == 0 || nb == 0 {
            continue;
        }
        out.slides += 1;
        if w / nw as f64 > b / nb as f64 {
            out.localized += 1;
        }
    }
    Ok(out)
}

/// One training run of a K sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub best_val_auc: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

/// Trains once per `(k, seed)`. Each seed sets both the initialization and
/// the run's sampling streams.
pub fn sweep_k(
    train: &[SyntheticSlide],
    val: &[SyntheticSlide],
    dims: &ModelDims,
    base: &TrainConfig,
    ks: &[usize],
    seeds: &[u64],
    mode: TrainMode,
) -> Result<Vec<SweepRow>, ProtocolError> {
    let mut rows = Vec::with_capacity(ks.len() * seeds.len());
    for &k in ks {
        for &seed in seeds {
            let cfg = TrainConfig {
                tiles_per_rank: k,
                seed,
                ..base.clone()
            };
            let init = init_params(seed, dims)?;
            let result = fit(train, val, &init, &cfg, mode)?;
            let best = result.best();
            let ci = best.and_then(|e| e.val_ci);
            log::info!("sweep k={k} seed={seed}: final loss {:.5}", result.final_loss());
            rows.push(SweepRow {
                k,
                seed,
                final_loss: result.final_loss(),
                best_val_auc: best.and_then(|e| e.val_auc),
                ci_lo: ci.map(|c| c.0),
                ci_hi: ci.map(|c| c.1),
            });
        }
    }
    Ok(rows)
}

/// Median over seeds for one K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMedian {
    pub k: usize,
    pub runs: usize,
    pub median_final_loss: f64,
    pub median_best_val_auc: Option<f64>,
}

/// Per-K medians in the order the Ks first appear.
pub fn sweep_medians(rows: &[SweepRow]) -> Vec<SweepMedian> {
    let mut ks: Vec<usize> = Vec::new();
    for r in rows {
        if !ks.contains(&r.k) {
            ks.push(r.k);
        }
    }
    ks.into_iter()
        .map(|k| {
            let of_k: Vec<&SweepRow> = rows.iter().filter(|r| r.k == k).collect();
            let losses: Vec<f64> = of_k.iter().map(|r| r.final_loss).collect();
            let aucs: Vec<f64> = of_k.iter().filter_map(|r| r.best_val_auc).collect();
            SweepMedian {
                k,
                runs: of_k.len(),
                median_final_loss: median(&losses),
                median_best_val_auc: (!aucs.is_empty()).then(|| median(&aucs)),
            }
        })
        .collect()
}

/// Middle value, or the mean of the two middle values. NaN when empty.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Columns `k,seed,final_loss,best_val_auc,ci_lo,ci_hi`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), ProtocolError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
