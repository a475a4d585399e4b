//! Synthetic witness-tile MIL data, tile sampling, rank assignment and
//! train/validation splitting.
//!
//! Background tiles are drawn from `N(0, I_D)`, witness tiles from
//! `N(Δ·u, I_D)` with `u = (1, …, 1)/√D`. A slide is positive exactly when
//! it holds at least one witness tile.

mod io;
mod sampler;

pub use io::{decode_dataset, encode_dataset, read_dataset, summarize, write_dataset, DatasetSummary};
pub use sampler::{assign_to_ranks, epoch_subsample, mccv_splits, sample_tiles, Split, SplitPlan};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("slide {0} has no tiles")]
    EmptySlide(u64),
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("{m} tiles cannot be split into {n} batches of {k}")]
    AssignMismatch { m: usize, n: usize, k: usize },
    #[error("no slide ids given")]
    EmptyIds,
    #[error("fraction {0} outside the allowed range")]
    InvalidFraction(f64),
    #[error("split count must be at least 1")]
    NoSplits,
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One bag of tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlide {
    pub id: u64,
    /// `T × D`; values are exactly representable in 32 bits.
    pub tiles: Tensor,
    pub label: u8,
    pub witness: Vec<bool>,
}

impl SyntheticSlide {
    pub fn n_tiles(&self) -> usize {
        self.tiles.rows()
    }

    pub fn n_witness(&self) -> usize {
        self.witness.iter().filter(|&&w| w).count()
    }

    /// `label = 1` exactly when some tile is a witness.
    pub fn is_consistent(&self) -> bool {
        self.witness.len() == self.n_tiles() && (self.label == 1) == (self.n_witness() > 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_slides: usize,
    /// Tile dimension `D`.
    pub d: usize,
    /// Median of the lognormal tile-count distribution.
    pub tiles_median: f64,
    /// Log-scale spread of the tile-count distribution.
    pub tiles_sigma: f64,
    pub tiles_min: usize,
    pub tiles_max: usize,
    /// Share of a positive slide's tiles that are witnesses (rounded up).
    pub witness_fraction: f64,
    /// Share of positive slides.
    pub positive_fraction: f64,
    /// Mean shift of witness tiles along `u`.
    pub delta: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_slides: 200,
            d: 16,
            tiles_median: 300.0,
            tiles_sigma: 0.5,
            tiles_min: 16,
            tiles_max: 600,
            witness_fraction: 0.05,
            positive_fraction: 0.5,
            delta: 2.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_slides == 0 {
            return bad("n_slides must be positive");
        }
        if self.d == 0 {
            return bad("d must be positive");
        }
        if self.tiles_min == 0 || self.tiles_min > self.tiles_max {
            return bad("need 1 <= tiles_min <= tiles_max");
        }
        if !(self.tiles_median.is_finite() && self.tiles_median > 0.0) {
            return bad("tiles_median must be positive");
        }
        if !(self.tiles_sigma.is_finite() && self.tiles_sigma >= 0.0) {
            return bad("tiles_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.witness_fraction) {
            return bad("witness_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must lie in [0, 1]");
        }
        if !self.delta.is_finite() {
            return bad("delta must be finite");
        }
        Ok(())
    }

    /// Number of positive slides.
    pub fn n_positive(&self) -> usize {
        if self.witness_fraction == 0.0 {
            0
        } else {
            (self.positive_fraction * self.n_slides as f64).round() as usize
        }
    }
}

/// Deterministic dataset of `cfg.n_slides` slides with ids `0..n`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<SyntheticSlide>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = cfg.n_positive();
    let mut labels: Vec<u8> = (0..cfg.n_slides).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);

    let shift = cfg.delta / (cfg.d as f64).sqrt();
    let log_median = cfg.tiles_median.ln();
    let mut slides = Vec::with_capacity(cfg.n_slides);
    for (i, &label) in labels.iter().enumerate() {
        let z: f64 = StandardNormal.sample(&mut rng);
        let t = ((log_median + cfg.tiles_sigma * z).exp().round() as usize).clamp(cfg.tiles_min, cfg.tiles_max);
        let mut witness = vec![false; t];
        if label == 1 {
            let n_w = ((cfg.witness_fraction * t as f64).ceil() as usize).clamp(1, t);
            for k in index::sample(&mut rng, t, n_w) {
                witness[k] = true;
            }
        }
        let mut data = Vec::with_capacity(t * cfg.d);
        for &is_witness in &witness {
            let offset = if is_witness { shift } else { 0.0 };
            for _ in 0..cfg.d {
                let x: f64 = StandardNormal.sample(&mut rng);
                data.push((x + offset) as f32 as f64);
            }
        }
        slides.push(SyntheticSlide {
            id: i as u64,
            tiles: Tensor::new(&[t, cfg.d], data).expect("sized"),
            label,
            witness,
        });
    }
    Ok(slides)
}
