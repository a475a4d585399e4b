//! Flat run configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use e2emil::autodiff::Precision;
use e2emil::data::DatasetConfig;
use e2emil::fabric::{ReductionMode, SchedulerKind};
use e2emil::nn::{BnMode, ModelDims, OptimConfig, OptimizerKind};
use e2emil::protocol::{TrainConfig, TrainMode};
use e2emil::verify::GradCheckOptions;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNorm {
    #[default]
    None,
    Local,
    Synced,
}

impl BatchNorm {
    pub fn mode(self) -> Option<BnMode> {
        match self {
            BatchNorm::None => None,
            BatchNorm::Local => Some(BnMode::Local),
            BatchNorm::Synced => Some(BnMode::Synced),
        }
    }
}

/// Every tunable of every command. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives data generation, splitting, initialization and sampling.
    pub seed: u64,
    /// Run directory.
    pub out: PathBuf,
    /// Dataset file; `<out>/dataset.bin` when unset.
    pub dataset: Option<PathBuf>,

    pub n_slides: usize,
    pub d: usize,
    pub tiles_median: f64,
    pub tiles_sigma: f64,
    pub tiles_min: usize,
    pub tiles_max: usize,
    pub witness_fraction: f64,
    pub positive_fraction: f64,
    pub delta: f64,
    pub train_fraction: f64,

    pub hidden: Vec<usize>,
    pub features: usize,
    /// Attention width; `max(features / 2, 4)` when unset.
    pub attn: Option<usize>,
    pub batch_norm: BatchNorm,

    pub mode: TrainMode,
    pub encoders: usize,
    pub tiles_per_rank: usize,
    pub epochs: usize,
    pub subsample: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_steps: Option<usize>,
    pub scheduler: SchedulerKind,
    pub reduction: ReductionMode,
    pub precision: Precision,
    pub frozen_encoder: bool,
    pub no_n_scaling: bool,
    pub check_sync: bool,
    pub max_val_tiles: Option<usize>,
    pub n_boot: usize,

    pub k_grid: Vec<usize>,
    pub sweep_seeds: usize,

    pub epsilon: f64,
    pub tolerance: f64,
    pub min_coords: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let train = TrainConfig::default();
        let optim = OptimConfig::default();
        let grad = GradCheckOptions::default();
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            dataset: None,
            n_slides: data.n_slides,
            d: data.d,
            tiles_median: data.tiles_median,
            tiles_sigma: data.tiles_sigma,
            tiles_min: data.tiles_min,
            tiles_max: data.tiles_max,
            witness_fraction: data.witness_fraction,
            positive_fraction: data.positive_fraction,
            delta: data.delta,
            train_fraction: 0.75,
            hidden: vec![32],
            features: 8,
            attn: None,
            batch_norm: BatchNorm::None,
            mode: TrainMode::Distributed,
            encoders: train.n_encoders,
            tiles_per_rank: train.tiles_per_rank,
            epochs: train.epochs,
            subsample: train.subsample,
            optimizer: optim.kind,
            lr: 1e-2,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
            weight_decay: optim.weight_decay,
            momentum: optim.momentum,
            warmup_steps: train.warmup_steps,
            scheduler: train.scheduler,
            reduction: train.reduction,
            precision: train.precision,
            frozen_encoder: train.frozen_encoder,
            no_n_scaling: train.no_n_scaling,
            check_sync: train.check_sync,
            max_val_tiles: train.max_val_tiles,
            n_boot: train.n_boot,
            k_grid: vec![8, 32, 128],
            sweep_seeds: 5,
            epsilon: grad.epsilon,
            tolerance: grad.tolerance,
            min_coords: grad.min_coords,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<TrainMode>,
    pub encoders: Option<usize>,
    pub tiles_per_rank: Option<usize>,
    pub frozen_encoder: bool,
    pub no_n_scaling: bool,
    pub scheduler: Option<SchedulerKind>,
    pub reduction: Option<ReductionMode>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl RunConfig {
    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `file` if given, then `over`.
    pub fn resolve(file: Option<&Path>, over: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(over);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, over: &Overrides) {
        if let Some(v) = over.seed {
            self.seed = v;
        }
        if let Some(v) = over.mode {
            self.mode = v;
        }
        if let Some(v) = over.encoders {
            self.encoders = v;
        }
        if let Some(v) = over.tiles_per_rank {
            self.tiles_per_rank = v;
        }
        self.frozen_encoder |= over.frozen_encoder;
        self.no_n_scaling |= over.no_n_scaling;
        if let Some(v) = over.scheduler {
            self.scheduler = v;
        }
        if let Some(v) = over.reduction {
            self.reduction = v;
        }
        if let Some(v) = &over.out {
            self.out = v.clone();
        }
        if let Some(v) = &over.dataset {
            self.dataset = Some(v.clone());
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.model_dims(self.d)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(CliError::Config("k_grid needs at least one positive K".into()));
        }
        if self.sweep_seeds == 0 {
            return Err(CliError::Config("sweep_seeds must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CliError::Config("epsilon must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(CliError::Config("tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset.bin"))
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_slides: self.n_slides,
            d: self.d,
            tiles_median: self.tiles_median,
            tiles_sigma: self.tiles_sigma,
            tiles_min: self.tiles_min,
            tiles_max: self.tiles_max,
            witness_fraction: self.witness_fraction,
            positive_fraction: self.positive_fraction,
            delta: self.delta,
        }
    }

    /// Model for tiles of width `d`.
    pub fn model_dims(&self, d: usize) -> ModelDims {
        let dims = ModelDims::new(d, self.hidden.clone(), self.features).with_batch_norm(self.batch_norm.mode());
        match self.attn {
            Some(l) => dims.with_attn(l),
            None => dims,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_encoders: self.encoders,
            tiles_per_rank: self.tiles_per_rank,
            epochs: self.epochs,
            subsample: self.subsample,
            optim: OptimConfig {
                kind: self.optimizer,
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
                momentum: self.momentum,
            },
            warmup_steps: self.warmup_steps,
            seed: self.seed,
            scheduler: self.scheduler,
            reduction: self.reduction,
            precision: self.precision,
            frozen_encoder: self.frozen_encoder,
            no_n_scaling: self.no_n_scaling,
            check_sync: self.check_sync,
            max_val_tiles: self.max_val_tiles,
            n_boot: self.n_boot,
        }
    }

    pub fn gradcheck_options(&self) -> GradCheckOptions {
        GradCheckOptions {
            epsilon: self.epsilon,
            tolerance: self.tolerance,
            min_coords: self.min_coords,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("seed = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, CliError::Config(m) if m.contains("learning_rate")));
    }

    #[test]
    fn flags_win_over_file() {
        let mut cfg = RunConfig::parse("seed = 3\nencoders = 4\nmode = \"reference\"\n").unwrap();
        assert_eq!((cfg.seed, cfg.encoders, cfg.mode), (3, 4, TrainMode::Reference));
        cfg.apply(&Overrides {
            encoders: Some(2),
            frozen_encoder: true,
            ..Overrides::default()
        });
        assert_eq!((cfg.seed, cfg.encoders), (3, 2));
        assert!(cfg.frozen_encoder);
        assert_eq!(cfg.mode, TrainMode::Reference);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["encoders = 0", "train_fraction = 1.0", "k_grid = []", "witness_fraction = 2.0", "features = 0"] {
            let cfg = RunConfig::parse(text).unwrap();
            assert!(matches!(cfg.validate(), Err(CliError::Config(_))), "{text}");
        }
        assert!(matches!(RunConfig::parse("encoders = \"two\""), Err(CliError::Config(_))));
    }

    #[test]
    fn conversions_carry_values() {
        let cfg = RunConfig::parse("lr = 0.5\nhidden = [4, 3]\nattn = 7\nbatch_norm = \"synced\"\n").unwrap();
        assert_eq!(cfg.train_config().optim.lr, 0.5);
        let dims = cfg.model_dims(5);
        assert_eq!((dims.d, dims.hidden.clone(), dims.attn), (5, vec![4, 3], 7));
        assert_eq!(dims.batch_norm, Some(BnMode::Synced));
        assert_eq!(cfg.dataset_path(), PathBuf::from("run/dataset.bin"));
    }
}
