use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::autodiff::Tensor;

/// How batch-norm statistics are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Each batch is normalized with its own statistics.
    Local,
    /// All batches of a step share statistics pooled over every encoder rank.
    #[default]
    Synced,
}

/// Layer widths of the encoder and aggregator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Tile feature dimension `D`.
    pub d: usize,
    /// Widths of the hidden encoder layers.
    pub hidden: Vec<usize>,
    /// Encoder output dimension `F`.
    pub f: usize,
    /// Attention hidden dimension `L`.
    pub attn: usize,
    /// Batch norm after every hidden linear, if set.
    pub batch_norm: Option<BnMode>,
}

impl ModelDims {
    /// Encoder without batch norm and the default attention width.
    pub fn new(d: usize, hidden: Vec<usize>, f: usize) -> Self {
        Self {
            d,
            hidden,
            f,
            attn: Self::default_attn(f),
            batch_norm: None,
        }
    }

    /// `max(F / 2, 4)`.
    pub fn default_attn(f: usize) -> usize {
        (f / 2).max(4)
    }

    pub fn with_attn(mut self, attn: usize) -> Self {
        self.attn = attn;
        self
    }

    pub fn with_batch_norm(mut self, mode: Option<BnMode>) -> Self {
        self.batch_norm = mode;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |what: &str| Err(NnError::InvalidDims(what.to_string()));
        if self.d == 0 {
            return bad("tile dimension must be positive");
        }
        if self.f == 0 {
            return bad("feature dimension must be positive");
        }
        if self.attn == 0 {
            return bad("attention dimension must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    /// `(in, out)` of every encoder linear.
    pub fn linear_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.d];
        widths.extend(&self.hidden);
        widths.push(self.f);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `out × in`.
    pub w: Tensor,
    /// `[out]`. Absent on linears that feed a batch norm, whose shift
    /// would cancel it.
    pub b: Option<Tensor>,
}

impl LinearLayer {
    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    /// Uniform weights with bound `sqrt(gain / fan_in)`, zero bias.
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, out: usize, gain: f64, bias: bool) -> Self {
        Self {
            w: uniform(rng, &[out, fan_in], fan_in_bound(gain, fan_in)),
            b: bias.then(|| Tensor::zeros(&[out])),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl BatchNorm1d {
    pub const EPS: f64 = 1e-5;

    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[width]),
            beta: Tensor::zeros(&[width]),
            eps: Self::EPS,
        }
    }
}

/// Per-tile MLP: linear, then (batch norm and) ReLU after every hidden
/// linear; the last linear has no activation.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    pub layers: Vec<LinearLayer>,
    /// Empty, or one entry per hidden linear.
    pub norms: Vec<BatchNorm1d>,
    pub bn_mode: BnMode,
}

impl MlpEncoder {
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.norms.is_empty()
    }
}

/// Gated attention pooling followed by a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedAttention {
    /// `L × F`.
    pub v: Tensor,
    /// `L × F`.
    pub u: Tensor,
    /// `[L]`.
    pub w: Tensor,
    /// `F → 1`.
    pub classifier: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: MlpEncoder,
    pub gma: GatedAttention,
}

/// Keeps activation variance through a ReLU.
const RELU_GAIN: f64 = 6.0;
/// Keeps activation variance through a linear map.
const LINEAR_GAIN: f64 = 3.0;
/// Attention vector starts at this fraction of the variance-preserving scale.
pub const ATTN_W_SCALE: f64 = 0.1;

fn fan_in_bound(gain: f64, fan_in: usize) -> f64 {
    (gain / fan_in as f64).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Deterministic initialization from `seed`.
pub fn init_params(seed: u64, dims: &ModelDims) -> Result<ModelParams, NnError> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = dims.linear_shapes();
    let n_layers = shapes.len();
    let layers: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(k, &(i, o))| {
            let feeds_norm = dims.batch_norm.is_some() && k + 1 < n_layers;
            let gain = if k + 1 < n_layers { RELU_GAIN } else { LINEAR_GAIN };
            LinearLayer::init(&mut rng, i, o, gain, !feeds_norm)
        })
        .collect();
    let norms = match dims.batch_norm {
        Some(_) => dims.hidden.iter().map(|&w| BatchNorm1d::new(w)).collect(),
        None => Vec::new(),
    };
    let (f, l) = (dims.f, dims.attn);
    let fan = fan_in_bound(LINEAR_GAIN, f);
    let gma = GatedAttention {
        v: uniform(&mut rng, &[l, f], fan),
        u: uniform(&mut rng, &[l, f], fan),
        w: uniform(&mut rng, &[l], ATTN_W_SCALE * fan_in_bound(LINEAR_GAIN, l)),
        classifier: LinearLayer::init(&mut rng, f, 1, LINEAR_GAIN, true),
    };
    Ok(ModelParams {
        encoder: MlpEncoder {
            layers,
            norms,
            bn_mode: dims.batch_norm.unwrap_or_default(),
        },
        gma,
    })
}

impl MlpEncoder {
    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w);
            out.extend(&l.b);
        }
        for n in &self.norms {
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.extend(l.b.as_mut());
        }
        for n in &mut self.norms {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("encoder.{i}.w"));
            if l.b.is_some() {
                out.push(format!("encoder.{i}.b"));
            }
        }
        for i in 0..self.norms.len() {
            out.push(format!("encoder.bn{i}.gamma"));
            out.push(format!("encoder.bn{i}.beta"));
        }
        out
    }
}

impl GatedAttention {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.v, &self.u, &self.w, &self.classifier.w];
        out.extend(&self.classifier.b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.v, &mut self.u, &mut self.w, &mut self.classifier.w];
        out.extend(self.classifier.b.as_mut());
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["gma.v", "gma.u", "gma.w", "classifier.w"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.classifier.b.is_some() {
            out.push("classifier.b".into());
        }
        out
    }
}

impl ModelParams {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut names = self.encoder.names();
        names.extend(self.gma.names());
        let mut tensors = self.encoder.tensors();
        tensors.extend(self.gma.tensors());
        names.into_iter().zip(tensors).collect()
    }

    pub fn dims(&self) -> ModelDims {
        let layers = &self.encoder.layers;
        ModelDims {
            d: self.encoder.in_dim(),
            hidden: layers[..layers.len() - 1].iter().map(LinearLayer::out_dim).collect(),
            f: self.encoder.out_dim(),
            attn: self.gma.v.rows(),
            batch_norm: self
                .encoder
                .has_batch_norm()
                .then_some(self.encoder.bn_mode),
        }
    }

    /// Rebuilds parameters from `(name, tensor)` pairs as produced by
    /// [`named_tensors`](Self::named_tensors).
    pub fn from_named(named: Vec<(String, Tensor)>, bn_mode: BnMode) -> Result<Self, NnError> {
        let mut map: std::collections::BTreeMap<String, Tensor> = named.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))
        };
        let mut layers = Vec::new();
        while let Ok(w) = take(&format!("encoder.{}.w", layers.len())) {
            let b = take(&format!("encoder.{}.b", layers.len())).ok();
            layers.push(LinearLayer { w, b });
        }
        if layers.is_empty() {
            return Err(NnError::Checkpoint("no encoder layers".into()));
        }
        let mut norms = Vec::new();
        while let Ok(gamma) = take(&format!("encoder.bn{}.gamma", norms.len())) {
            let beta = take(&format!("encoder.bn{}.beta", norms.len()))?;
            norms.push(BatchNorm1d {
                gamma,
                beta,
                eps: BatchNorm1d::EPS,
            });
        }
        let gma = GatedAttention {
            v: take("gma.v")?,
            u: take("gma.u")?,
            w: take("gma.w")?,
            classifier: LinearLayer {
                w: take("classifier.w")?,
                b: take("classifier.b").ok(),
            },
        };
        drop(take);
        if let Some(extra) = map.keys().next() {
            return Err(NnError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let params = Self {
            encoder: MlpEncoder {
                layers,
                norms,
                bn_mode,
            },
            gma,
        };
        params.check_shapes()?;
        Ok(params)
    }

    /// Verifies that all shapes chain together and every value is finite.
    pub fn check_shapes(&self) -> Result<(), NnError> {
        let dims = self.dims();
        dims.validate()?;
        let bad = |what: String| Err(NnError::InvalidDims(what));
        for (i, (l, (fan_in, out))) in self
            .encoder
            .layers
            .iter()
            .zip(dims.linear_shapes())
            .enumerate()
        {
            if l.w.shape() != [out, fan_in] || l.b.as_ref().is_some_and(|b| b.shape() != [out]) {
                return bad(format!("encoder layer {i} has inconsistent shapes"));
            }
        }
        if !self.encoder.norms.is_empty() && self.encoder.norms.len() != dims.hidden.len() {
            return bad("one batch norm per hidden layer expected".into());
        }
        for (n, &w) in self.encoder.norms.iter().zip(&dims.hidden) {
            if n.gamma.shape() != [w] || n.beta.shape() != [w] {
                return bad("batch norm width mismatch".into());
            }
        }
        let (l, f) = (dims.attn, dims.f);
        let g = &self.gma;
        if g.v.shape() != [l, f]
            || g.u.shape() != [l, f]
            || g.w.shape() != [l]
            || g.classifier.w.shape() != [1, f]
            || g.classifier.b.as_ref().is_some_and(|b| b.shape() != [1])
        {
            return bad("aggregator shapes inconsistent".into());
        }
        if self.named_tensors().iter().any(|(_, t)| !t.is_finite()) {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for b in t.bits() {
                h.update(b.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Fast fingerprint of a tensor list, used for replica desync checks.
pub fn tensors_fingerprint<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for t in tensors {
        for b in t.bits() {
            h.update(b.to_le_bytes());
        }
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}
