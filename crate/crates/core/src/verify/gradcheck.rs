use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::VerifyError;
use crate::autodiff::{Graph, Tensor};
use crate::nn::{
    bce_with_logits, encoder_forward_batches, gma_forward, init_params, BnMode, BoundEncoder, BoundGma,
    ModelDims, ModelParams,
};

/// A scalar function of a list of tensors with an analytic gradient.
pub trait Differentiable {
    fn names(&self) -> Vec<String>;
    fn loss(&self, params: &[Tensor]) -> Result<f64, VerifyError>;
    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Tensor>, VerifyError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Coordinates to check at least (or all, when fewer exist).
    pub min_coords: usize,
    /// Drives coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-5,
            min_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub coords: usize,
    pub max_rel_error: f64,
    pub pass: bool,
    pub params: Vec<ParamError>,
}

/// Coordinates per tensor: all of them when the model is small, otherwise
/// a proportional random share with at least a few per tensor.
fn pick_coords(sizes: &[usize], min_coords: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if total <= 4 * min_coords {
        return sizes.iter().map(|&n| (0..n).collect()).collect();
    }
    sizes
        .iter()
        .map(|&n| {
            let share = (min_coords * n).div_ceil(total);
            let m = share.max(4).min(n);
            let mut idx = index::sample(rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Compares `f.gradient` against central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε`. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_gradcheck(
    f: &dyn Differentiable,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, VerifyError> {
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(VerifyError::InvalidEpsilon(opts.epsilon));
    }
    let names = f.names();
    if names.len() != params.len() {
        return Err(VerifyError::ParamCount(params.len(), names.len()));
    }
    let first = f.loss(params)?;
    let second = f.loss(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(VerifyError::NonDeterministic { first, second });
    }
    let analytic = f.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(VerifyError::ParamCount(analytic.len(), params.len()));
    }
    for (a, p) in analytic.iter().zip(params) {
        if a.shape() != p.shape() {
            return Err(VerifyError::ShapeMismatch {
                a: p.shape().to_vec(),
                b: a.shape().to_vec(),
            });
        }
    }

    let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
    let coords = pick_coords(&sizes, opts.min_coords, &mut ChaCha8Rng::seed_from_u64(opts.seed));
    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (ti, idx) in coords.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &ci in idx {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + opts.epsilon;
            let plus = f.loss(&work)?;
            work[ti].data_mut()[ci] = orig - opts.epsilon;
            let minus = f.loss(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[ti].data()[ci];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            // NaN must fail the check
            max_rel = if rel.is_nan() { f64::INFINITY } else { max_rel.max(rel) };
            max_abs = max_abs.max(abs);
        }
        per_param.push(ParamError {
            name: names[ti].clone(),
            coords: idx.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        epsilon: opts.epsilon,
        tolerance: opts.tolerance,
        coords: per_param.iter().map(|p| p.coords).sum(),
        max_rel_error,
        pass: max_rel_error < opts.tolerance,
        params: per_param,
    })
}

/// Loss of one training step of the whole model: encoder over several
/// batches (pooled batch norm when synced), gated attention, BCE.
#[derive(Clone, Debug)]
pub struct PipelineLoss {
    template: ModelParams,
    batches: Vec<Tensor>,
    label: f64,
}

impl PipelineLoss {
    pub fn new(params: &ModelParams, batches: Vec<Tensor>, label: u8) -> Self {
        Self {
            template: params.clone(),
            batches,
            label: f64::from(label),
        }
    }

    /// Parameter tensors in the order the loss expects.
    pub fn params(&self) -> Vec<Tensor> {
        self.template.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    fn with(&self, params: &[Tensor]) -> Result<ModelParams, VerifyError> {
        let mut model = self.template.clone();
        let mut slots = model.encoder.tensors_mut();
        slots.extend(model.gma.tensors_mut());
        if slots.len() != params.len() {
            return Err(VerifyError::ParamCount(params.len(), slots.len()));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(VerifyError::ShapeMismatch {
                    a: slot.shape().to_vec(),
                    b: p.shape().to_vec(),
                });
            }
            *slot = p.clone();
        }
        Ok(model)
    }

    fn run(&self, params: &[Tensor], with_grad: bool) -> Result<(f64, Vec<Tensor>), VerifyError> {
        let model = self.with(params)?;
        let mut g = Graph::new();
        let enc = BoundEncoder::bind(&mut g, &model.encoder, true);
        let gma = BoundGma::bind(&mut g, &model.gma, true);
        let xs: Vec<_> = self.batches.iter().map(|b| g.constant(b.clone())).collect();
        let fs = encoder_forward_batches(&mut g, &enc, &xs)?;
        let h = g.concat_rows(&fs)?;
        let out = gma_forward(&mut g, &gma, h)?;
        let loss = bce_with_logits(&mut g, out.logit, self.label)?;
        let value = g.value(loss).item().expect("scalar loss");
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let mut vars = enc.vars();
        vars.extend(gma.vars());
        Ok((value, vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect()))
    }
}

impl Differentiable for PipelineLoss {
    fn names(&self) -> Vec<String> {
        self.template.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    fn loss(&self, params: &[Tensor]) -> Result<f64, VerifyError> {
        Ok(self.run(params, false)?.0)
    }

    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Tensor>, VerifyError> {
        Ok(self.run(params, true)?.1)
    }
}

/// Wraps a loss and scales one coordinate of its analytic gradient, to
/// confirm the checker notices a wrong gradient.
pub struct Perturbed<'a> {
    pub inner: &'a dyn Differentiable,
    pub tensor: usize,
    pub coord: usize,
    pub factor: f64,
}

impl Differentiable for Perturbed<'_> {
    fn names(&self) -> Vec<String> {
        self.inner.names()
    }

    fn loss(&self, params: &[Tensor]) -> Result<f64, VerifyError> {
        self.inner.loss(params)
    }

    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Tensor>, VerifyError> {
        let mut g = self.inner.gradient(params)?;
        if let Some(v) = g.get_mut(self.tensor).and_then(|t| t.data_mut().get_mut(self.coord)) {
            *v *= self.factor;
        }
        Ok(g)
    }
}

/// One model configuration of the gradient-check grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub name: String,
    pub dims: ModelDims,
    /// Encoder batches `N`.
    pub batches: usize,
    /// Tiles per batch `K`.
    pub k: usize,
    pub label: u8,
    pub seed: u64,
}

impl GridCase {
    fn new(d: usize, hidden: &[usize], f: usize, l: usize, bn: Option<BnMode>, batches: usize, k: usize, seed: u64) -> Self {
        let bn_name = match bn {
            None => "nobn",
            Some(BnMode::Local) => "localbn",
            Some(BnMode::Synced) => "syncbn",
        };
        Self {
            name: format!("d{d}-h{hidden:?}-f{f}-l{l}-n{batches}-k{k}-{bn_name}").replace(' ', ""),
            dims: ModelDims::new(d, hidden.to_vec(), f).with_attn(l).with_batch_norm(bn),
            batches,
            k,
            label: (seed % 2) as u8,
            seed,
        }
    }

    /// The loss and starting parameters of this case.
    pub fn build(&self) -> Result<(PipelineLoss, Vec<Tensor>), VerifyError> {
        let params = init_params(self.seed, &self.dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let batches = (0..self.batches)
            .map(|_| {
                let data = (0..self.k * self.dims.d).map(|_| StandardNormal.sample(&mut rng)).collect();
                Tensor::new(&[self.k, self.dims.d], data).expect("sized")
            })
            .collect();
        let loss = PipelineLoss::new(&params, batches, self.label);
        let start = loss.params();
        Ok((loss, start))
    }
}

/// Small configurations over tile width `D`, feature width `F`, attention
/// width `L`, batch size `K`, batch count and batch-norm mode.
pub fn gradcheck_grid() -> Vec<GridCase> {
    vec![
        GridCase::new(6, &[8], 4, 3, None, 2, 5, 101),
        GridCase::new(6, &[8], 4, 3, Some(BnMode::Synced), 2, 5, 102),
        GridCase::new(4, &[], 3, 2, None, 1, 3, 103),
        GridCase::new(5, &[6, 5], 4, 4, Some(BnMode::Synced), 3, 4, 104),
        GridCase::new(3, &[4], 2, 4, Some(BnMode::Local), 2, 6, 105),
        GridCase::new(8, &[8], 6, 3, None, 4, 2, 106),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub pass: bool,
    pub coords: usize,
    pub max_rel_error: f64,
    pub cases: Vec<(String, GradCheckReport)>,
}

pub fn run_gradcheck_grid(cases: &[GridCase], opts: &GradCheckOptions) -> Result<GridReport, VerifyError> {
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let (loss, start) = case.build()?;
        out.push((case.name.clone(), finite_diff_gradcheck(&loss, &start, opts)?));
    }
    Ok(GridReport {
        pass: out.iter().all(|(_, r)| r.pass),
        coords: out.iter().map(|(_, r)| r.coords).sum(),
        max_rel_error: out.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max),
        cases: out,
    })
}
