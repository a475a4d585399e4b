use super::{BnMode, GatedAttention, LinearLayer, MlpEncoder, NnError};
use crate::autodiff::{Graph, Precision, Tensor, Var};
use crate::fabric::{FabricError, ProcessGroup, Rank, ReduceOp, ReductionPlan};

/// A [`LinearLayer`] inserted into a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub layers: Vec<BoundLinear>,
    pub norms: Vec<BoundNorm>,
    pub mode: BnMode,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGma {
    pub v: Var,
    pub u: Var,
    pub w: Var,
    pub classifier: BoundLinear,
}

fn bind_tensor(g: &mut Graph, t: &Tensor, trainable: bool) -> Var {
    g.leaf(t.clone(), trainable)
}

impl BoundLinear {
    pub fn bind(g: &mut Graph, l: &LinearLayer, trainable: bool) -> Self {
        Self {
            w: bind_tensor(g, &l.w, trainable),
            b: l.b.as_ref().map(|b| bind_tensor(g, b, trainable)),
        }
    }
}

impl BoundEncoder {
    /// Inserts every encoder parameter as a leaf. With `trainable == false`
    /// the leaves are constants and receive no gradient.
    pub fn bind(g: &mut Graph, enc: &MlpEncoder, trainable: bool) -> Self {
        let layers = enc
            .layers
            .iter()
            .map(|l| BoundLinear::bind(g, l, trainable))
            .collect();
        let norms = enc
            .norms
            .iter()
            .map(|n| BoundNorm {
                gamma: bind_tensor(g, &n.gamma, trainable),
                beta: bind_tensor(g, &n.beta, trainable),
                eps: n.eps,
            })
            .collect();
        Self {
            layers,
            norms,
            mode: enc.bn_mode,
        }
    }

    /// Leaves in the order of [`MlpEncoder::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w);
            out.extend(l.b);
        }
        for n in &self.norms {
            out.extend([n.gamma, n.beta]);
        }
        out
    }

    pub fn in_dim(&self, g: &Graph) -> usize {
        g.value(self.layers[0].w).cols()
    }
}

impl BoundGma {
    pub fn bind(g: &mut Graph, gma: &GatedAttention, trainable: bool) -> Self {
        Self {
            v: bind_tensor(g, &gma.v, trainable),
            u: bind_tensor(g, &gma.u, trainable),
            w: bind_tensor(g, &gma.w, trainable),
            classifier: BoundLinear::bind(g, &gma.classifier, trainable),
        }
    }

    /// Leaves in the order of [`GatedAttention::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.v, self.u, self.w, self.classifier.w];
        out.extend(self.classifier.b);
        out
    }
}

/// `x·Wᵀ + b` for `x: [K × in]`; without bias when the layer has none.
pub fn linear(g: &mut Graph, l: &BoundLinear, x: Var) -> Result<Var, NnError> {
    let want = g.value(l.w).cols();
    let got = g.value(x).cols();
    if g.value(x).rank() != 2 || got != want {
        return Err(NnError::DimMismatch {
            expected: want,
            got,
        });
    }
    let wt = g.transpose(l.w)?;
    let y = g.matmul(x, wt)?;
    match l.b {
        Some(b) => Ok(g.add(y, b)?),
        None => Ok(y),
    }
}

/// Column sums of `h` and of `h ⊙ h`.
fn bn_sums(g: &mut Graph, h: Var) -> Result<(Var, Var), NnError> {
    let s = g.sum_rows(h)?;
    let hh = g.mul(h, h)?;
    let q = g.sum_rows(hh)?;
    Ok((s, q))
}

/// Normalizes `h` with statistics derived from pooled sums over `count` rows.
fn bn_apply(
    g: &mut Graph,
    norm: &BoundNorm,
    h: Var,
    sum: Var,
    sqsum: Var,
    count: f64,
) -> Result<Var, NnError> {
    let inv = 1.0 / count;
    let mean = g.scale(sum, inv)?;
    let ex2 = g.scale(sqsum, inv)?;
    let msq = g.mul(mean, mean)?;
    let var = g.sub(ex2, msq)?;
    let rs = g.rsqrt_eps(var, norm.eps)?;
    let centered = g.sub(h, mean)?;
    let normed = g.mul(centered, rs)?;
    let scaled = g.mul(normed, norm.gamma)?;
    Ok(g.add(scaled, norm.beta)?)
}

/// Batch-norm input of one hidden layer, waiting for pooled statistics.
#[derive(Clone, Copy, Debug)]
pub struct BnRequest {
    pub layer: usize,
    /// Column sums of this batch, `[F_l]`.
    pub sum: Var,
    /// Column sums of squares of this batch, `[F_l]`.
    pub sqsum: Var,
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum EncoderStage {
    NeedStats(BnRequest),
    Done(Var),
}

/// Incremental encoder forward that pauses at every batch norm until
/// statistics are supplied. All forward paths go through this type so
/// that single-graph and multi-worker encodings are built from the same
/// operations in the same order.
#[derive(Debug)]
pub struct EncoderPass {
    next: usize,
    h: Var,
    pending: Option<Var>,
    done: bool,
}

impl EncoderPass {
    pub fn new(g: &Graph, enc: &BoundEncoder, x: Var) -> Result<Self, NnError> {
        let xv = g.value(x);
        let d = enc.in_dim(g);
        if xv.rank() != 2 || xv.cols() != d {
            return Err(NnError::DimMismatch {
                expected: d,
                got: xv.cols(),
            });
        }
        if xv.rows() == 0 {
            return Err(NnError::EmptyBag);
        }
        Ok(Self {
            next: 0,
            h: x,
            pending: None,
            done: false,
        })
    }

    pub fn advance(&mut self, g: &mut Graph, enc: &BoundEncoder) -> Result<EncoderStage, NnError> {
        if self.done || self.pending.is_some() {
            return Err(NnError::PassState("advance called out of order"));
        }
        loop {
            let i = self.next;
            let z = linear(g, &enc.layers[i], self.h)?;
            self.next += 1;
            if i + 1 == enc.layers.len() {
                self.done = true;
                return Ok(EncoderStage::Done(z));
            }
            if !enc.norms.is_empty() {
                let (sum, sqsum) = bn_sums(g, z)?;
                self.pending = Some(z);
                return Ok(EncoderStage::NeedStats(BnRequest {
                    layer: i,
                    sum,
                    sqsum,
                    count: g.value(z).rows(),
                }));
            }
            self.h = g.relu(z)?;
        }
    }

    /// Completes the pending batch norm with pooled `sum` and `sqsum` over
    /// `count` rows.
    pub fn provide_stats(
        &mut self,
        g: &mut Graph,
        enc: &BoundEncoder,
        sum: Var,
        sqsum: Var,
        count: f64,
    ) -> Result<(), NnError> {
        let z = self
            .pending
            .take()
            .ok_or(NnError::PassState("no statistics pending"))?;
        let norm = enc.norms[self.next - 1];
        let y = bn_apply(g, &norm, z, sum, sqsum, count)?;
        self.h = g.relu(y)?;
        Ok(())
    }
}

/// Encodes one batch; batch norm, if present, uses this batch's statistics.
pub fn encoder_forward(g: &mut Graph, enc: &BoundEncoder, x: Var) -> Result<Var, NnError> {
    let mut pass = EncoderPass::new(g, enc, x)?;
    loop {
        match pass.advance(g, enc)? {
            EncoderStage::Done(f) => return Ok(f),
            EncoderStage::NeedStats(req) => {
                pass.provide_stats(g, enc, req.sum, req.sqsum, req.count as f64)?
            }
        }
    }
}

/// Encodes several batches in one graph. In synced mode every batch norm
/// pools statistics over all batches, summing per-batch sums in batch
/// order; each batch then derives mean and variance on its own copy of
/// the statistics chain, mirroring what each worker does independently.
pub fn encoder_forward_batches(
    g: &mut Graph,
    enc: &BoundEncoder,
    xs: &[Var],
) -> Result<Vec<Var>, NnError> {
    if xs.is_empty() {
        return Err(NnError::EmptyBag);
    }
    if enc.mode == BnMode::Local || enc.norms.is_empty() {
        return xs.iter().map(|&x| encoder_forward(g, enc, x)).collect();
    }
    let mut passes = xs
        .iter()
        .map(|&x| EncoderPass::new(g, enc, x))
        .collect::<Result<Vec<_>, _>>()?;
    loop {
        let mut requests = Vec::with_capacity(passes.len());
        let mut outputs = Vec::with_capacity(passes.len());
        for pass in &mut passes {
            match pass.advance(g, enc)? {
                EncoderStage::NeedStats(r) => requests.push(r),
                EncoderStage::Done(f) => outputs.push(f),
            }
        }
        if outputs.len() == passes.len() {
            return Ok(outputs);
        }
        let mut sum = requests[0].sum;
        let mut sqsum = requests[0].sqsum;
        for r in &requests[1..] {
            sum = g.add(sum, r.sum)?;
            sqsum = g.add(sqsum, r.sqsum)?;
        }
        let count: usize = requests.iter().map(|r| r.count).sum();
        for pass in &mut passes {
            pass.provide_stats(g, enc, sum, sqsum, count as f64)?;
        }
    }
}

/// Outputs of [`gma_forward`].
#[derive(Clone, Copy, Debug)]
pub struct GmaOutput {
    /// `[K]`, positive, sums to one.
    pub attn: Var,
    /// `[F]`.
    pub emb: Var,
    /// Scalar.
    pub logit: Var,
}

/// Gated attention pooling:
/// `score_k = wᵀ(tanh(V·h_k) ⊙ sigmoid(U·h_k))`, `attn = softmax(score)`,
/// `emb = Σ_k attn_k·h_k`, `logit = classifier(emb)`.
pub fn gma_forward(g: &mut Graph, gma: &BoundGma, h: Var) -> Result<GmaOutput, NnError> {
    let hv = g.value(h);
    let f = g.value(gma.v).cols();
    if hv.rank() != 2 || hv.rows() == 0 {
        return Err(NnError::EmptyBag);
    }
    if hv.cols() != f {
        return Err(NnError::DimMismatch {
            expected: f,
            got: hv.cols(),
        });
    }
    let k = hv.rows();
    let l = g.value(gma.w).numel();
    let vt = g.transpose(gma.v)?;
    let hv_ = g.matmul(h, vt)?;
    let content = g.tanh(hv_)?;
    let ut = g.transpose(gma.u)?;
    let hu = g.matmul(h, ut)?;
    let gate = g.sigmoid(hu)?;
    let gated = g.mul(content, gate)?;
    let wcol = g.reshape(gma.w, &[l, 1])?;
    let scores = g.matmul(gated, wcol)?;
    let scores = g.reshape(scores, &[k])?;
    let attn = g.softmax_vec(scores)?;
    let arow = g.reshape(attn, &[1, k])?;
    let pooled = g.matmul(arow, h)?;
    let logit = linear(g, &gma.classifier, pooled)?;
    let logit = g.reshape(logit, &[])?;
    let emb = g.reshape(pooled, &[f])?;
    Ok(GmaOutput { attn, emb, logit })
}

/// Binary cross-entropy on a scalar logit; `label` must be 0 or 1.
pub fn bce_with_logits(g: &mut Graph, logit: Var, label: f64) -> Result<Var, NnError> {
    if label != 0.0 && label != 1.0 {
        return Err(NnError::InvalidLabel(label));
    }
    Ok(g.bce_with_logits(logit, label)?)
}

/// Per-batch batch-norm moments: column sums, sums of squares, row count.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLocalStats {
    pub sum: Tensor,
    pub sqsum: Tensor,
    pub count: usize,
}

impl BnLocalStats {
    pub fn of(h: &Tensor, precision: Precision) -> Self {
        let mut g = Graph::with_precision(precision);
        let x = g.constant(h.clone());
        let (s, q) = bn_sums(&mut g, x).expect("matrix input");
        Self {
            sum: g.value(s).clone(),
            sqsum: g.value(q).clone(),
            count: h.rows(),
        }
    }

    /// `[sum, sqsum, count]` as one vector for a single all-reduce.
    pub fn pack(&self) -> Tensor {
        let mut data = self.sum.data().to_vec();
        data.extend_from_slice(self.sqsum.data());
        data.push(self.count as f64);
        Tensor::vector(data)
    }

    pub fn unpack(t: &Tensor) -> Result<(Tensor, Tensor, f64), NnError> {
        let n = t.numel();
        if n % 2 != 1 {
            return Err(NnError::DimMismatch {
                expected: n + 1,
                got: n,
            });
        }
        let f = n / 2;
        let d = t.data();
        Ok((
            Tensor::vector(d[..f].to_vec()),
            Tensor::vector(d[f..2 * f].to_vec()),
            d[2 * f],
        ))
    }
}

/// Batch-norm mean and biased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// `mean = S/M`, `var = Q/M − mean²`, computed with the same operations
/// the encoder graph uses.
pub fn bn_stats_from_sums(sum: &Tensor, sqsum: &Tensor, count: f64, precision: Precision) -> Result<BnStats, NnError> {
    let mut g = Graph::with_precision(precision);
    let s = g.constant(sum.clone());
    let q = g.constant(sqsum.clone());
    let inv = 1.0 / count;
    let mean = g.scale(s, inv)?;
    let ex2 = g.scale(q, inv)?;
    let msq = g.mul(mean, mean)?;
    let var = g.sub(ex2, msq)?;
    Ok(BnStats {
        mean: g.value(mean).clone(),
        var: g.value(var).clone(),
    })
}

/// Pools per-rank moments over the encoder ranks and returns the global
/// statistics as seen by each rank, in rank order. `locals[i]` belongs to
/// rank `i + 1`.
pub fn sync_bn_stats(
    group: &ProcessGroup,
    locals: &[BnLocalStats],
    plan: &ReductionPlan,
) -> Result<Vec<BnStats>, NnError> {
    let ranks: Vec<Rank> = group.encoder_ranks();
    if locals.len() != ranks.len() {
        return Err(FabricError::MissingMessages {
            rank: 0,
            tag: crate::fabric::Tag::new(0, 0, crate::fabric::Phase::BnStats(0)),
            missing: ranks[locals.len().min(ranks.len())..].to_vec(),
        }
        .into());
    }
    let packed = locals.iter().map(BnLocalStats::pack).collect();
    let reduced = group.all_reduce(&ranks, packed, plan, ReduceOp::Sum)?;
    reduced
        .iter()
        .map(|t| {
            let (s, q, m) = BnLocalStats::unpack(t)?;
            bn_stats_from_sums(&s, &q, m, plan.precision)
        })
        .collect()
}
