//! The multi-rank step as a phase program.
//!
//! With `B` synchronized batch-norm layers the phases are:
//!
//! | phase            | ranks    | work                                                   |
//! |------------------|----------|--------------------------------------------------------|
//! | 0                | encoders | send checksum, forward to first norm, send its moments |
//! | 1 ..= B          | encoders | pool moments, continue; the last sends features        |
//! | B+1              | 0        | gather, aggregator forward/backward, scatter           |
//! | B+2              | encoders | pseudo-loss, backward to the last norm's statistics    |
//! | B+3 ..= 2B+2     | encoders | pool statistic gradients, inject, continue backward    |
//! | 2B+3             | all      | average encoder gradients, optimizer steps             |
//!
//! Pooled batch-norm moments enter each encoder graph as fresh leaves. The
//! backward pass pauses at them, their gradients are summed across ranks,
//! and the sum is injected into the local moment nodes before resuming.

use super::{
    pseudo_loss, stream_rng, tracked_layers, unflatten, ProtocolError, StepInput, StepTrace, TrainConfig,
    Trainer, PLAN_STREAM,
};
use crate::autodiff::{BackwardState, Graph, Tensor, Var};
use crate::fabric::{
    Endpoint, Phase, PhaseFn, ProcessGroup, Rank, ReduceOp, ReductionMode, ReductionPlan, Role, Tag,
};
use crate::nn::{
    bce_with_logits, gma_forward, optimizer_step, tensors_fingerprint, BnLocalStats, BnMode, BnRequest,
    BoundEncoder, BoundGma, EncoderPass, EncoderStage, ModelParams, OptState,
};

/// Model copy and optimizer memory of one rank. Rank 0 uses the
/// aggregator part, encoder ranks the encoder part.
#[derive(Clone, Debug)]
pub struct RankState {
    pub rank: Rank,
    pub params: ModelParams,
    pub opt: OptState,
}

/// Per-rank states, indexed by rank.
#[derive(Clone, Debug)]
pub struct ReplicaState {
    pub ranks: Vec<RankState>,
}

impl ReplicaState {
    /// Gives every rank its own copy of `params`, then broadcasts rank 1's
    /// encoder to the other encoder ranks.
    pub fn new(group: &ProcessGroup, params: &ModelParams) -> Result<Self, ProtocolError> {
        params.check_shapes()?;
        let ranks = (0..group.world_size())
            .map(|rank| RankState {
                rank,
                params: params.clone(),
                opt: if rank == 0 {
                    OptState::new(params.gma.tensors())
                } else {
                    OptState::new(params.encoder.tensors())
                },
            })
            .collect();
        let mut replicas = Self { ranks };
        replicas.broadcast(group)?;
        Ok(replicas)
    }

    /// Copies rank 1's encoder parameters to every encoder rank.
    pub fn broadcast(&mut self, group: &ProcessGroup) -> Result<(), ProtocolError> {
        let src = &self.ranks[1].params.encoder;
        let flat = Tensor::vector(src.tensors().iter().flat_map(|t| t.data().iter().copied()).collect());
        let received = group.broadcast(&group.encoder_ranks(), 1, flat)?;
        for (state, value) in self.ranks[1..].iter_mut().zip(received) {
            let parts = unflatten(&value, &state.params.encoder.tensors());
            for (t, v) in state.params.encoder.tensors_mut().into_iter().zip(parts) {
                *t = v;
            }
        }
        Ok(())
    }

    /// Fingerprint of each encoder replica, ranks `1..=N`.
    pub fn encoder_checksums(&self) -> Vec<u64> {
        self.ranks[1..]
            .iter()
            .map(|s| tensors_fingerprint(s.params.encoder.tensors()))
            .collect()
    }

    /// Rank 1's encoder with rank 0's aggregator.
    pub fn params(&self) -> ModelParams {
        ModelParams {
            encoder: self.ranks[1].params.encoder.clone(),
            gma: self.ranks[0].params.gma.clone(),
        }
    }
}

/// Multi-rank training over a simulated fabric.
#[derive(Debug)]
pub struct DistributedTrainer {
    group: ProcessGroup,
    replicas: ReplicaState,
    cfg: TrainConfig,
}

impl DistributedTrainer {
    /// Spawns a group of `cfg.n_encoders` encoders with `cfg.scheduler`.
    pub fn new(params: ModelParams, cfg: &TrainConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        let group = ProcessGroup::spawn(cfg.n_encoders, cfg.scheduler)?;
        Self::with_group(group, params, cfg)
    }

    pub fn with_group(group: ProcessGroup, params: ModelParams, cfg: &TrainConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        if group.n_encoders() != cfg.n_encoders {
            return Err(ProtocolError::InvalidConfig(format!(
                "group has {} encoders, config asks for {}",
                group.n_encoders(),
                cfg.n_encoders
            )));
        }
        let replicas = ReplicaState::new(&group, &params)?;
        Ok(Self {
            group,
            replicas,
            cfg: cfg.clone(),
        })
    }

    pub fn group(&self) -> &ProcessGroup {
        &self.group
    }

    pub fn replicas(&self) -> &ReplicaState {
        &self.replicas
    }

    pub fn replicas_mut(&mut self) -> &mut ReplicaState {
        &mut self.replicas
    }

    /// Number of batch norms whose moments are pooled across ranks.
    fn synced_norms(&self) -> usize {
        let enc = &self.replicas.ranks[0].params.encoder;
        if enc.bn_mode == BnMode::Synced {
            enc.norms.len()
        } else {
            0
        }
    }

    fn plans(&self, step: u64, n_bn: usize) -> (Vec<ReductionPlan>, Vec<ReductionPlan>, ReductionPlan) {
        let ranks = self.group.encoder_ranks();
        let p = self.cfg.precision;
        let mut rng = stream_rng(self.cfg.seed, PLAN_STREAM, step);
        let mut draw = || match self.cfg.reduction {
            ReductionMode::Deterministic => ReductionPlan::ascending(&ranks).with_precision(p),
            ReductionMode::Drift => ReductionPlan::permuted(&ranks, &mut rng).with_precision(p),
        };
        let stats = (0..n_bn).map(|_| draw()).collect();
        let grads = (0..n_bn).map(|_| draw()).collect();
        (stats, grads, draw())
    }
}

struct Ctx<'c> {
    cfg: &'c TrainConfig,
    input: &'c StepInput,
    lr: f64,
    n_bn: usize,
    ranks: Vec<Rank>,
    stats_plans: Vec<ReductionPlan>,
    grad_plans: Vec<ReductionPlan>,
    sync_plan: ReductionPlan,
}

impl Ctx<'_> {
    fn tag(&self, phase: Phase) -> Tag {
        Tag::new(self.input.epoch, self.input.step, phase)
    }

    fn trainable(&self) -> bool {
        !self.cfg.frozen_encoder
    }
}

/// An encoder rank's graph for the current step.
struct EncoderWork {
    g: Graph,
    bound: BoundEncoder,
    pass: EncoderPass,
    pending: Option<BnRequest>,
    /// Completed norms with their pooled-moment leaves.
    norms: Vec<(BnRequest, Var, Var)>,
    f: Option<Var>,
    backward: Option<BackwardState>,
    /// This rank's contribution to the all-reduce in flight.
    sent: Option<Tensor>,
}

struct AggOutput {
    loss: f64,
    feature_checksums: Vec<u64>,
    grads: Vec<Tensor>,
}

struct Worker<'a> {
    state: &'a mut RankState,
    work: Option<EncoderWork>,
    agg: Option<AggOutput>,
    grads: Option<Vec<Tensor>>,
}

fn checksum_tensor(c: u64) -> Tensor {
    Tensor::vector(vec![(c >> 32) as f64, (c & 0xffff_ffff) as f64])
}

fn checksum_value(t: &Tensor) -> u64 {
    let d = t.data();
    ((d[0] as u64) << 32) | d[1] as u64
}

fn protocol_bug(what: &'static str) -> ProtocolError {
    ProtocolError::Nn(crate::nn::NnError::PassState(what))
}

impl Worker<'_> {
    fn run_phase(&mut self, p: usize, ep: &Endpoint<'_>, ctx: &Ctx<'_>) -> Result<(), ProtocolError> {
        let b = ctx.n_bn;
        match ep.role() {
            Role::Encoder if p == 0 => self.start(ep, ctx),
            Role::Encoder if p <= b => {
                self.pool_moments(ep, ctx)?;
                self.forward(ep, ctx)
            }
            Role::Aggregator if p == b + 1 => self.aggregate(ep, ctx),
            Role::Encoder if p == b + 2 && ctx.trainable() => self.begin_backward(ep, ctx),
            Role::Encoder if p > b + 2 && p <= 2 * b + 2 && ctx.trainable() => {
                self.pool_moment_grads(ep, ctx)?;
                self.backward(ep, ctx)
            }
            _ if p == 2 * b + 3 => self.update(ep, ctx),
            _ => Ok(()),
        }
    }

    fn work(&mut self) -> Result<&mut EncoderWork, ProtocolError> {
        self.work.as_mut().ok_or_else(|| protocol_bug("encoder graph missing"))
    }

    fn start(&mut self, ep: &Endpoint<'_>, ctx: &Ctx<'_>) -> Result<(), ProtocolError> {
        let enc = &self.state.params.encoder;
        ep.send(0, ctx.tag(Phase::Checksum), checksum_tensor(tensors_fingerprint(enc.tensors())))?;
        let mut g = Graph::with_precision(ctx.cfg.precision);
        let bound = BoundEncoder::bind(&mut g, enc, ctx.trainable());
        let x = g.constant(ctx.input.batches[ep.rank() - 1].clone());
        let pass = EncoderPass::new(&g, &bound, x)?;
        self.work = Some(EncoderWork {
            g,
            bound,
            pass,
            pending: None,
            norms: Vec::new(),
            f: None,
            backward: None,
            sent: None,
        });
        self.forward(ep, ctx)
    }

    fn forward(&mut self, ep: &Endpoint<'_>, ctx: &Ctx<'_>) -> Result<(), ProtocolError> {
        let synced = ctx.n_bn > 0;
        let w = self.work()?;
        let mut stage = w.pass.advance(&mut w.g, &w.bound)?;
        while let (EncoderStage::NeedStats(req), false) = (stage, synced) {
            w.pass.provide_stats(&mut w.g, &w.bound, req.sum, req.sqsum, req.count as f64)?;
            stage = w.pass.advance(&mut w.g, &w.bound)?;
        }
        match stage {
            EncoderStage::NeedStats(req) => {
                let local = BnLocalStats {
                    sum: w.g.value(req.sum).clone(),
                    sqsum: w.g.value(req.sqsum).clone(),
                    count: req.count,
                }
                .pack();
                ep.all_reduce_send(&ctx.ranks, ctx.tag(Phase::BnStats(req.layer as u16)), &local)?;
                w.sent = Some(local);
                w.pending = Some(req);
            }
            EncoderStage::Done(f) => {
                ep.gather_send(ctx.tag(Phase::Features), w.g.value(f).clone())?;
                w.f = Some(f);
            }
        }
        Ok(())
    }

    fn pool_moments(&mut self, ep: &Endpoint<'_>, ctx: &Ctx<'_>) -> Result<(), ProtocolError> {
        let trainable = ctx.trainable();
        let w = self.work()?;
        let req = w.pending.take().ok_or_else(|| protocol_bug("no moments pending"))?;
        let own = w.sent.take().ok_or_else(|| protocol_bug("no moments sent"))?;
        let pooled = ep.all_reduce_recv(
            &ctx.ranks,
            ctx.tag(Phase::BnStats(req.layer as u16)),
            &own,
            &ctx.stats_plans[req.layer],
            ReduceOp::Sum,
        )?;
        let (s, q, m) = BnLocalStats::unpack(&pooled)?;
        let sl = w.g.leaf(s, trainable);
        let ql = w.g.leaf(q, trainable);
        w.pass.provide_stats(&mut w.g, &w.bound, sl, ql, m)?;
        w.norms.push((req, sl, ql));
        Ok(())
    }

    fn aggregate(&mut self, ep: &Endpoint<'_>, ctx: &Ctx<'_>) -> Result<(), ProtocolError> {
        let parts = ep.gather_recv(ctx.tag(Phase::Features))?;
        let checksums: Vec<u64> = ep
            .recv_many(&ctx.ranks, ctx.tag(Phase::Checksum))?
            .iter()
            .map(checksum_value)
            .collect();
        if ctx.cfg.check_sync && checksums.iter().any(|&c| c != checksums[0]) {
            return Err(ProtocolError::Desync {
                step: ctx.input.step,
                checksums,
            });
        }
        let mut g = Graph::with_precision(ctx.cfg.precision);
        let gma = BoundGma::bind(&mut g, &self.state.params.gma, true);
        let hs: Vec<Var> = parts.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let h = g.concat_rows(&hs)?;
        let out = gma_forward(&mut g, &gma, h)?;
        let loss = bce_with_logits(&mut g, out.logit, f64::from(ctx.input.label))?;
        let grads = g.backward(loss)?;
        if ctx.trainable() {
            let chunks = hs.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
            ep.scatter_send(ctx.tag(Phase::FeatureGrads), chunks)?;
        }
        self.agg = Some(AggOutput {
            loss: g.value(loss).item().expect("scalar loss"),
            feature_checksums: parts.iter().map(|p| tensors_fingerprint([p])).collect(),
            grads: gma.vars().iter().map(|&v| grads.get_or_zeros(&g, v)).collect(),
        });
        Ok(())
    }

    fn begin_backward(&mut self, ep: &Endpoint<'_>, ctx: &Ctx<'_>) -> Result<(), ProtocolError> {
        let grad = ep.scatter_recv(ctx.tag(Phase::FeatureGrads))?;
        let scale = if ctx.cfg.no_n_scaling { 1 } else { ctx.cfg.n_encoders };
        let w = self.work()?;
        let f = w.f.ok_or_else(|| protocol_bug("features missing"))?;
        let loss = pseudo_loss(&mut w.g, f, &grad, scale)?;
        w.backward = Some(BackwardState::new(&w.g, loss)?);
        self.backward(ep, ctx)
    }

    /// Runs the backward pass down to the next pooled moments and sends
    /// their gradients, or to the end and sends the parameter gradients.
    fn backward(&mut self, ep: &Endpoint<'_>, ctx: &Ctx<'_>) -> Result<(), ProtocolError> {
        let w = self.work()?;
        if let Some(&(_, sl, ql)) = w.norms.last() {
            let bs = w.backward.as_mut().ok_or_else(|| protocol_bug("backward missing"))?;
            bs.run_until(&w.g, sl)?;
            let grad_of = |v: Var| {
                bs.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros_like(w.g.value(v)))
            };
            let mut packed = grad_of(sl).into_data();
            packed.extend(grad_of(ql).into_data());
            let packed = Tensor::vector(packed);
            let layer = w.norms.len() - 1;
            ep.all_reduce_send(&ctx.ranks, ctx.tag(Phase::BnGrads(layer as u16)), &packed)?;
            w.sent = Some(packed);
        } else {
            let bs = w.backward.take().ok_or_else(|| protocol_bug("backward missing"))?;
            let grads = bs.finish(&w.g)?;
            let flat: Vec<f64> = w
                .bound
                .vars()
                .iter()
                .flat_map(|&v| grads.get_or_zeros(&w.g, v).into_data())
                .collect();
            let flat = Tensor::vector(flat);
            ep.all_reduce_send(&ctx.ranks, ctx.tag(Phase::GradSync), &flat)?;
            w.sent = Some(flat);
        }
        Ok(())
    }

    fn pool_moment_grads(&mut self, ep: &Endpoint<'_>, ctx: &Ctx<'_>) -> Result<(), ProtocolError> {
        let w = self.work()?;
        let (req, sl, ql) = w.norms.pop().ok_or_else(|| protocol_bug("no norm pending"))?;
        let layer = w.norms.len();
        let own = w.sent.take().ok_or_else(|| protocol_bug("no gradient sent"))?;
        let pooled = ep.all_reduce_recv(
            &ctx.ranks,
            ctx.tag(Phase::BnGrads(layer as u16)),
            &own,
            &ctx.grad_plans[layer],
            ReduceOp::Sum,
        )?;
        let width = w.g.value(sl).numel();
        let ds = Tensor::vector(pooled.data()[..width].to_vec());
        let dq = Tensor::vector(pooled.data()[width..].to_vec());
        let bs = w.backward.as_mut().ok_or_else(|| protocol_bug("backward missing"))?;
        bs.inject(&w.g, req.sum, ds, sl.id())?;
        bs.inject(&w.g, req.sqsum, dq, ql.id())?;
        Ok(())
    }

    fn update(&mut self, ep: &Endpoint<'_>, ctx: &Ctx<'_>) -> Result<(), ProtocolError> {
        let cfg = ctx.cfg;
        let state = &mut *self.state;
        match ep.role() {
            Role::Aggregator => {
                let agg = self.agg.as_ref().ok_or_else(|| protocol_bug("aggregator output missing"))?;
                optimizer_step(
                    &cfg.optim,
                    ctx.lr,
                    &mut state.params.gma.tensors_mut(),
                    &agg.grads,
                    &mut state.opt,
                    cfg.precision,
                )?;
            }
            Role::Encoder if ctx.trainable() => {
                let w = self.work.as_mut().ok_or_else(|| protocol_bug("encoder graph missing"))?;
                let own = w.sent.take().ok_or_else(|| protocol_bug("no gradient sent"))?;
                let mean = ep.all_reduce_recv(&ctx.ranks, ctx.tag(Phase::GradSync), &own, &ctx.sync_plan, ReduceOp::Mean)?;
                let grads = unflatten(&mean, &state.params.encoder.tensors());
                optimizer_step(
                    &cfg.optim,
                    ctx.lr,
                    &mut state.params.encoder.tensors_mut(),
                    &grads,
                    &mut state.opt,
                    cfg.precision,
                )?;
                self.grads = Some(grads);
            }
            Role::Encoder => {
                self.grads = Some(state.params.encoder.tensors().into_iter().map(Tensor::zeros_like).collect());
            }
        }
        Ok(())
    }
}

impl Trainer for DistributedTrainer {
    fn step(&mut self, input: &StepInput, lr: f64) -> Result<StepTrace, ProtocolError> {
        if input.batches.len() != self.cfg.n_encoders {
            return Err(ProtocolError::BatchCount {
                expected: self.cfg.n_encoders,
                got: input.batches.len(),
            });
        }
        let n_bn = self.synced_norms();
        let (stats_plans, grad_plans, sync_plan) = self.plans(input.step, n_bn);
        let ctx = Ctx {
            cfg: &self.cfg,
            input,
            lr,
            n_bn,
            ranks: self.group.encoder_ranks(),
            stats_plans,
            grad_plans,
            sync_plan,
        };
        let mut workers: Vec<Worker<'_>> = self
            .replicas
            .ranks
            .iter_mut()
            .map(|state| Worker {
                state,
                work: None,
                agg: None,
                grads: None,
            })
            .collect();
        let ctx_ref = &ctx;
        let phases: Vec<Box<PhaseFn<'_, Worker<'_>, ProtocolError>>> = (0..2 * n_bn + 4)
            .map(|p| {
                Box::new(move |w: &mut Worker<'_>, ep: &Endpoint<'_>| w.run_phase(p, ep, ctx_ref))
                    as Box<PhaseFn<'_, Worker<'_>, ProtocolError>>
            })
            .collect();
        let phase_refs: Vec<&PhaseFn<'_, Worker<'_>, ProtocolError>> = phases.iter().map(|b| b.as_ref()).collect();
        self.group.run(&mut workers, &phase_refs)?;

        let agg = workers[0].agg.take().ok_or_else(|| protocol_bug("aggregator output missing"))?;
        let enc_grads = workers[1].grads.take().ok_or_else(|| protocol_bug("encoder gradients missing"))?;
        drop(phase_refs);
        drop(phases);
        drop(workers);
        let params = self.replicas.params();
        Ok(StepTrace {
            epoch: input.epoch,
            step: input.step,
            slide_id: input.slide_id,
            loss: agg.loss,
            lr,
            feature_checksums: agg.feature_checksums,
            replica_checksums: self.replicas.encoder_checksums(),
            tracked: tracked_layers(&params, &enc_grads, &agg.grads),
        })
    }

    fn params(&self) -> ModelParams {
        self.replicas.params()
    }
}
