use super::{tracked_layers, ProtocolError, StepInput, StepTrace, TrainConfig, Trainer};
use crate::autodiff::{Graph, Tensor, Var};
use crate::nn::{
    bce_with_logits, encoder_forward_batches, gma_forward, optimizer_step, tensors_fingerprint,
    BoundEncoder, BoundGma, ModelParams, OptState,
};

/// Single-worker training: all rank batches in one graph.
#[derive(Clone, Debug)]
pub struct ReferenceTrainer {
    params: ModelParams,
    enc_opt: OptState,
    gma_opt: OptState,
    cfg: TrainConfig,
}

impl ReferenceTrainer {
    pub fn new(params: ModelParams, cfg: &TrainConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        params.check_shapes()?;
        Ok(Self {
            enc_opt: OptState::new(params.encoder.tensors()),
            gma_opt: OptState::new(params.gma.tensors()),
            params,
            cfg: cfg.clone(),
        })
    }
}

impl Trainer for ReferenceTrainer {
    fn step(&mut self, input: &StepInput, lr: f64) -> Result<StepTrace, ProtocolError> {
        let cfg = &self.cfg;
        if input.batches.len() != cfg.n_encoders {
            return Err(ProtocolError::BatchCount {
                expected: cfg.n_encoders,
                got: input.batches.len(),
            });
        }
        let p = cfg.precision;
        let mut g = Graph::with_precision(p);
        let enc = BoundEncoder::bind(&mut g, &self.params.encoder, !cfg.frozen_encoder);
        let gma = BoundGma::bind(&mut g, &self.params.gma, true);
        let xs: Vec<Var> = input.batches.iter().map(|b| g.constant(b.clone())).collect();
        let fs = encoder_forward_batches(&mut g, &enc, &xs)?;
        let h = g.concat_rows(&fs)?;
        let out = gma_forward(&mut g, &gma, h)?;
        let loss = bce_with_logits(&mut g, out.logit, f64::from(input.label))?;
        let grads = g.backward(loss)?;

        let enc_grads: Vec<Tensor> = enc.vars().iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
        let gma_grads: Vec<Tensor> = gma.vars().iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
        let feature_checksums = fs.iter().map(|&f| tensors_fingerprint([g.value(f)])).collect();
        let loss = g.value(loss).item().expect("scalar loss");

        if !cfg.frozen_encoder {
            optimizer_step(
                &cfg.optim,
                lr,
                &mut self.params.encoder.tensors_mut(),
                &enc_grads,
                &mut self.enc_opt,
                p,
            )?;
        }
        optimizer_step(&cfg.optim, lr, &mut self.params.gma.tensors_mut(), &gma_grads, &mut self.gma_opt, p)?;

        Ok(StepTrace {
            epoch: input.epoch,
            step: input.step,
            slide_id: input.slide_id,
            loss,
            lr,
            feature_checksums,
            replica_checksums: vec![tensors_fingerprint(self.params.encoder.tensors())],
            tracked: tracked_layers(&self.params, &enc_grads, &gma_grads),
        })
    }

    fn params(&self) -> ModelParams {
        self.params.clone()
    }
}
