//! Model components: MLP tile encoder with optional batch norm, gated
//! attention aggregator, loss, optimizers, learning-rate schedule and
//! checkpoints.
//!
//! Parameters live in plain structs ([`ModelParams`]). A forward pass binds
//! them into a [`Graph`](crate::autodiff::Graph) as leaves and returns graph
//! handles; gradients are read back per leaf after `backward`.

mod checkpoint;
mod forward;
mod optim;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use forward::{
    bce_with_logits, bn_stats_from_sums, encoder_forward, encoder_forward_batches, gma_forward, linear,
    sync_bn_stats, BnLocalStats, BnRequest, BnStats, BoundEncoder, BoundGma, BoundLinear, BoundNorm,
    EncoderPass, EncoderStage, GmaOutput,
};
pub use optim::{default_warmup, lr_schedule, optimizer_step, OptState, OptimConfig, OptimizerKind};
pub use params::{
    init_params, tensors_fingerprint, BatchNorm1d, BnMode, GatedAttention, LinearLayer, MlpEncoder,
    ModelDims, ModelParams,
};

use crate::autodiff::AutodiffError;
use crate::fabric::FabricError;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("input has {got} columns, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty bag")]
    EmptyBag,
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(f64),
    #[error("encoder pass misuse: {0}")]
    PassState(&'static str),
    #[error("{params} parameters, {grads} gradients, {state} optimizer slots")]
    ParamCount {
        params: usize,
        grads: usize,
        state: usize,
    },
    #[error("gradient {index} has shape {grad:?}, parameter has {param:?}")]
    GradShape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("gradient {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("invalid schedule: step {step}, total {total}, warmup {warmup}")]
    InvalidSchedule { step: usize, total: usize, warmup: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Precision, Tensor};
    use crate::fabric::{ProcessGroup, ReductionPlan, SchedulerKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(bn: Option<BnMode>) -> ModelDims {
        ModelDims::new(6, vec![8], 4).with_attn(3).with_batch_norm(bn)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }

    fn gma_eval(params: &ModelParams, h: &Tensor) -> (Tensor, Tensor, f64) {
        let mut g = Graph::new();
        let gma = BoundGma::bind(&mut g, &params.gma, false);
        let hv = g.constant(h.clone());
        let out = gma_forward(&mut g, &gma, hv).unwrap();
        (
            g.value(out.attn).clone(),
            g.value(out.emb).clone(),
            g.value(out.logit).item().unwrap(),
        )
    }

    fn encode(params: &ModelParams, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let enc = BoundEncoder::bind(&mut g, &params.encoder, true);
        let xv = g.constant(x.clone());
        let f = encoder_forward(&mut g, &enc, xv).unwrap();
        g.value(f).clone()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let d = tiny(Some(BnMode::Synced));
        let a = init_params(5, &d).unwrap();
        let b = init_params(5, &d).unwrap();
        let c = init_params(6, &d).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.dims(), d);
        a.check_shapes().unwrap();
        assert!(a.gma.w.data().iter().all(|w| w.abs() <= params::ATTN_W_SCALE));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(init_params(0, &ModelDims::new(0, vec![], 4)), Err(NnError::InvalidDims(_))));
        assert!(init_params(0, &ModelDims::new(3, vec![0], 4)).is_err());
        assert!(init_params(0, &ModelDims::new(3, vec![], 4).with_attn(0)).is_err());
    }

    #[test]
    fn default_attention_width() {
        assert_eq!(ModelDims::default_attn(4), 4);
        assert_eq!(ModelDims::default_attn(32), 16);
    }

    #[test]
    fn encoder_shapes_and_rowwise() {
        let p = init_params(1, &tiny(None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x1 = random_matrix(&mut rng, 1, 6);
        assert_eq!(encode(&p, &x1).shape(), &[1, 4]);

        let row = random_matrix(&mut rng, 1, 6);
        let dup = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
        let f = encode(&p, &dup);
        assert_eq!(f.row(0), f.row(1));

        let x = random_matrix(&mut rng, 5, 6);
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (f, fp) = (encode(&p, &x), encode(&p, &xp));
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(fp.row(k), f.row(i));
        }
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let p = init_params(1, &tiny(None)).unwrap();
        let mut g = Graph::new();
        let enc = BoundEncoder::bind(&mut g, &p.encoder, true);
        let x = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(
            encoder_forward(&mut g, &enc, x),
            Err(NnError::DimMismatch { expected: 6, got: 5 })
        ));
    }

    #[test]
    fn gma_examples() {
        let p = init_params(2, &tiny(None)).unwrap();
        let h = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0, 0.5]; 4]).unwrap();
        let (attn, emb, _) = gma_eval(&p, &h);
        assert!(attn.data().iter().all(|a| (a - 0.25).abs() < 1e-15));
        for (e, x) in emb.data().iter().zip(h.row(0)) {
            assert!((e - x).abs() < 1e-15);
        }

        let h1 = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let (attn, emb, _) = gma_eval(&p, &h1);
        assert_eq!(attn.data(), &[1.0]);
        assert_eq!(emb.data(), h1.row(0));

        let mut zero_w = p.clone();
        zero_w.gma.w = Tensor::zeros(&[3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (attn, _, _) = gma_eval(&zero_w, &random_matrix(&mut rng, 7, 4));
        assert!(attn.data().iter().all(|&a| a == 1.0 / 7.0));
    }

    #[test]
    fn gma_rejects_empty_bag() {
        let p = init_params(2, &tiny(None)).unwrap();
        let mut g = Graph::new();
        let gma = BoundGma::bind(&mut g, &p.gma, false);
        let h = g.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(gma_forward(&mut g, &gma, h), Err(NnError::EmptyBag)));
    }

    #[test]
    fn bce_examples() {
        let eval = |z: f64, y: f64| {
            let mut g = Graph::new();
            let l = g.constant(Tensor::scalar(z));
            let loss = bce_with_logits(&mut g, l, y)?;
            Ok::<f64, NnError>(g.value(loss).item().unwrap())
        };
        let ln2 = std::f64::consts::LN_2;
        assert!((eval(0.0, 1.0).unwrap() - ln2).abs() < 1e-15);
        assert!((eval(0.0, 0.0).unwrap() - ln2).abs() < 1e-15);
        let sat = eval(100.0, 1.0).unwrap();
        assert!(sat.is_finite() && (0.0..1e-40).contains(&sat));
        assert!(matches!(eval(0.0, 0.5), Err(NnError::InvalidLabel(_))));
    }

    #[test]
    fn sync_bn_examples() {
        let group = ProcessGroup::spawn(2, SchedulerKind::Sequential).unwrap();
        let plan = ReductionPlan::ascending(&[1, 2]);
        let col = |xs: &[f64]| Tensor::new(&[xs.len(), 1], xs.to_vec()).unwrap();
        let locals = [
            BnLocalStats::of(&col(&[0.0, 2.0]), Precision::F64),
            BnLocalStats::of(&col(&[4.0, 6.0]), Precision::F64),
        ];
        let stats = sync_bn_stats(&group, &locals, &plan).unwrap();
        assert_eq!(stats[0].mean.data(), &[3.0]);
        assert_eq!(stats[0].var.data(), &[5.0]);
        assert_eq!(stats[0], stats[1]);

        let same = BnLocalStats::of(&col(&[1.0, -3.0, 0.5]), Precision::F64);
        let stats = sync_bn_stats(&group, &[same.clone(), same.clone()], &plan).unwrap();
        let local = bn_stats_from_sums(&same.sum, &same.sqsum, 3.0, Precision::F64).unwrap();
        assert_eq!(stats[0], local);

        let empty = BnLocalStats {
            sum: Tensor::zeros(&[1]),
            sqsum: Tensor::zeros(&[1]),
            count: 0,
        };
        let stats = sync_bn_stats(&group, &[empty, same.clone()], &plan).unwrap();
        assert_eq!(stats[0], local);

        assert!(sync_bn_stats(&group, &[same], &plan).is_err());
    }

    #[test]
    fn synced_batches_match_pooled_statistics() {
        // Encoding two batches with pooled statistics equals encoding their
        // concatenation as one batch.
        let p = init_params(3, &tiny(Some(BnMode::Synced))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_matrix(&mut rng, 3, 6), random_matrix(&mut rng, 4, 6));
        let mut g = Graph::new();
        let enc = BoundEncoder::bind(&mut g, &p.encoder, true);
        let (xa, xb) = (g.constant(a.clone()), g.constant(b.clone()));
        let fs = encoder_forward_batches(&mut g, &enc, &[xa, xb]).unwrap();
        let joint = g.concat_rows(&fs).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| a.row(i).to_vec()).collect();
        rows.extend((0..4).map(|i| b.row(i).to_vec()));
        let whole = encode(&p, &Tensor::from_rows(&rows).unwrap());
        for (x, y) in g.value(joint).data().iter().zip(whole.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn full_loss(params: &ModelParams, batches: &[Tensor], label: f64) -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let enc = BoundEncoder::bind(&mut g, &params.encoder, true);
        let gma = BoundGma::bind(&mut g, &params.gma, true);
        let xs: Vec<_> = batches.iter().map(|b| g.constant(b.clone())).collect();
        let fs = encoder_forward_batches(&mut g, &enc, &xs).unwrap();
        let h = g.concat_rows(&fs).unwrap();
        let out = gma_forward(&mut g, &gma, h).unwrap();
        let loss = bce_with_logits(&mut g, out.logit, label).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut vars = enc.vars();
        vars.extend(gma.vars());
        let gs = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
        (g.value(loss).item().unwrap(), gs)
    }

    #[test]
    fn full_model_gradient_matches_central_differences() {
        for bn in [None, Some(BnMode::Synced)] {
            let params = init_params(21, &tiny(bn)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let batches = [random_matrix(&mut rng, 5, 6), random_matrix(&mut rng, 5, 6)];
            let (_, analytic) = full_loss(&params, &batches, 1.0);
            let eps = 1e-5;
            let n_tensors = analytic.len();
            for ti in 0..n_tensors {
                for ci in 0..analytic[ti].numel() {
                    let at = |delta: f64| {
                        let mut p = params.clone();
                        let mut all = p.encoder.tensors_mut();
                        all.extend(p.gma.tensors_mut());
                        all[ti].data_mut()[ci] += delta;
                        full_loss(&p, &batches, 1.0).0
                    };
                    let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
                    let a = analytic[ti].data()[ci];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                    assert!(rel < 1e-5, "tensor {ti} coord {ci}: {a} vs {numeric}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn attention_is_a_distribution(k in 1usize..=64, seed: u64) {
            let p = init_params(seed, &tiny(None)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let (attn, _, _) = gma_eval(&p, &random_matrix(&mut rng, k, 4));
            prop_assert!(attn.data().iter().all(|&a| a > 0.0));
            prop_assert!((attn.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gma_permutation_symmetry(k in 2usize..20, seed: u64) {
            let p = init_params(seed, &tiny(None)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let h = random_matrix(&mut rng, k, 4);
            let mut perm: Vec<usize> = (0..k).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let hp = Tensor::from_rows(&perm.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let (a, e, z) = gma_eval(&p, &h);
            let (ap, ep, zp) = gma_eval(&p, &hp);
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((ap.data()[j] - a.data()[i]).abs() < 1e-12);
            }
            for (x, y) in e.data().iter().zip(ep.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((z - zp).abs() < 1e-12);
        }

        #[test]
        fn sync_bn_identical_on_all_ranks(n in 1usize..6, seed: u64) {
            let group = ProcessGroup::spawn(n, SchedulerKind::Threaded).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let locals: Vec<_> = (0..n)
                .map(|_| {
                    let k = rng.random_range(1..6);
                    BnLocalStats::of(&random_matrix(&mut rng, k, 3), Precision::F64)
                })
                .collect();
            let stats = sync_bn_stats(&group, &locals, &ReductionPlan::ascending(&group.encoder_ranks())).unwrap();
            for s in &stats[1..] {
                prop_assert!(s.mean.bitwise_eq(&stats[0].mean) && s.var.bitwise_eq(&stats[0].var));
            }
        }
    }
}
