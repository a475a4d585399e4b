use super::*;
use crate::data::{generate_dataset, DatasetConfig};
use crate::fabric::ProcessGroup;
use crate::nn::{init_params, BnMode, ModelDims};
use crate::verify::{compare_runs, roc_auc};

fn dims(bn: Option<BnMode>) -> ModelDims {
    ModelDims::new(6, vec![8], 4).with_attn(3).with_batch_norm(bn)
}

fn slides(n: usize, seed: u64) -> Vec<SyntheticSlide> {
    let cfg = DatasetConfig {
        n_slides: n,
        d: 6,
        tiles_median: 40.0,
        tiles_min: 8,
        tiles_max: 80,
        witness_fraction: 0.1,
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg, seed).unwrap()
}

fn cfg(n: usize) -> TrainConfig {
    TrainConfig {
        n_encoders: n,
        tiles_per_rank: 5,
        optim: OptimConfig {
            lr: 1e-2,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn run(trainer: &mut dyn Trainer, cfg: &TrainConfig, data: &[SyntheticSlide], steps: u64) -> Vec<StepTrace> {
    (0..steps)
        .map(|s| {
            let input = prepare_step(&data[s as usize % data.len()], cfg, 0, s).unwrap();
            trainer.step(&input, cfg.optim.lr).unwrap()
        })
        .collect()
}

fn paired(cfg: &TrainConfig, bn: Option<BnMode>, steps: u64) -> (Vec<StepTrace>, Vec<StepTrace>) {
    let params = init_params(4, &dims(bn)).unwrap();
    let data = slides(6, 9);
    let mut r = ReferenceTrainer::new(params.clone(), cfg).unwrap();
    let mut d = DistributedTrainer::new(params, cfg).unwrap();
    (run(&mut r, cfg, &data, steps), run(&mut d, cfg, &data, steps))
}

#[test]
fn pseudo_loss_examples() {
    let mut g = Graph::new();
    let f = g.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
    let l = pseudo_loss(&mut g, f, &Tensor::vector(vec![0.2, 0.1, -0.4]), 3).unwrap();
    assert!((g.value(l).item().unwrap() + 0.6).abs() < 1e-15);
    let grads = g.backward(l).unwrap();
    let want: Vec<f64> = [0.2, 0.1, -0.4].iter().map(|x| 3.0 * x).collect();
    assert_eq!(grads.get(f).unwrap().data(), want.as_slice());

    let mut g = Graph::new();
    let f = g.param(Tensor::vector(vec![3.0, 4.0]));
    let l = pseudo_loss(&mut g, f, &Tensor::zeros(&[2]), 5).unwrap();
    assert_eq!(g.value(l).item(), Some(0.0));
    assert_eq!(g.backward(l).unwrap().get(f).unwrap().data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let f = g.param(Tensor::vector(vec![1.0, 1.0]));
    let l = pseudo_loss(&mut g, f, &Tensor::vector(vec![1.0, 1.0]), 1).unwrap();
    assert_eq!(g.value(l).item(), Some(2.0));
    assert_eq!(g.backward(l).unwrap().get(f).unwrap().data(), &[1.0, 1.0]);

    let mut g = Graph::new();
    let f = g.param(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        pseudo_loss(&mut g, f, &Tensor::zeros(&[3, 2]), 2),
        Err(ProtocolError::ShapeMismatch { .. })
    ));
}

#[test]
fn distributed_matches_reference() {
    for bn in [None, Some(BnMode::Synced), Some(BnMode::Local)] {
        for n in [1, 2, 4, 5] {
            let c = cfg(n);
            let (r, d) = paired(&c, bn, 6);
            // scaling by N and averaging over N is exact for powers of two;
            // otherwise the two runs may differ in the last bit after step 0
            assert_eq!(r[0].loss, d[0].loss);
            for (a, b) in r.iter().zip(&d) {
                assert!((a.loss - b.loss).abs() <= 1e-12, "bn {bn:?} n {n} step {}", a.step);
                if n.is_power_of_two() {
                    assert_eq!(a.loss, b.loss);
                    assert_eq!(a.feature_checksums, b.feature_checksums);
                }
            }
            let worst = compare_runs(&r, &d).unwrap().iter().map(|m| m.max_nl1()).fold(0.0, f64::max);
            assert!(worst <= 1e-12, "bn {bn:?} n {n}: {worst}");
            if n.is_power_of_two() {
                assert_eq!(worst, 0.0, "bn {bn:?} n {n}");
            }
        }
    }
}

#[test]
fn schedulers_agree_bitwise() {
    let seq = cfg(3);
    let thr = TrainConfig {
        scheduler: SchedulerKind::Threaded,
        ..seq.clone()
    };
    let (_, a) = paired(&seq, Some(BnMode::Synced), 4);
    let (_, b) = paired(&thr, Some(BnMode::Synced), 4);
    assert_eq!(a, b);
}

#[test]
fn dropping_n_scaling_divides_encoder_gradients() {
    let c = TrainConfig {
        no_n_scaling: true,
        ..cfg(4)
    };
    for bn in [None, Some(BnMode::Synced)] {
        let (r, d) = paired(&c, bn, 1);
        for (a, b) in r[0].tracked.iter().zip(&d[0].tracked) {
            let factor = if a.name.starts_with("encoder") { 4.0 } else { 1.0 };
            for (x, y) in a.grad.data().iter().zip(b.grad.data()) {
                assert!((x / factor - y).abs() <= 1e-12 * x.abs().max(1e-300), "{}: {x} {y}", a.name);
            }
        }
    }
}

#[test]
fn replicas_stay_identical() {
    let c = cfg(3);
    let (_, d) = paired(&c, Some(BnMode::Synced), 5);
    for t in &d {
        assert_eq!(t.replica_checksums.len(), 3);
        assert!(t.replica_checksums.iter().all(|&x| x == t.replica_checksums[0]));
    }
}

#[test]
fn desync_is_detected() {
    let c = cfg(3);
    let params = init_params(4, &dims(None)).unwrap();
    let mut d = DistributedTrainer::new(params, &c).unwrap();
    d.replicas_mut().ranks[2].params.encoder.layers[0].w.data_mut()[0] += 1e-9;
    let input = prepare_step(&slides(1, 2)[0], &c, 0, 0).unwrap();
    match d.step(&input, 0.1) {
        Err(ProtocolError::Desync { checksums, .. }) => {
            assert_eq!(checksums.len(), 3);
            assert_ne!(checksums[0], checksums[1]);
            assert_eq!(checksums[0], checksums[2]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn initial_broadcast_syncs_replicas() {
    let params = init_params(4, &dims(None)).unwrap();
    let group = ProcessGroup::spawn(3, SchedulerKind::Sequential).unwrap();
    let mut replicas = ReplicaState::new(&group, &params).unwrap();
    replicas.ranks[3].params.encoder.layers[0].w.data_mut()[0] = 42.0;
    replicas.broadcast(&group).unwrap();
    let sums = replicas.encoder_checksums();
    assert!(sums.iter().all(|&s| s == sums[0]));
}

#[test]
fn frozen_encoder_only_moves_the_aggregator() {
    let c = TrainConfig {
        frozen_encoder: true,
        ..cfg(2)
    };
    let params = init_params(4, &dims(Some(BnMode::Synced))).unwrap();
    let data = slides(4, 1);
    for mut t in [
        Box::new(DistributedTrainer::new(params.clone(), &c).unwrap()) as Box<dyn Trainer>,
        Box::new(ReferenceTrainer::new(params.clone(), &c).unwrap()),
    ] {
        run(t.as_mut(), &c, &data, 3);
        let after = t.params();
        assert_eq!(after.encoder, params.encoder);
        assert_ne!(after.gma, params.gma);
    }
    let (r, d) = paired(&c, Some(BnMode::Synced), 3);
    assert!(compare_runs(&r, &d).unwrap().iter().all(|m| m.is_zero()));
}

#[test]
fn drift_mode_diverges_but_stays_finite() {
    let c = TrainConfig {
        reduction: ReductionMode::Drift,
        precision: Precision::F32,
        ..cfg(4)
    };
    let (r, d) = paired(&c, None, 20);
    let records = compare_runs(&r, &d).unwrap();
    assert!(records[0].max_nl1() > 0.0);
    assert!(records.iter().all(|m| m.max_nl1().is_finite() && m.loss_absdiff.is_finite()));
    // replicas still agree with each other
    assert!(d.iter().all(|t| t.replica_checksums.iter().all(|&x| x == t.replica_checksums[0])));
}

#[test]
fn batch_count_is_checked() {
    let c = cfg(2);
    let params = init_params(4, &dims(None)).unwrap();
    let mut input = prepare_step(&slides(1, 2)[0], &c, 0, 0).unwrap();
    input.batches.pop();
    let mut d = DistributedTrainer::new(params.clone(), &c).unwrap();
    assert!(matches!(d.step(&input, 0.1), Err(ProtocolError::BatchCount { .. })));
    let mut r = ReferenceTrainer::new(params, &c).unwrap();
    assert!(matches!(r.step(&input, 0.1), Err(ProtocolError::BatchCount { .. })));
}

#[test]
fn fit_step_counts_and_determinism() {
    let data = slides(6, 3);
    let (train, val) = data.split_at(4);
    let c = TrainConfig {
        epochs: 2,
        subsample: 0.5,
        n_boot: 50,
        ..cfg(2)
    };
    let params = init_params(1, &dims(Some(BnMode::Synced))).unwrap();
    let a = fit(train, val, &params, &c, TrainMode::Distributed).unwrap();
    assert_eq!(a.history.len(), 4);
    assert!(a.epochs.iter().all(|e| e.steps == 2));
    let b = fit(train, val, &params, &c, TrainMode::Distributed).unwrap();
    let losses = |r: &FitResult| r.history.iter().map(|t| t.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    let reference = fit(train, val, &params, &c, TrainMode::Reference).unwrap();
    for (x, y) in a.history.iter().zip(&reference.history) {
        assert!((x.loss - y.loss).abs() <= 1e-12);
    }

    assert!(matches!(fit(&[], val, &params, &c, TrainMode::Reference), Err(ProtocolError::EmptySplit(_))));
    assert!(matches!(fit(train, &[], &params, &c, TrainMode::Reference), Err(ProtocolError::EmptySplit(_))));
}

#[test]
fn inference_contract() {
    let params = init_params(2, &dims(Some(BnMode::Synced))).unwrap();
    let data = slides(3, 4);
    for s in &data {
        let p = infer_slide(&params, s, None).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let capped = infer_slide_detailed(&params, s, Some(5)).unwrap();
        assert_eq!(capped.attention.len(), 5);
    }

    // two identical tiles give the same prediction as one of them twice over
    let row = data[0].tiles.slice_rows(0, 1).unwrap();
    let twice = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]).unwrap();
    let one = SyntheticSlide {
        id: 0,
        tiles: twice.clone(),
        label: 0,
        witness: vec![false; 2],
    };
    let inf = infer_slide_detailed(&params, &one, None).unwrap();
    assert_eq!(inf.attention, vec![0.5, 0.5]);

    let empty = SyntheticSlide {
        id: 9,
        tiles: Tensor::zeros(&[0, 6]),
        label: 0,
        witness: vec![],
    };
    assert!(matches!(
        infer_slide(&params, &empty, None),
        Err(ProtocolError::Data(DataError::EmptySlide(9)))
    ));
}

#[test]
fn untrained_model_is_near_chance() {
    let cfg = DatasetConfig {
        n_slides: 200,
        d: 6,
        tiles_median: 40.0,
        tiles_min: 8,
        tiles_max: 80,
        ..DatasetConfig::default()
    };
    let data = generate_dataset(&cfg, 17).unwrap();
    let params = init_params(5, &dims(None)).unwrap();
    let scores: Vec<f64> = data.iter().map(|s| infer_slide(&params, s, None).unwrap()).collect();
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let auc = roc_auc(&labels, &scores).unwrap();
    assert!((auc - 0.5).abs() <= 0.1, "{auc}");
}

#[test]
fn history_csv_has_one_row_per_step() {
    let c = cfg(2);
    let (r, _) = paired(&c, None, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &r).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,step,slide_id,loss,lr");
    assert_eq!(lines.len(), 4);
}

#[test]
fn config_validation() {
    for bad in [
        TrainConfig { n_encoders: 0, ..cfg(1) },
        TrainConfig { tiles_per_rank: 0, ..cfg(1) },
        TrainConfig { subsample: 0.0, ..cfg(1) },
        TrainConfig { epochs: 0, ..cfg(1) },
    ] {
        assert!(matches!(bad.validate(), Err(ProtocolError::InvalidConfig(_))));
    }
    let json = r#"{"n_encoders": 3, "bogus": 1}"#;
    assert!(serde_json::from_str::<TrainConfig>(json).is_err());
}
