//! Generate, persist, split, train and checkpoint, through the public API only.

use e2emil::data::{generate_dataset, read_dataset, write_dataset, DatasetConfig, SyntheticSlide};
use e2emil::fabric::SchedulerKind;
use e2emil::nn::{init_params, load_checkpoint, save_checkpoint, BnMode, ModelDims};
use e2emil::protocol::{fit, split_slides, TrainConfig, TrainMode};

fn small_data() -> Vec<SyntheticSlide> {
    let cfg = DatasetConfig {
        n_slides: 24,
        tiles_median: 30.0,
        tiles_min: 16,
        tiles_max: 60,
        witness_fraction: 0.2,
        delta: 3.0,
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg, 5).unwrap()
}

fn small_cfg(n: usize) -> TrainConfig {
    TrainConfig {
        n_encoders: n,
        tiles_per_rank: 4,
        epochs: 2,
        subsample: 1.0,
        n_boot: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_and_checkpoint_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let slides = small_data();
    let data_path = dir.path().join("slides.bin");
    write_dataset(&slides, &data_path).unwrap();
    assert_eq!(read_dataset(&data_path).unwrap(), slides);

    let dims = ModelDims::new(slides[0].tiles.cols(), vec![8], 4).with_batch_norm(Some(BnMode::Synced));
    let params = init_params(2, &dims).unwrap();
    let ckpt = dir.path().join("p.ckpt");
    save_checkpoint(&params, &ckpt).unwrap();
    assert_eq!(load_checkpoint(&ckpt).unwrap(), params);
}

#[test]
fn synced_bn_training_matches_reference_end_to_end() {
    let slides = small_data();
    let (train, val) = split_slides(&slides, 0.75, 9).unwrap();
    let dims = ModelDims::new(slides[0].tiles.cols(), vec![8], 4).with_batch_norm(Some(BnMode::Synced));
    let init = init_params(4, &dims).unwrap();
    for n in [1, 2, 4] {
        let cfg = small_cfg(n);
        let r = fit(&train, &val, &init, &cfg, TrainMode::Reference).unwrap();
        let d = fit(&train, &val, &init, &cfg, TrainMode::Distributed).unwrap();
        assert_eq!(r.history.len(), d.history.len());
        for (a, b) in r.history.iter().zip(&d.history) {
            assert_eq!(a.loss, b.loss, "N={n} step {}", a.step);
        }
        assert_eq!(r.final_params, d.final_params, "N={n}");
        assert_eq!(r.best_epoch, d.best_epoch);
    }
}

#[test]
fn threaded_scheduler_reproduces_sequential() {
    let slides = small_data();
    let (train, val) = split_slides(&slides, 0.75, 9).unwrap();
    let dims = ModelDims::new(slides[0].tiles.cols(), vec![8], 4).with_batch_norm(Some(BnMode::Synced));
    let init = init_params(4, &dims).unwrap();
    let seq = fit(&train, &val, &init, &small_cfg(3), TrainMode::Distributed).unwrap();
    let cfg = TrainConfig { scheduler: SchedulerKind::Threaded, ..small_cfg(3) };
    let thr = fit(&train, &val, &init, &cfg, TrainMode::Distributed).unwrap();
    assert_eq!(seq.final_params, thr.final_params);
    let losses = |h: &[e2emil::protocol::StepTrace]| h.iter().map(|t| t.loss).collect::<Vec<_>>();
    assert_eq!(losses(&seq.history), losses(&thr.history));
}
