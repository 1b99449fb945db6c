mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triprec::data::{build_dataset, load_dataset, parse_checkins, parse_kg, save_dataset, CheckinFormat, FilterConfig};
use triprec::eval::evaluate_trips;
use triprec::train::{resume, train, Checkpoint, CHECKPOINT_FILE};
use triprec::Execution;

fn as_json(c: &Checkpoint) -> serde_json::Value {
    serde_json::to_value(c).unwrap()
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let ds = common::dataset(20);
    let cfg = common::quick_config();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(&cfg, &ds, Some(dir.path()), &mut |_| {}).unwrap();
    let loaded = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.model.params, ckpt.model.params);
    assert_eq!(loaded.best_model.params, ckpt.best_model.params);
    assert_eq!(loaded.history, ckpt.history);
    assert_eq!(as_json(&loaded), as_json(&ckpt));
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let ds = common::dataset(20);
    let mut cfg = common::quick_config();
    cfg.train.epochs = 4;
    cfg.train.patience = 100;
    cfg.train.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join(CHECKPOINT_FILE);
    let mid_path = dir.path().join("mid.json");
    let full = train(&cfg, &ds, Some(dir.path()), &mut |log| {
        // The epoch-2 checkpoint is still on disk while epoch 3 reports.
        if log.epoch == 3 {
            std::fs::copy(&ckpt_path, &mid_path).unwrap();
        }
    })
    .unwrap();
    let mid = Checkpoint::load(&mid_path).unwrap();
    assert_eq!(mid.epoch, 2);
    let resumed = resume(mid, &cfg, &ds, None, &mut |_| {}).unwrap();
    assert_eq!(resumed.epoch, 4);
    assert_eq!(as_json(&resumed), as_json(&full));
}

#[test]
fn runs_are_reproducible_and_execution_mode_is_invisible() {
    let ds = common::dataset(20);
    let mut cfg = common::quick_config();
    cfg.execution = Execution::Sequential;
    let a = train(&cfg, &ds, None, &mut |_| {}).unwrap();
    let b = train(&cfg, &ds, None, &mut |_| {}).unwrap();
    cfg.execution = Execution::Parallel;
    let c = train(&cfg, &ds, None, &mut |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history, c.history);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.model.params, c.model.params);

    let record = &ds.test[0];
    let trips: Vec<Vec<usize>> = [&a, &c]
        .iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            k.best_model
                .recommend(&record.hometown, &record.query(), 0.9, false, &mut rng)
                .unwrap()
        })
        .collect();
    assert_eq!(trips[0], trips[1]);

    let seq = evaluate_trips(&a.best_model, &ds.test, 0.9, false, 4, Execution::Sequential).unwrap();
    let par = evaluate_trips(&a.best_model, &ds.test, 0.9, false, 4, Execution::Parallel).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn different_seeds_train_differently() {
    let ds = common::dataset(20);
    let mut cfg = common::quick_config();
    cfg.train.epochs = 1;
    let a = train(&cfg, &ds, None, &mut |_| {}).unwrap();
    cfg.seed += 1;
    let b = train(&cfg, &ds, None, &mut |_| {}).unwrap();
    assert_ne!(a.model.params, b.model.params);
}

#[test]
fn tsv_ingest_matches_direct_build_and_storage_round_trips() {
    let synth = common::synth(20);
    let direct = build_dataset(&synth.checkins, &synth.triples, &FilterConfig::default(), 1).unwrap();
    let checkins = parse_checkins(&synth.checkins_tsv(), CheckinFormat::Tsv).unwrap();
    let triples = parse_kg(&synth.kg_tsv()).unwrap();
    let via_text = build_dataset(&checkins, &triples, &FilterConfig::default(), 1).unwrap();
    assert_eq!(via_text, direct);

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&direct, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), direct);
}
