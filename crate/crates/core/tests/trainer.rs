mod common;

use common::{toy_world, World};
use hisgt_core::checkpoint::Checkpoint;
use hisgt_core::model::{FrozenTables, HiSGTConfig, HiSGTModel};
use hisgt_core::tokenizer::TokenSequence;
use hisgt_core::trainer::{encode_corpus, epoch_order, evaluate, history_csv, train, TrainConfig, TrainSession};
use hisgt_core::Error;

fn tiny() -> HiSGTConfig {
    HiSGTConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        max_len: 64,
        d_h: 8,
        d_s: 16,
        ff_mult: 2,
        ..HiSGTConfig::default()
    }
}

fn setup(n: usize) -> (World, Vec<TokenSequence>, Vec<TokenSequence>) {
    let w = toy_world(n, 8, 16);
    let seqs = encode_corpus(&w.records, &w.vocab, 64).unwrap();
    let val = seqs[n - 4..].to_vec();
    let train = seqs[..n - 4].to_vec();
    (w, train, val)
}

fn cfg(epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 3e-3,
        patience,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn model(w: &World) -> HiSGTModel<f32> {
    HiSGTModel::new(tiny(), &w.vocab, &w.tables, 1).unwrap()
}

fn param_bytes(c: &Checkpoint) -> Vec<u8> {
    c.to_bytes().unwrap()
}

#[test]
fn epoch_order_is_a_permutation() {
    for (n, epoch) in [(1, 0), (17, 3), (100, 9)] {
        let mut o = epoch_order(n, 4, epoch);
        o.sort_unstable();
        assert_eq!(o, (0..n).collect::<Vec<_>>());
    }
    assert_ne!(epoch_order(50, 4, 0), epoch_order(50, 4, 1));
    assert_eq!(epoch_order(50, 4, 2), epoch_order(50, 4, 2));
}

#[test]
fn patience_zero_runs_one_epoch() {
    let (w, tr, va) = setup(24);
    let out = train(model(&w), &tr, &va, cfg(10, 0)).unwrap();
    assert_eq!(out.history.len(), 1);
    // 20 training records, batch 8: the partial batch is kept
    assert_eq!(out.history[0].step, 3);
}

#[test]
fn deterministic_history_and_best_selection() {
    let (w, tr, va) = setup(24);
    let a = train(model(&w), &tr, &va, cfg(6, 2)).unwrap();
    let b = train(model(&w), &tr, &va, cfg(6, 2)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(param_bytes(&a.best), param_bytes(&b.best));

    let best = a.best.header.train_state.best_epoch.unwrap();
    let vals: Vec<f64> = a.history.iter().map(|r| r.val.total).collect();
    for (e, v) in vals.iter().enumerate().take(best + 1) {
        assert!(vals[best] <= *v, "epoch {e}");
    }
    let reloaded = a.best.clone().into_model(&w.vocab, &w.tables).unwrap();
    assert_eq!(evaluate(&reloaded, &va, 8).unwrap().total, vals[best]);

    let csv = history_csv(&a.history).unwrap();
    assert!(csv.starts_with("epoch,step,train_total,train_ce,train_mse_h,train_mse_s,val_total"));
    assert_eq!(csv.lines().count(), a.history.len() + 1);
}

#[test]
fn evaluate_is_pure() {
    let (w, tr, _) = setup(12);
    let m = model(&w);
    assert_eq!(evaluate(&m, &tr, 3).unwrap(), evaluate(&m, &tr, 3).unwrap());
    let whole = evaluate(&m, &tr, 100).unwrap();
    let split = evaluate(&m, &tr, 3).unwrap();
    assert!((whole.total - split.total).abs() < 1e-5);
    assert!(matches!(evaluate(&m, &[], 3), Err(Error::EmptyInput(_))));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (w, tr, va) = setup(24);
    let full = train(model(&w), &tr, &va, cfg(5, 10)).unwrap();

    let mut s = TrainSession::new(model(&w), cfg(5, 10)).unwrap();
    s.run_epoch(&tr, &va).unwrap();
    s.run_epoch(&tr, &va).unwrap();
    let last = Checkpoint::from_bytes(&s.last_checkpoint().to_bytes().unwrap()).unwrap();
    let best = Checkpoint::from_bytes(&s.best_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    drop(s);
    let mut r = TrainSession::resume(last, Some(best), &w.vocab, &w.tables).unwrap();
    r.run(&tr, &va).unwrap();
    assert_eq!(r.state.history, full.history);
    assert_eq!(param_bytes(&r.last_checkpoint()), param_bytes(&full.last));
    assert_eq!(param_bytes(&r.best_checkpoint().unwrap()), param_bytes(&full.best));
}

#[test]
fn checkpoint_roundtrip_and_hash_checks() {
    let (w, tr, va) = setup(12);
    let out = train(model(&w), &tr, &va, cfg(1, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("best.ckpt");
    out.best.save(&p).unwrap();
    assert!(dir.path().join("best.config.json").exists());
    let loaded = Checkpoint::load(&p).unwrap();
    let p2 = dir.path().join("again.ckpt");
    loaded.save(&p2).unwrap();
    assert!(std::fs::read(&p).unwrap() == std::fs::read(&p2).unwrap());

    let other = common::vocab(2, 3);
    assert!(matches!(
        loaded.clone().into_model(&other, &w.tables),
        Err(Error::HashMismatch { .. })
    ));
    let mut swapped = w.tables.clone();
    swapped.sem.as_mut().unwrap().1 = "different".into();
    match loaded.clone().into_model(&w.vocab, &swapped) {
        Err(Error::HashMismatch { what, .. }) => assert_eq!(what, "semantic table"),
        other => panic!("{:?}", other.map(|_| ())),
    }
    assert!(loaded.clone().into_model(&w.vocab, &FrozenTables::default()).is_err());
    assert!(Checkpoint::from_bytes(b"HISGTCK1\x05").is_err());
    assert!(Checkpoint::from_bytes(b"nonsense").is_err());
}

#[test]
fn empty_sets_rejected() {
    let (w, tr, _) = setup(12);
    assert!(train(model(&w), &tr, &[], cfg(1, 1)).is_err());
    assert!(train(model(&w), &[], &tr, cfg(1, 1)).is_err());
}

#[test]
fn overfit_gap() {
    let (w, tr, va) = setup(24);
    let mut c = cfg(60, 100);
    c.lr = 1e-2;
    let out = train(model(&w), &tr, &va, c).unwrap();
    let m = out.last.into_model(&w.vocab, &w.tables).unwrap();
    let on_train = evaluate(&m, &tr, 8).unwrap();
    let held_out = evaluate(&m, &va, 8).unwrap();
    assert!(on_train.ce < held_out.ce, "{on_train:?} vs {held_out:?}");
}
