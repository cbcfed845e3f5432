//! Training-loop behavior on a small synthetic dataset.

use std::sync::OnceLock;

use inn_core::data::{make_synthetic, Dataset, InputKind, SynthConfig, WindowConfig};
use inn_core::graph::NetworkGraph;
use inn_core::inflation::{FusionSpec, FusionStrategy, InflationPolicy};
use inn_core::tensor::Exec;
use inn_core::train::{
    evaluate, fold_cases, run_fold, stratified_kfold, Checkpoint, Init, ModelSpec, SampleMode,
    Stage, TrainConfig, Trainer,
};
use inn_core::zoo::{BackboneConfig, Family};
use inn_core::WeightStore;

const SIZE: usize = 32;

fn dataset() -> &'static Dataset {
    static DS: OnceLock<(tempfile::TempDir, Dataset)> = OnceLock::new();
    &DS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_synthetic(&SynthConfig::new([3, 3, 3], 7), dir.path()).unwrap();
        let ds = Dataset::load(manifest, SIZE).unwrap();
        (dir, ds)
    })
    .1
}

fn window() -> WindowConfig {
    WindowConfig::new(3, SIZE, FusionSpec::new(FusionStrategy::Intermediate, &["T1", "T2"])).unwrap()
}

fn spec() -> ModelSpec {
    ModelSpec {
        backbone: BackboneConfig::tiny(Family::InceptionV3, 3),
        policy: InflationPolicy::default(),
    }
}

fn config(epochs: usize, lr: f64) -> TrainConfig {
    let mut cfg = TrainConfig::for_input(InputKind::Roi);
    cfg.batch_size = 16;
    cfg.max_epochs = epochs;
    cfg.adam.lr = lr;
    cfg.seed = 3;
    cfg
}

fn model() -> (NetworkGraph, WeightStore) {
    spec().scratch_3d(&window(), 11).unwrap()
}

fn trainer<'a>(g: &'a NetworkGraph, cfg: TrainConfig) -> Trainer<'a> {
    Trainer {
        graph: g,
        dataset: dataset(),
        mode: SampleMode::Volumes(window()),
        cfg,
        exec: Exec::Deterministic,
    }
}

const TRAIN: [usize; 6] = [0, 1, 3, 4, 6, 7];
const VAL: [usize; 3] = [2, 5, 8];

fn trainable(g: &NetworkGraph, w: &WeightStore) -> Vec<(String, Vec<f64>)> {
    g.nodes
        .iter()
        .flat_map(|n| {
            n.weights
                .iter()
                .enumerate()
                .filter(|(i, _)| n.layer.slot_trainable(*i))
                .map(|(_, s)| (s.clone(), w.get(s).unwrap().to_f64_vec()))
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_trainable_weights_unchanged() {
    let (g, w) = model();
    let ck = trainer(&g, config(2, 0.0))
        .train(Checkpoint::fresh(w.clone(), 0.0), &TRAIN, &VAL, |_, _| Ok(()))
        .unwrap();
    assert_eq!(ck.epochs_done(), 2);
    assert_eq!(trainable(&g, &ck.weights), trainable(&g, &w));
}

#[test]
fn resumed_training_reproduces_the_next_epoch() {
    let (g, w) = model();
    let straight = trainer(&g, config(3, 1e-3))
        .train(Checkpoint::fresh(w.clone(), 1e-3), &TRAIN, &VAL, |_, _| Ok(()))
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.innw");
    let first = trainer(&g, config(2, 1e-3))
        .train(Checkpoint::fresh(w, 1e-3), &TRAIN, &VAL, |_, ck| ck.save(&path))
        .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, first);
    let resumed = trainer(&g, config(3, 1e-3))
        .train(loaded, &TRAIN, &VAL, |_, _| Ok(()))
        .unwrap();

    let (a, b) = (straight.history[2], resumed.history[2]);
    assert!((a.train_loss - b.train_loss).abs() < 1e-5, "{a:?} vs {b:?}");
    assert!((a.val_loss - b.val_loss).abs() < 1e-5, "{a:?} vs {b:?}");
    assert_eq!(straight.history, resumed.history);
    assert_eq!(straight.weights.to_bytes(), resumed.weights.to_bytes());
}

#[test]
fn deterministic_training_is_bitwise_reproducible() {
    let run = || {
        let (g, w) = model();
        trainer(&g, config(2, 1e-3))
            .train(Checkpoint::fresh(w, 1e-3), &TRAIN, &VAL, |_, _| Ok(()))
            .unwrap()
            .to_store()
            .unwrap()
            .to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn evaluation_ignores_case_order() {
    let (g, w) = model();
    let ds = dataset();
    let order: Vec<usize> = (0..ds.len()).collect();
    let reversed: Vec<usize> = order.iter().rev().copied().collect();
    let a = evaluate(&g, &w, ds, &order, &window(), 4, Exec::Deterministic).unwrap();
    let b = evaluate(&g, &w, ds, &reversed, &window(), 4, Exec::Deterministic).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.confusion, b.confusion);
    for (id, truth, pred, probs) in &a.predictions {
        let other = b.predictions.iter().find(|p| &p.0 == id).unwrap();
        assert_eq!((truth, pred), (&other.1, &other.2));
        for (x, y) in probs.iter().zip(&other.3) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn pretrained_fold_runs_both_stages() {
    let ds = dataset();
    let mut cfg = config(2, 1e-3);
    cfg.folds = 3;
    let assignment = stratified_kfold(&ds.labels(), 3, cfg.seed).unwrap();
    let mut stages = Vec::new();
    let out = run_fold(
        &spec(),
        ds,
        &window(),
        &cfg,
        Init::Pretrained2d { epochs: 1 },
        &assignment,
        1,
        Exec::Deterministic,
        None,
        |stage, r, _| {
            stages.push((stage, r.epoch));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(stages, [(Stage::Pretrain2d, 1), (Stage::Train3d, 1), (Stage::Train3d, 2)]);
    assert_eq!(out.pretrain_history.len(), 1);
    let (_, test) = fold_cases(&assignment, 1);
    assert_eq!(out.evaluation.predictions.len(), test.len());
    assert_eq!(out.evaluation.confusion.total(), test.len());
}
