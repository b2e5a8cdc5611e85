use histo_core::backbone::{BackboneSet, FeatureCache, Transform};
use histo_core::dataset::{
    compute_normalization_stats, generate_synthetic_dataset, kfold_split, stratified_split, Magnification,
};
use histo_core::training::{Ablation, FoldState, Subset, TrainConfig, TrainContext};

struct Desk {
    cache: FeatureCache,
    dims: Vec<usize>,
    train: Subset,
    val: Subset,
}

fn desk(seed: u64) -> Desk {
    let index = generate_synthetic_dataset(10, &Magnification::ALL, seed).unwrap();
    let split = stratified_split(&index, 0.2, seed).unwrap();
    let folds = kfold_split(&split.train, 5, seed).unwrap();
    let stats = compute_normalization_stats(&split.train).unwrap();
    let cfg = TrainConfig::default();
    let set = BackboneSet::build(&cfg.model.backbones, cfg.model.tiny_dim, seed).unwrap();
    let mut cache = FeatureCache::new(&Transform::ALL);
    cache.fill(&set, &split.train, &stats).unwrap();
    Desk {
        cache,
        dims: set.dims(),
        train: Subset::from_index(&folds.folds[0].train),
        val: Subset::from_index(&folds.folds[0].val),
    }
}

fn config(seed: u64, epochs: usize, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        ablation,
        ..TrainConfig::default()
    }
}

#[test]
fn desk_training_behaves() {
    let d = desk(1);

    // A full fold fits its own training data.
    let ctx = TrainContext::new(&config(1, 15, Ablation::Full), &d.cache, &d.dims, 8).unwrap();
    let out = ctx.train_fold(0, &d.train, &d.val, None, &mut |_| Ok(())).unwrap();
    let last = out.history.last().unwrap();
    assert!(last.train_eval_accuracy >= 0.95, "{}", last.train_eval_accuracy);
    assert!(out.val_accuracy >= 0.8, "{}", out.val_accuracy);

    // Cross-entropy only logs nothing but the focal term.
    let ctx = TrainContext::new(&config(1, 2, Ablation::A2), &d.cache, &d.dims, 8).unwrap();
    let out = ctx.train_fold(0, &d.train, &d.val, None, &mut |_| Ok(())).unwrap();
    for rec in &out.history {
        for (k, v) in &rec.components {
            if k == "focal" {
                assert!(*v > 0.0);
            } else {
                assert_eq!(*v, 0.0, "{k}");
            }
        }
    }

    // Without any epochs the initial model stays far from fitted.
    let ctx = TrainContext::new(&config(1, 0, Ablation::Full), &d.cache, &d.dims, 8).unwrap();
    let out = ctx.train_fold(0, &d.train, &d.val, None, &mut |_| Ok(())).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    assert!(out.val_accuracy < 0.5, "{}", out.val_accuracy);

    // Stopping after an epoch and resuming from its state retraces the run.
    let ctx = TrainContext::new(&config(1, 3, Ablation::Full), &d.cache, &d.dims, 8).unwrap();
    let mut states: Vec<FoldState> = Vec::new();
    let whole = ctx
        .train_fold(0, &d.train, &d.val, None, &mut |s| {
            states.push(s.clone());
            Ok(())
        })
        .unwrap();
    let resumed = ctx
        .train_fold(0, &d.train, &d.val, Some(states[0].clone()), &mut |_| Ok(()))
        .unwrap();
    assert_eq!(whole.history, resumed.history);
    assert_eq!(whole.best_epoch, resumed.best_epoch);
    assert_eq!(whole.model.params.to_stored(), resumed.model.params.to_stored());

    // A state from another fold is refused.
    assert!(ctx.train_fold(1, &d.train, &d.val, Some(states[0].clone()), &mut |_| Ok(())).is_err());
}
