use histo_core::losses::{build_relation_matrix, LossWeights};
use histo_core::model::{Model, ModelConfig};
use histo_core::nn::layers::normal;
use histo_core::rng::rng_for;
use histo_core::training::{gradient_check, Batch};

fn tiny_batch(seed: u64) -> Batch {
    let mut rng = rng_for(seed, &[1]);
    let maps = vec![normal(&mut rng, &[8, 5, 7, 7], 1.0).mapv(f64::abs)];
    let transformed = vec![normal(&mut rng, &[8, 5, 7, 7], 1.0).mapv(f64::abs)];
    Batch {
        maps,
        transformed: Some(transformed),
        labels: vec![0, 0, 1, 1, 2, 2, 3, 3],
        magnifications: vec![0, 1, 2, 3, 0, 1, 2, 3],
    }
}

#[test]
fn objective_gradients_match_central_differences() {
    let cfg = ModelConfig {
        prototypes_per_class: 2,
        ..Default::default()
    };
    let model = Model::init(&cfg, &[5], 4, 11).unwrap();
    let batch = tiny_batch(3);
    let masks = model.dropout_masks(&mut rng_for(5, &[]), batch.labels.len());
    let relation = build_relation_matrix(&[0, 0, 1, 1], 1.0).unwrap();
    let weights = LossWeights::default();
    let report = gradient_check(
        &model,
        &batch,
        &weights,
        &relation,
        Some(&masks),
        &["expert_", "general", "gate", "prototypes"],
        120,
        1e-5,
        7,
    )
    .unwrap();
    assert!(report.components.iter().all(|&c| c > 0.0), "inactive term: {:?}", report.components);
    eprintln!("checked {} coordinates, max relative error {:.3e}", report.checked, report.max_rel_error);
    assert!(report.checked >= 100);
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}
