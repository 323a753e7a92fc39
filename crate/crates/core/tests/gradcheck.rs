mod common;

use common::{check_composed, miniature_model, primitive_checks, random_tensor, test_rng};

#[test]
fn primitives_match_central_differences() {
    for seed in 0..5 {
        for (name, err) in primitive_checks(seed) {
            assert!(err < 1e-4, "{name} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn miniature_model_matches_central_differences() {
    for seed in 0..5 {
        let mut model = miniature_model(seed);
        let mut rng = test_rng(100 + seed);
        let window: Vec<Vec<f64>> = (0..4)
            .map(|_| random_tensor(&mut rng, &[3], 0.0, 1.0).into_values())
            .collect();
        let err = check_composed(&mut model, &window, 37.0 + 10.0 * seed as f64);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}
