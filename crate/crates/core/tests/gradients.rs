mod support;

use ptsc::build_model;
use support::*;

#[test]
fn every_op_matches_finite_differences() {
    for seed in [1, 2] {
        for (name, err) in op_gradient_suite(seed) {
            assert!(err < FD_TOL, "{name}: relative error {err:e}");
        }
    }
}

#[test]
fn tiny_amscnn_te_matches_finite_differences() {
    for (name, err) in tiny_model_gradient_check(3) {
        assert!(err < FD_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn other_architectures_match_finite_differences() {
    for (k, preset) in ["basecnn-te", "mscnn", "ascnn-te", "amsresnet-te", "resnet-vl"].into_iter().enumerate() {
        let seed = 10 + k as u64;
        let mut r = rng(seed);
        let cfg = tiny_config(preset, 2, 2, 600);
        let mut m = build_model::<f64>(&cfg, seed).unwrap();
        let (x, valid, labels) = random_batch(&mut r, 2, &[600, 40, 5, 300], 600, 2);
        for (name, err) in model_gradient_check(&mut m, &x, &valid, &labels, 6, seed) {
            assert!(err < FD_TOL, "{preset} {name}: relative error {err:e}");
        }
    }
}
