//! Analytic gradients against central differences over many seeded draws.

use vpl_core::gradsuite::{check_losses, check_tensor_ops, check_vib, TOLERANCE};

#[test]
fn every_tensor_op_over_one_hundred_draws() {
    let mut worst = std::collections::BTreeMap::<String, f64>::new();
    for seed in 0..100 {
        for e in check_tensor_ops(seed, 1e-5).unwrap() {
            assert!(e.passed(), "seed {seed}: {} {:?}", e.name, e.report);
            let w = worst.entry(e.name).or_default();
            *w = w.max(e.report.max_rel_error);
        }
    }
    assert!(worst.values().all(|&w| w < TOLERANCE));
}

#[test]
fn bottleneck_over_many_draws() {
    for seed in 0..50 {
        for e in check_vib(seed, 1e-5).unwrap() {
            assert!(e.passed(), "seed {seed}: {} {:?}", e.name, e.report);
        }
    }
}

#[test]
fn training_losses_over_several_batches() {
    for seed in 0..5 {
        for e in check_losses(seed, 1e-5).unwrap() {
            assert!(e.passed(), "seed {seed}: {} {:?}", e.name, e.report);
        }
    }
}
