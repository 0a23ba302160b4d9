//! Analytic gradients against central finite differences.

#[path = "support/gradcheck.rs"]
mod gradcheck;

use gradcheck::TOL;

#[test]
fn random_architectures_match_finite_differences() {
    let mut worst_overall: f64 = 0.0;
    for seed in 0..24 {
        let worst = gradcheck::random_architecture(seed);
        assert!(worst < TOL, "architecture {seed}: relative error {worst:e}");
        worst_overall = worst_overall.max(worst);
    }
    println!("worst relative error over 24 architectures: {worst_overall:e}");
}

#[test]
fn student_heads_and_trunk_match_finite_differences() {
    for seed in 0..6 {
        let worst = gradcheck::student(seed);
        assert!(worst < TOL, "student {seed}: {worst:e}");
    }
}

#[test]
fn explorer_objectives_match_finite_differences() {
    for (seed, &lambda) in gradcheck::EXPLORER_LAMBDAS.iter().enumerate() {
        let worst = gradcheck::explorer(seed as u64, lambda);
        assert!(worst < TOL, "explorer, lambda {lambda}: {worst:e}");
    }
}
