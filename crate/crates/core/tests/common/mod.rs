#![allow(dead_code)]

pub mod gradcheck;

use instret::rng::{rng_for, Rng};
use ndarray::{Array, Array2, Dimension};
use rand::Rng as _;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

pub fn rng(tag: &str, index: u64) -> Rng {
    rng_for(0x5eed, tag, index)
}

pub fn uniform<D: Dimension>(rng: &mut Rng, shape: D, lo: f64, hi: f64) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    uniform(rng, ndarray::Ix2(rows, cols), -1.0, 1.0)
}

/// Relative error with a small absolute floor so that near-zero gradients
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Tracks the worst relative error seen over a gradient check.
#[derive(Default, Debug)]
pub struct ErrorTracker {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl ErrorTracker {
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        assert!(e.is_finite(), "non-finite error: analytic {analytic}, numeric {numeric}");
        self.worst = self.worst.max(e);
        self.checked += 1;
    }

    pub fn assert_within(&self, what: &str) {
        assert!(self.checked > 0, "{what}: nothing checked");
        assert!(
            self.worst < TOLERANCE,
            "{what}: worst relative error {:.3e} over {} coordinates",
            self.worst,
            self.checked
        );
    }
}

/// Fixed-seed proptest configuration, so every run sees the same cases.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x1257),
        failure_persistence: None,
        ..Default::default()
    }
}
