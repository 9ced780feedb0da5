//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::Rng;

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

pub const DEFAULT_COORDINATES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with a
/// central difference `(f(θ + ε e_i) − f(θ − ε e_i)) / 2ε` over up to
/// `coordinates` randomly chosen coordinates.
///
/// Relative error is `|g − ĝ| / max(|g|, |ĝ|, GRAD_FLOOR)`.
pub fn finite_difference_check<F, R>(
    loss_fn: F,
    params: &[f64],
    epsilon: f64,
    coordinates: usize,
    rng: &mut R,
) -> GradCheck
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    R: Rng + ?Sized,
{
    assert!(
        (1e-7..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside [1e-7, 1e-3]"
    );
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let n = coordinates.min(params.len());
    let mut coords = sample(rng, params.len(), n).into_vec();
    coords.sort_unstable();

    let mut probe = params.to_vec();
    let mut worst = GradCheck {
        max_relative_error: 0.0,
        worst_coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: n,
    };
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let up = loss_fn(&probe).0;
        probe[i] = orig - epsilon;
        let down = loss_fn(&probe).0;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        if rel >= worst.max_relative_error {
            worst.max_relative_error = rel;
            worst.worst_coordinate = i;
            worst.analytic = a;
            worst.numeric = numeric;
        }
    }
    worst
}
