use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gradients below this magnitude are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `f` at `params` against
/// central differences `(f(θ+ε) - f(θ-ε)) / 2ε` on up to `max_coords`
/// coordinates drawn with `seed`. Returns the largest relative error.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], epsilon: f64, max_coords: usize, seed: u64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let n = params.len();
    let coords: Vec<usize> = if max_coords >= n {
        (0..n).collect()
    } else {
        sample(&mut ChaCha8Rng::seed_from_u64(seed), n, max_coords).into_vec()
    };
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let plus = f(&theta).0;
        theta[i] = orig - epsilon;
        let minus = f(&theta).0;
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}
