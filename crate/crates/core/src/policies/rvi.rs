use crate::error::{Error, Result};

/// Damped relative value iteration for an average-reward problem.
///
/// `backup(h, out)` writes the Bellman image of `h` into `out`. `h` is used
/// as the warm start and holds the relative values on return, normalised
/// so that `h[0] = 0`. Stops once the span of `Th - h` drops below `tol`.
pub(crate) fn relative_value_iteration(
    h: &mut [f64],
    tol: f64,
    max_iterations: usize,
    damping: f64,
    mut backup: impl FnMut(&[f64], &mut [f64]),
) -> Result<f64> {
    let mut image = vec![0.0; h.len()];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iterations {
        backup(h, &mut image);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (t, v) in image.iter().zip(h.iter()) {
            let d = t - v;
            lo = lo.min(d);
            hi = hi.max(d);
        }
        residual = hi - lo;
        if residual <= tol {
            let gain = 0.5 * (lo + hi);
            // Take the undamped image so the returned values satisfy the
            // Bellman equation to within `tol`.
            let base = image[0];
            for (v, t) in h.iter_mut().zip(&image) {
                *v = t - base;
            }
            return Ok(gain);
        }
        let base = h[0] + damping * (image[0] - h[0]);
        for (v, t) in h.iter_mut().zip(&image) {
            *v += damping * (t - *v) - base;
        }
        // h[0] is now exactly zero up to rounding.
    }
    Err(Error::NonConvergence {
        what: "relative value iteration",
        residual,
        iterations: max_iterations,
    })
}
