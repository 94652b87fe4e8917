//! Uniform sampling in the Euclidean ball around an iterate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Generator for the sample set of one function at one iteration.
///
/// Each `(iteration, function index)` pair gets its own ChaCha stream, so the
/// points do not depend on the order in which sample sets are generated.
pub fn substream(seed: u64, iteration: usize, function_index: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 32) ^ function_index as u64);
    rng
}

/// Returns `count + 1` points: `x` itself followed by `count` i.i.d. points
/// uniform in `{x' : ‖x' − x‖₂ ≤ eps}`.
///
/// Directions are normalized Gaussians and radii are `eps·U^(1/n)`.
pub fn sample_points<R: Rng + ?Sized>(x: &[f64], eps: f64, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut out = Vec::with_capacity(count + 1);
    out.push(x.to_vec());
    for _ in 0..count {
        let dir = loop {
            let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|a| a / norm).collect::<Vec<_>>();
            }
        };
        let u: f64 = rng.random();
        let r = eps * u.powf(1.0 / n as f64);
        out.push(x.iter().zip(&dir).map(|(xi, di)| xi + r * di).collect());
    }
    out
}
