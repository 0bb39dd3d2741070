//! Central finite-difference verification of analytic gradients.
//!
//! The checker re-evaluates the forward closure at perturbed inputs, so it is
//! independent of the backward rules it validates. Run it in `f64` for tight
//! tolerances or in `f32` to bound the production precision.

use super::{backward, Scalar, Tensor};

/// Analytic gradients of `f` with respect to each of `leaves`.
pub fn analytic_grad<S: Scalar>(leaves: &[Tensor<S>], f: impl Fn(&[Tensor<S>]) -> Tensor<S>) -> Vec<Vec<S>> {
    for l in leaves {
        l.zero_grad();
    }
    let loss = f(leaves);
    backward(&loss).expect("gradcheck loss must be scalar");
    leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![S::ZERO; l.numel()]))
        .collect()
}

/// Central differences (f(x+h) - f(x-h)) / 2h, element by element.
pub fn finite_diff_grad<S: Scalar>(
    leaves: &[Tensor<S>],
    f: impl Fn(&[Tensor<S>]) -> Tensor<S>,
    h: f64,
) -> Vec<Vec<S>> {
    let hs = S::from_f64(h);
    let two_h = S::from_f64(2.0 * h);
    leaves
        .iter()
        .enumerate()
        .map(|(li, leaf)| {
            let n = leaf.numel();
            let mut grad = vec![S::ZERO; n];
            for e in 0..n {
                let orig = leaf.data()[e];
                leaf.update_data(|d| d[e] = orig + hs);
                let plus = f(leaves).item();
                leaf.update_data(|d| d[e] = orig - hs);
                let minus = f(leaves).item();
                leaf.update_data(|d| d[e] = orig);
                grad[e] = (plus - minus) / two_h;
            }
            let _ = li;
            grad
        })
        .collect()
}

/// Worst relative disagreement between two gradient sets. Each element pair
/// is compared as |a-b| / max(|a|, |b|, floor); pairs where both magnitudes
/// sit below `floor` count as zero error.
pub fn max_rel_error<S: Scalar>(analytic: &[Vec<S>], fd: &[Vec<S>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (ga, gf) in analytic.iter().zip(fd) {
        assert_eq!(ga.len(), gf.len());
        for (&a, &b) in ga.iter().zip(gf) {
            let (a, b) = (a.to_f64(), b.to_f64());
            if a.abs() < floor && b.abs() < floor {
                continue;
            }
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// End-to-end check: analytic vs central differences, returning the worst
/// relative error.
pub fn check<S: Scalar>(
    leaves: &[Tensor<S>],
    f: impl Fn(&[Tensor<S>]) -> Tensor<S>,
    h: f64,
    floor: f64,
) -> f64 {
    let analytic = analytic_grad(leaves, &f);
    let fd = finite_diff_grad(leaves, &f, h);
    max_rel_error(&analytic, &fd, floor)
}

/// Deterministic uniform(-1, 1) leaf for gradient tests.
pub fn random_leaf<S: Scalar>(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<S> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.random_range(-1.0..1.0))).collect();
    Tensor::leaf(shape, data)
}
