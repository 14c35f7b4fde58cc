//! Central finite-difference gradient checking.
//!
//! This deliberately knows nothing about the tape's backward pass: it only
//! re-evaluates a scalar-valued forward function under elementwise
//! perturbations, so it can serve as an independent oracle for it.

use crate::tensor::Tensor;

/// Default perturbation step: 2⁻¹⁰ ≈ 1e-3, chosen binary-clean so that
/// `x ± h` is exact for the dyadic fixtures the op tests use.
pub const DEFAULT_H: f32 = 0.0009765625;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
///
/// The divisor uses the actually-achieved perturbation `x⁺ − x⁻` rather than
/// `2h`, which removes the representation error of `x ± h` in f32.
pub fn finite_diff_grad<F>(mut f: F, inputs: &[Tensor], which: usize, h: f32) -> Vec<f32>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let numel = inputs[which].numel();
    let mut grad = vec![0.0f32; numel];
    for i in 0..numel {
        let orig = inputs[which].data()[i];
        let xp = orig + h;
        let xm = orig - h;

        work[which].data_mut()[i] = xp;
        let fp = f(&work);
        work[which].data_mut()[i] = xm;
        let fm = f(&work);
        work[which].data_mut()[i] = orig;

        grad[i] = ((fp - fm) / ((xp - xm) as f64)) as f32;
    }
    grad
}

/// Relative error between analytic and numeric gradients, as vectors:
/// max |a − n| normalized by the largest gradient magnitude (or `floor`
/// when the whole gradient is tiny). Elementwise ratios on near-zero
/// components would only measure the FD noise floor.
pub fn max_rel_err(analytic: &[f32], numeric: &[f32], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst_abs = 0.0f64;
    let mut scale = floor;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a as f64, n as f64);
        worst_abs = worst_abs.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    worst_abs / scale
}

/// Deterministic ±1 weights used to reduce a tensor output to a scalar loss.
pub fn probe_weights(numel: usize, seed: u64) -> Vec<f32> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..numel)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            if state & 1 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Weighted sum of a tensor with the probe weights, accumulated in f64.
pub fn probe_loss(t: &Tensor, weights: &[f32]) -> f64 {
    t.data().iter().zip(weights).map(|(&v, &w)| v as f64 * w as f64).sum()
}
