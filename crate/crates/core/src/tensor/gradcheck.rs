//! Central finite-difference gradient checks in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`,
    /// where `floor` is 1e-3 of the largest numeric gradient magnitude so
    /// that entries with vanishing gradient are judged on the problem scale.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub checked: usize,
}

/// Tensor with entries uniform in `[-1, 1)`, reproducible from `seed`.
pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape, data).expect("valid shape")
}

/// Checks `op` at random inputs of the given shapes. Non-scalar outputs are
/// reduced with a fixed random projection so every output element matters.
pub fn grad_check<F>(op: F, input_shapes: &[Vec<usize>], tolerance: f64, seed: u64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let inputs: Vec<Tensor<f64>> = input_shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random_tensor(s, seed.wrapping_mul(31).wrapping_add(i as u64)))
        .collect();
    grad_check_at(op, &inputs, tolerance, seed)
}

/// As [`grad_check`], at caller-chosen input values.
pub fn grad_check_at<F>(op: F, inputs: &[Tensor<f64>], tolerance: f64, seed: u64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let probe = op(inputs).expect("op must accept its check inputs");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let proj: Vec<f64> = (0..probe.numel()).map(|_| rng.gen_range(0.5..1.5)).collect();
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        let out = op(xs).expect("op failed during check");
        out.data().iter().zip(&proj).map(|(a, b)| a * b).sum()
    };

    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.requiring_grad()).collect();
    let out = op(&leaves).expect("op failed during check");
    let weights = Tensor::from_vec(out.shape(), proj.clone()).expect("shape");
    let loss = super::sum(&super::mul(&out, &weights).expect("shape"));
    loss.backward().expect("scalar");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, leaf) in leaves.iter().enumerate() {
        let g = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for i in 0..leaf.numel() {
            let shifted = |delta: f64| {
                let xs: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j != k {
                            return t.clone();
                        }
                        let mut d = t.to_vec();
                        d[i] += delta;
                        Tensor::from_vec(t.shape(), d).expect("shape")
                    })
                    .collect();
                objective(&xs)
            };
            numeric.push((shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP));
            analytic.push(g[i]);
        }
    }

    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let diff = (a - n).abs();
        max_abs = max_abs.max(diff);
        max_rel = max_rel.max(diff / a.abs().max(n.abs()).max(floor));
    }
    GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        tolerance,
        passed: max_rel < tolerance,
        checked: analytic.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::relu;

    #[test]
    fn relu_away_from_kink_is_tight() {
        // Keep every entry at least 0.1 away from 0.
        let x = random_tensor::<f64>(&[3, 4], 1);
        let d = x.data().iter().map(|v| if v.abs() < 0.1 { v + 0.2 } else { *v }).collect();
        let x = Tensor::from_vec(&[3, 4], d).unwrap();
        let r = grad_check_at(|t| Ok(relu(&t[0])), &[x], 1e-9, 2);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // An op whose backward is deliberately off by a factor of two.
        let bad = |t: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let x = &t[0];
            let data = x.data().iter().map(|v| v * v).collect();
            let xc = x.clone();
            Ok(Tensor::from_op(
                "bad_square",
                x.shape().to_vec(),
                data,
                vec![x.clone()],
                Box::new(move |g| vec![Some(g.iter().zip(xc.data()).map(|(g, x)| g * x).collect())]),
            ))
        };
        let r = grad_check(bad, &[vec![5]], 1e-4, 3);
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.4);
    }
}
