//! Dense neural-network substrate: matrices, PReLU MLPs with analytic
//! backpropagation, optimizers and finite-difference gradient checks.

pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{axpy, cosine, dot, gemm, norm, DenseMatrix};
pub use mlp::{GradientBuffer, Layer, MlpParams, Tape};
pub use optim::{Algorithm, OptimizerState};
pub use params::ParamSet;

use crate::error::{Error, Result};

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Numeric("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax of non-finite logits".into()));
    }
    let mut out = logits.to_vec();
    softmax_inplace(&mut out);
    Ok(out)
}

/// In-place softmax on a non-empty, finite slice.
pub fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_singleton() {
        assert_eq!(softmax(&[-42.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_large_gap_no_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        // shifted logits [0, -1000]: exact values 1/(1+e^-1000) and e^-1000/(1+e^-1000)
        let tail = (-1000.0f64).exp();
        assert_eq!(p[0], 1.0 / (1.0 + tail));
        assert_eq!(p[1], tail / (1.0 + tail));
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softplus_asymptotes() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-1000.0) < 1e-300);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((sigmoid(-1000.0)).abs() < 1e-300);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            rot in 0usize..12,
        ) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            let k = rot % logits.len();
            let mut rotated = logits.clone();
            rotated.rotate_left(k);
            let mut expected = p.clone();
            expected.rotate_left(k);
            let q = softmax(&rotated).unwrap();
            for (a, b) in q.iter().zip(&expected) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
