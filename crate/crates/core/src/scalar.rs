//! Floating-point abstraction shared by every numeric routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable by the fitting code: `f32` or `f64`.
///
/// Only `RealField` supplies the transcendental methods (`exp`, `ln`, ...);
/// num-traits contributes the lossy conversions used for literals and output.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + std::fmt::Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable")
    }

    fn neg_inf() -> Self;
    fn inf() -> Self;
    fn machine_eps() -> Self;
}

impl Scalar for f64 {
    fn neg_inf() -> Self {
        f64::NEG_INFINITY
    }
    fn inf() -> Self {
        f64::INFINITY
    }
    fn machine_eps() -> Self {
        f64::EPSILON
    }
}

impl Scalar for f32 {
    fn neg_inf() -> Self {
        f32::NEG_INFINITY
    }
    fn inf() -> Self {
        f32::INFINITY
    }
    fn machine_eps() -> Self {
        f32::EPSILON
    }
}

/// Numerically stable `ln(sum(exp(v)))`.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(T::neg_inf(), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum = values
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

/// Logistic function `1 / (1 + exp(-x))`, evaluated without overflow.
#[inline]
pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(logistic(x))`.
#[inline]
pub fn log_logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_saturates_without_nan() {
        assert_eq!(logistic(800.0_f64), 1.0);
        assert_eq!(logistic(-800.0_f64), 0.0);
        assert!((log_logistic(-800.0_f64) + 800.0).abs() < 1e-12);
        assert!(log_logistic(800.0_f64).abs() < 1e-300);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let v = [-1.0_f64, 0.5, 2.0];
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-14);
        assert_eq!(log_sum_exp::<f64>(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
    }

    #[test]
    fn f32_path_agrees() {
        assert!((logistic(1.5_f32) as f64 - logistic(1.5_f64)).abs() < 1e-6);
    }
}
