//! Generalized Kullback-Leibler divergence between nonnegative magnitude
//! spectra.
//!
//! Both arguments are shifted by the floor `eps` before comparison:
//! `sum (a+eps) ln((a+eps)/(b+eps)) - a + b`. The shift keeps `ln` finite at
//! zero magnitudes and leaves the divergence nonnegative, with equality
//! exactly when `a == b`.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[inline]
pub(crate) fn kl_term<T: Real>(a: T, b: T, eps: T) -> T {
    let (ap, bp) = (a + eps, b + eps);
    ap * (ap / bp).ln() - a + b
}

/// Derivative of [`kl_term`] with respect to `a`.
#[inline]
pub(crate) fn kl_term_grad<T: Real>(a: T, b: T, eps: T) -> T {
    ((a + eps) / (b + eps)).ln()
}

/// KL divergence summed over all elements of two equally shaped arrays.
pub fn kl_loss<T: Real>(a: &[T], b: &[T], eps: T) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} values", a.len()), format!("{}", b.len())));
    }
    if a.iter().chain(b).any(|&v| v < T::zero()) {
        return Err(Error::NegativeInput("kl_loss"));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| kl_term(x, y, eps)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_inputs_give_zero() {
        assert_eq!(kl_loss(&[0.0, 1.5, 3.0], &[0.0, 1.5, 3.0], 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_values() {
        let v = kl_loss(&[2.0], &[1.0], 1e-14).unwrap();
        assert!((v - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-12, "{v}");
        let v: f64 = kl_loss(&[0.0], &[1.0], 1e-14).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn negative_input_rejected() {
        assert!(matches!(kl_loss(&[-1.0], &[1.0], 1e-8), Err(Error::NegativeInput(_))));
        assert!(kl_loss(&[1.0, 2.0], &[1.0], 1e-8).is_err());
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        for (a, b) in [(0.3f64, 1.2f64), (2.0, 0.1), (1e-3, 5.0)] {
            let h = 1e-7;
            let fd = (kl_term(a + h, b, 1e-8) - kl_term(a - h, b, 1e-8)) / (2.0 * h);
            assert!((fd - kl_term_grad(a, b, 1e-8)).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn nonnegative(pairs in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..50)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(kl_loss(&a, &b, 1e-8).unwrap() >= 0.0);
        }

        #[test]
        fn zero_only_at_equality(a in proptest::collection::vec(0.01f64..10.0, 1..20), bump in 1e-3f64..1.0) {
            let mut b = a.clone();
            b[0] += bump;
            prop_assert!(kl_loss(&a, &b, 0.0).unwrap() > 0.0);
            prop_assert_eq!(kl_loss(&a, &a, 0.0).unwrap(), 0.0);
        }
    }
}
