//! Tversky loss over in-disk pixels.

use crate::scalar::Scalar;

/// `alpha` weights false positives, `beta` false negatives.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self { alpha: 0.3, beta: 0.7, eps: 1e-6 }
    }
}

fn sums<T: Scalar>(yhat: &[T], y: &[u8], valid: &[bool]) -> (T, T, T) {
    let (mut tp, mut fp, mut fneg) = (T::zero(), T::zero(), T::zero());
    for ((&p, &t), &ok) in yhat.iter().zip(y).zip(valid) {
        if !ok {
            continue;
        }
        if t != 0 {
            tp += p;
            fneg += T::one() - p;
        } else {
            fp += p;
        }
    }
    (tp, fp, fneg)
}

/// `1 - (TP + eps) / (TP + alpha FP + beta FN + eps)` over pixels where
/// `valid` holds; `y` is binary.
pub fn tversky_loss<T: Scalar>(yhat: &[T], y: &[u8], valid: &[bool], p: &TverskyParams) -> T {
    let (tp, fp, fneg) = sums(yhat, y, valid);
    let (a, b, e) = (T::lit(p.alpha), T::lit(p.beta), T::lit(p.eps));
    T::one() - (tp + e) / (tp + a * fp + b * fneg + e)
}

/// Loss and its gradient with respect to every `yhat` entry (zero outside
/// the valid region).
pub fn tversky_grad<T: Scalar>(yhat: &[T], y: &[u8], valid: &[bool], p: &TverskyParams) -> (T, Vec<T>) {
    let (tp, fp, fneg) = sums(yhat, y, valid);
    let (a, b, e) = (T::lit(p.alpha), T::lit(p.beta), T::lit(p.eps));
    let num = tp + e;
    let den = tp + a * fp + b * fneg + e;
    let loss = T::one() - num / den;
    let d2 = den * den;
    let grad = y
        .iter()
        .zip(valid)
        .map(|(&t, &ok)| {
            if !ok {
                return T::zero();
            }
            let (dn, dd) = if t != 0 { (T::one(), T::one() - b) } else { (T::zero(), a) };
            -(dn * den - num * dd) / d2
        })
        .collect();
    (loss, grad)
}
