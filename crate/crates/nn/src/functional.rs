//! Plain (non-recording) numeric kernels shared by the tape ops and by
//! reference implementations elsewhere.

use crate::error::{NnError, Result};
use crate::scalar::Scalar;

/// Numerically stable softmax of one row. `-inf` entries are masked and map
/// to exactly zero; a row with no finite entry is an error.
pub fn softmax<T: Scalar>(row: &[T]) -> Result<Vec<T>> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out).map_err(|_| NnError::FullyMasked { row: 0 })?;
    Ok(out)
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> Result<()> {
    let max = row
        .iter()
        .copied()
        .filter(|x| *x != T::neg_infinity())
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(NnError::FullyMasked { row: 0 });
    }
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = if *x == T::neg_infinity() {
            T::zero()
        } else {
            (*x - max).exp()
        };
        total += *x;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|x| *x *= inv);
    Ok(())
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4);
    let x2 = x * x;
    let inner = c * (x + T::lit(0.044715) * x2 * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    T::lit(0.5) * (T::one() + th)
        + T::lit(0.5) * x * sech2 * c * (T::one() + T::lit(3.0 * 0.044715) * x2)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy with logits in the `max(x,0) - x·y + ln(1 + e^{-|x|})`
/// form.
#[inline]
pub fn bce_with_logits<T: Scalar>(logit: T, target: T) -> T {
    logit.max(T::zero()) - logit * target + (-logit.abs()).exp().ln_1p()
}
