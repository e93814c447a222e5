//! Scalar nonlinearities, small reductions and Gaussian draws.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;

pub type Matrix<T> = Array2<T>;
pub type Vector<T> = Array1<T>;

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)`; used to keep standard deviations positive.
pub fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `s > 0`.
pub fn softplus_inv<T: Real>(s: T) -> T {
    // ln(e^s - 1) = s + ln(1 - e^{-s})
    s + (-(-s).exp()).ln_1p()
}

pub fn relu<T: Real>(z: T) -> T {
    z.max(T::zero())
}

/// Indicator of `z > 0`: a unit sitting exactly at zero counts as inactive.
pub fn relu_grad<T: Real>(z: T) -> T {
    if z > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Max-shifted softmax.
pub fn softmax<T: Real>(v: ArrayView1<'_, T>) -> Result<Vector<T>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    let mut out = v.to_owned();
    softmax_in_place(out.as_slice_mut().expect("owned vector is contiguous"));
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Row-wise softmax of a `(n, c)` logit matrix.
pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        match row.as_slice_mut() {
            Some(s) => softmax_in_place(s),
            None => {
                let mut tmp: Vec<T> = row.to_vec();
                softmax_in_place(&mut tmp);
                row.assign(&ArrayView1::from(&tmp[..]));
            }
        }
    }
    out
}

/// Draw from `N(mean, std^2)`. `std == 0` returns `mean` exactly.
pub fn gauss_sample<T: Real>(rng: &mut Rng, mean: T, std: T) -> Result<T> {
    if !(std >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "standard deviation must be non-negative, got {std}"
        )));
    }
    if std == T::zero() {
        return Ok(mean);
    }
    Ok(mean + std * T::of(rng.normal()))
}

pub fn dot<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim("dot", a.len(), b.len()));
    }
    Ok(a.dot(&b))
}

pub fn matvec<T: Real>(m: ArrayView2<'_, T>, v: ArrayView1<'_, T>) -> Result<Vector<T>> {
    if m.ncols() != v.len() {
        return Err(Error::dim("matvec", m.ncols(), v.len()));
    }
    Ok(m.dot(&v))
}

/// Mean computed relative to the first element, so identical inputs return
/// that element bit-for-bit.
pub fn shifted_mean<T: Real>(xs: impl IntoIterator<Item = T>) -> Option<T> {
    let mut iter = xs.into_iter();
    let first = iter.next()?;
    let mut n = 1usize;
    let mut acc = T::zero();
    for x in iter {
        acc += x - first;
        n += 1;
    }
    Some(first + acc / T::of(n as f64))
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" rule). `sorted` must be ascending and non-empty.
pub fn quantile_sorted<T: Real>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::of(pos - lo as f64);
    if lo == hi || frac == T::zero() {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn quantile<T: Real>(xs: &[T], q: f64) -> T {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    quantile_sorted(&v, q)
}

/// Median; averages the two central values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// `ln(mean(exp(xs)))` without overflow.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

pub(crate) fn all_finite<T: Real>(xs: impl IntoIterator<Item = T>) -> bool {
    xs.into_iter().all(|x| x.is_finite())
}
