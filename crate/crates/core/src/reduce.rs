//! Fixed-order pairwise reductions.
//!
//! Every float reduction in the crate goes through these functions so results
//! do not depend on how work is split across threads. The tree is the one a
//! bottom-up adjacent-pair sweep produces: a run of `n` elements splits at the
//! largest power of two strictly below `n` (or at `n/2` when `n` is itself a
//! power of two).

use std::ops::{Add, Div, Mul, Sub};

/// A float lane the pipeline can run in (`f32` or `f64`).
pub trait Lane:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
}

impl Lane for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Lane for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

#[inline]
fn split_point(n: usize) -> usize {
    if n.is_power_of_two() {
        n / 2
    } else {
        n.next_power_of_two() / 2
    }
}

/// Pairwise sum. Empty input sums to zero.
pub fn pairwise_sum<T: Lane>(xs: &[T]) -> T {
    match xs.len() {
        0 => T::ZERO,
        1 => xs[0],
        2 => xs[0] + xs[1],
        3 => (xs[0] + xs[1]) + xs[2],
        4 => (xs[0] + xs[1]) + (xs[2] + xs[3]),
        n => {
            let (lo, hi) = xs.split_at(split_point(n));
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Pairwise dot product: each product rounded in `T`, then summed with the
/// same tree as [`pairwise_sum`].
pub fn pairwise_dot<T: Lane>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    match a.len() {
        0 => T::ZERO,
        1 => a[0] * b[0],
        2 => a[0] * b[0] + a[1] * b[1],
        3 => (a[0] * b[0] + a[1] * b[1]) + a[2] * b[2],
        4 => (a[0] * b[0] + a[1] * b[1]) + (a[2] * b[2] + a[3] * b[3]),
        n => {
            let k = split_point(n);
            pairwise_dot(&a[..k], &b[..k]) + pairwise_dot(&a[k..], &b[k..])
        }
    }
}
