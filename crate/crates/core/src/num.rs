//! Scalar abstraction shared by the numeric modules.
//!
//! Everything that does arithmetic on real values (entropies, importances,
//! distances, cluster centers, boosting weights, metrics) is written against
//! [`Scalar`] so the same code runs in `f32` or `f64`. The pipeline and the
//! on-disk formats are pinned to `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; exact for values representable in `Self`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar always converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Kahan-compensated sum in a fixed iteration order.
pub fn compensated_sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut c = T::zero();
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Index of the maximum; ties resolve to the lowest index. `None` when empty.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Shannon entropy in bits of a (not necessarily normalized) histogram.
pub fn entropy_bits<T: Scalar>(counts: &[T]) -> T {
    let total: T = counts.iter().copied().sum();
    if total <= T::zero() {
        return T::zero();
    }
    let mut h = T::zero();
    for &c in counts {
        if c > T::zero() {
            let p = c / total;
            h = h - p * p.log2();
        }
    }
    h
}
