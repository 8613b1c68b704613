//! Scalar abstraction: all model arithmetic is generic over a floating-point
//! type, with `f64` as the default used by the CLI and file formats.

use std::fmt::{Debug, Display};

/// Floating-point scalar for all model quantities (times, masses, rates).
///
/// `f32` works for small experiments with a loosened tolerance; `f64` is the
/// default everywhere.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` literals (exact for `f64` itself).
    fn real(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Real")
    }

    /// Lossy conversion to `f64` for serialization and reporting.
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Default geometric comparison tolerance, `1e-9`.
///
/// Every boundary classification (active/resetting arcs, event detection,
/// residual gates) shares one tolerance so phase logic stays consistent.
/// Callers using `f32` should pass a larger value explicitly.
pub fn default_eta<T: Real>() -> T {
    T::real(1e-9)
}

/// Total order on finite floats, for sorting event times deterministically.
///
/// Panics on NaN; instance validation rejects non-finite input so NaN here
/// always indicates an internal bug.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct TotalF<T>(pub T);

impl<T: Real> Eq for TotalF<T> {}

impl<T: Real> PartialOrd for TotalF<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for TotalF<T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .partial_cmp(&other.0)
            .expect("event times must not be NaN")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_order_sorts_times() {
        let mut v = vec![TotalF(3.0), TotalF(1.0), TotalF(2.0)];
        v.sort();
        assert_eq!(v, vec![TotalF(1.0), TotalF(2.0), TotalF(3.0)]);
    }

    #[test]
    fn real_roundtrip() {
        let x: f32 = Real::real(0.5);
        assert_eq!(x, 0.5f32);
        assert_eq!(0.25f64.to_f64_lossy(), 0.25);
    }
}
