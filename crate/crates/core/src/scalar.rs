//! Scalar abstraction shared by the geometry and splatting math.
//!
//! Everything numeric that benefits from running in both precisions (pose
//! algebra, projection, the Gaussian forward/backward pass, Adam) is written
//! against [`Real`]. Voxel storage and image buffers stay `f32`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    RealField + Copy + Default + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Machine epsilon.
    const EPSILON: Self;

    /// Converts an `f64` literal into this scalar type.
    #[inline(always)]
    fn lit(v: f64) -> Self {
        // Both implementors accept every finite f64 (f32 rounds).
        Self::from_f64(v).unwrap_or_else(Self::zero)
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline(always)]
    fn from_usize_lossy(v: usize) -> Self {
        Self::lit(v as f64)
    }
}

impl Real for f32 {
    const EPSILON: Self = f32::EPSILON;
}

impl Real for f64 {
    const EPSILON: Self = f64::EPSILON;
}

/// Logistic sigmoid.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Inverse of [`sigmoid`] for `p` in (0, 1).
#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_inverts_sigmoid() {
        for &x in &[-6.0f64, -1.0, 0.0, 0.3, 4.0] {
            assert!((logit(sigmoid(x)) - x).abs() < 1e-9);
        }
        assert_eq!(logit(0.5f32), 0.0);
    }
}
