//! Radial kernels for the temporal and spatial random parts.

use serde::{Deserialize, Serialize};

use crate::scalar::{dist2d, Scalar};

/// Smoothness of a Matérn covariance with half-integer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaternSmoothness {
    Half,
    ThreeHalves,
    FiveHalves,
}

fn matern<T: Scalar>(r: T, range: f64, nu: MaternSmoothness) -> T {
    let x = r / T::lit(range);
    match nu {
        MaternSmoothness::Half => (-x).exp(),
        MaternSmoothness::ThreeHalves => {
            let a = T::lit(3f64.sqrt()) * x;
            (T::one() + a) * (-a).exp()
        }
        MaternSmoothness::FiveHalves => {
            let a = T::lit(5f64.sqrt()) * x;
            (T::one() + a + a * a / T::lit(3.0)) * (-a).exp()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum TemporalKernel {
    /// `|t - κ|³`, the radial basis matching a linear fixed part.
    #[default]
    Cubic,
    Matern {
        range: f64,
        smoothness: MaternSmoothness,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum SpatialKernel {
    /// Thin-plate `r² log r`.
    #[default]
    ThinPlate,
    Matern {
        range: f64,
        smoothness: MaternSmoothness,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BasisConfig {
    pub temporal: TemporalKernel,
    pub spatial: SpatialKernel,
}

impl TemporalKernel {
    #[inline]
    pub fn eval<T: Scalar>(&self, t: T, knot: T) -> T {
        let r = (t - knot).abs();
        match *self {
            TemporalKernel::Cubic => r * r * r,
            TemporalKernel::Matern { range, smoothness } => matern(r, range, smoothness),
        }
    }
}

impl SpatialKernel {
    #[inline]
    pub fn eval<T: Scalar>(&self, s: &[T; 2], knot: &[T; 2]) -> T {
        let r = dist2d(s, knot);
        match *self {
            SpatialKernel::ThinPlate => thin_plate(r),
            SpatialKernel::Matern { range, smoothness } => matern(r, range, smoothness),
        }
    }
}

#[inline]
fn thin_plate<T: Scalar>(r: T) -> T {
    if r > T::zero() {
        r * r * r.ln()
    } else {
        T::zero()
    }
}

/// Cubic radial kernel `|t - knot|³`.
#[inline]
pub fn temporal_kernel<T: Scalar>(t: T, knot: T) -> T {
    TemporalKernel::Cubic.eval(t, knot)
}

/// Thin-plate radial kernel `r² log r`, `r = ‖s - knot‖`, zero at `r = 0`.
#[inline]
pub fn spatial_kernel<T: Scalar>(s: &[T; 2], knot: &[T; 2]) -> T {
    SpatialKernel::ThinPlate.eval(s, knot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn temporal_values() {
        assert_eq!(temporal_kernel(3.0, 3.0), 0.0);
        assert_eq!(temporal_kernel(1.0, 3.0), 8.0);
        assert_eq!(temporal_kernel(5.0f32, 3.0), 8.0);
    }

    #[test]
    fn temporal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = rng.random_range(-10.0..10.0);
            let b = rng.random_range(-10.0..10.0);
            assert_eq!(temporal_kernel(a, b), temporal_kernel(b, a));
        }
    }

    #[test]
    fn spatial_values() {
        assert_eq!(spatial_kernel(&[0.3, 0.4], &[0.3, 0.4]), 0.0);
        assert_eq!(spatial_kernel(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        let e = std::f64::consts::E;
        assert!((spatial_kernel(&[e, 0.0], &[0.0, 0.0]) - e * e).abs() < 1e-12);
    }

    #[test]
    fn spatial_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let k = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rot = |p: [f64; 2]| [th.cos() * p[0] - th.sin() * p[1], th.sin() * p[0] + th.cos() * p[1]];
            let a = spatial_kernel(&s, &k);
            let b = spatial_kernel(&rot(s), &rot(k));
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn matern_is_one_at_zero_and_decays() {
        let k = SpatialKernel::Matern {
            range: 0.5,
            smoothness: MaternSmoothness::ThreeHalves,
        };
        assert_eq!(k.eval(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert!(k.eval(&[1.0, 0.0], &[0.0, 0.0]) < k.eval(&[0.5, 0.0], &[0.0, 0.0]));
    }
}
