//! Scalar abstractions shared by the detection math.
//!
//! Box geometry only needs field arithmetic and an ordering, so it runs on
//! exact rationals as well as floats. Anything involving logarithms or
//! exponentials requires [`Real`].

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num};

/// Ordered field element: enough for areas, overlaps and affine maps.
pub trait Scalar: Num + PartialOrd + Copy + Debug {
    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// Finite check; exact types are always finite.
    fn is_finite_value(self) -> bool;
}

impl Scalar for f32 {
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Ratio<i64> {
    fn is_finite_value(self) -> bool {
        true
    }
}

impl Scalar for Ratio<i128> {
    fn is_finite_value(self) -> bool {
        true
    }
}

/// Floating point scalar used for probabilities and losses.
pub trait Real: Scalar + Float + FromPrimitive {
    /// Tolerance used when checking that a probability vector sums to one.
    const PROB_TOLERANCE: Self;
    /// Clamp applied to probabilities before taking logarithms.
    const BCE_EPSILON: Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

impl Real for f64 {
    const PROB_TOLERANCE: Self = 1e-9;
    const BCE_EPSILON: Self = 1e-7;
}

impl Real for f32 {
    // 1e-9 is below f32 resolution near 1.0.
    const PROB_TOLERANCE: Self = 1e-5;
    const BCE_EPSILON: Self = 1e-7;
}
