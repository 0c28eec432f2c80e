//! Scalar abstraction: all numerical code is generic over `Real`, with
//! `f32` used for training/inference speed and `f64` for gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Real:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + LinalgScalar
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough constructor for literals in generic code.
    fn real(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 literal")
    }

    fn to_f64_(self) -> f64 {
        self.to_f64().expect("real fits f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
