use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar used for all grid arithmetic: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn cast<T: NumCast>(x: T) -> Self {
        NumCast::from(x).expect("numeric cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
