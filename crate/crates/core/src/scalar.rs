//! Real scalar abstraction shared by every differentiable path.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the function approximators, losses and exact
/// solvers are computed in.
///
/// Implemented for `f32` and `f64`. Rewards are stored by environments as
/// `f64` and cast on entry.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` constants.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `log(Σ exp(x_i))` over the finite-or-`-inf` inputs. Returns `-inf` on empty
/// input or when every entry is `-inf`.
pub fn log_sum_exp<S: Scalar>(values: impl IntoIterator<Item = S> + Clone) -> S {
    let max = values
        .clone()
        .into_iter()
        .fold(S::neg_infinity(), |m, v| if v > m { v } else { m });
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = values.into_iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
