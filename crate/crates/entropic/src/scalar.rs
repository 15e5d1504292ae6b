//! Floating-point abstraction used by every numeric routine in the crate.

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar the solvers are generic over.
///
/// `Float` supplies arithmetic, `exp`/`ln` and comparisons; `FromPrimitive`
/// converts literals and grid indices; the rest makes values printable and
/// shareable across worker threads.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the working scalar type.
///
/// Panics only if the target type cannot represent finite `f64` values at
/// all, which none of the supported types do.
pub(crate) fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("finite constant must convert")
}
