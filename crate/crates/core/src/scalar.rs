//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real number type a model can be trained in: `f32` for training runs,
/// `f64` for verification.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + LowerExp + FromStr + Send + Sync + 'static
{
    /// Significant decimal digits needed for a lossless text round trip.
    const SIG_DIGITS: usize;
    /// Short name used in config files and checkpoints.
    const NAME: &'static str;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("every f64 converts to a float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float always converts to f64")
    }

    /// Decimal text with exactly `SIG_DIGITS` significant digits.
    fn to_decimal(self) -> String {
        format!("{:.*e}", Self::SIG_DIGITS - 1, self)
    }

    fn parse_decimal(s: &str) -> Option<Self> {
        s.trim().parse().ok()
    }
}

impl Scalar for f32 {
    const SIG_DIGITS: usize = 9;
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const SIG_DIGITS: usize = 17;
    const NAME: &'static str = "f64";
}
