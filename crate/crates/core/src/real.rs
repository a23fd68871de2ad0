use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type. `f32` drives runtime paths, `f64` the
/// gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Largest argument for which `exp` stays finite (with a margin).
    fn exp_limit() -> Self {
        Self::max_value().ln() - Self::lit(1.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive targets.
pub fn softplus_inv<T: Real>(y: T) -> T {
    if y > T::lit(20.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

pub fn safe_exp<T: Real>(x: T) -> T {
    x.min(T::exp_limit()).exp()
}
