//! Named-parameter traversal shared by every learnable block.
//!
//! Gradients live in a value of the same type as the parameters, so
//! `zeroed_like` doubles as a gradient buffer and optimizers can walk both in
//! lockstep.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{finite_diff_grad, Tensor};

pub trait Parameterized<T: Real>: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn zero(&mut self) {
        self.visit_mut(&mut |_, t| t.fill(T::zero()));
    }

    fn zeroed_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit(&mut |n, _| v.push(n.to_string()));
        v
    }

    fn get(&self, name: &str) -> Option<Tensor<T>> {
        let mut out = None;
        self.visit(&mut |n, t| {
            if n == name {
                out = Some(t.clone());
            }
        });
        out
    }

    fn set(&mut self, name: &str, value: &Tensor<T>) -> Result<()> {
        let mut res = Err(Error::Parameter(format!("no parameter named {name}")));
        self.visit_mut(&mut |n, t| {
            if n == name {
                res = if t.shape() == value.shape() {
                    t.data_mut().copy_from_slice(value.data());
                    Ok(())
                } else {
                    Err(Error::Dimension(format!("{name}: shape {:?} vs {:?}", t.shape(), value.shape())))
                };
            }
        });
        res
    }

    /// Accumulate `other` into `self`, parameter by parameter.
    fn accumulate(&mut self, other: &Self) {
        let mut src = Vec::new();
        other.visit(&mut |_, t| src.push(t.clone()));
        let mut it = src.into_iter();
        self.visit_mut(&mut |_, t| {
            let s = it.next().expect("same structure");
            t.add_assign(&s).expect("same shapes");
        });
    }
}

/// Visits `child` with every name prefixed by `prefix.`.
pub fn visit_child<T: Real, P: Parameterized<T>>(
    prefix: &str,
    child: &P,
    f: &mut dyn FnMut(&str, &Tensor<T>),
) {
    child.visit(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

pub fn visit_child_mut<T: Real, P: Parameterized<T>>(
    prefix: &str,
    child: &mut P,
    f: &mut dyn FnMut(&str, &mut Tensor<T>),
) {
    child.visit_mut(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

/// Finite-difference gradient of `loss` with respect to one named parameter.
pub fn param_finite_diff<P, F>(model: &P, name: &str, loss: F, h: f64) -> Result<Tensor<f64>>
where
    P: Parameterized<f64>,
    F: Fn(&P) -> f64,
{
    let start = model
        .get(name)
        .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))?;
    let mut probe = model.clone();
    finite_diff_grad(
        |v| {
            probe.set(name, v).expect("same shape");
            loss(&probe)
        },
        &start,
        h,
    )
}

/// Relative error `|a - b| / max(|a|, |b|)` in the 2-norm. Below a norm of
/// `1e-6` (above the roundoff noise of a central difference with `h = 1e-6`
/// on a loss built from hundreds of terms) the absolute difference is
/// returned instead, so two vanishing gradients compare equal.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}
