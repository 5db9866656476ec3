use crate::error::{config_err, dim_err, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor, Var};

/// `|a − b| / max(|a|, |b|, 1e-4)`. Below the floor the measure turns into an
/// absolute error, which keeps coordinates whose true gradient is zero from
/// dividing rounding noise by rounding noise.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::lit(1e-4));
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of a scalar function at `x` with central
/// differences `(f(x+eps) − f(x−eps)) / 2eps`, coordinate by coordinate, and
/// returns the worst [`relative_error`].
///
/// `f` receives a fresh tape and the leaf holding `x`; it must return a
/// one-element node.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(eps > T::zero() && eps <= T::lit(1e-2)) {
        return config_err(format!("finite-difference step {eps} outside (0, 1e-2]"));
    }
    let eval = |point: Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        if tape.value(out).numel() != 1 {
            return dim_err("grad_check needs a scalar-valued function");
        }
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let two = T::lit(2.0);
    let mut worst = T::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (two * eps);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}
