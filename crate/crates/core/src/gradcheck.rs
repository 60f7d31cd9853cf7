//! Central-difference gradient checking.
//!
//! The autodiff gradient is taken in the storage precision `T`; the
//! numerical reference always evaluates the same map in `f64`, so a 32-bit
//! check measures the 32-bit backward pass rather than 32-bit rounding noise
//! in the finite differences.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A map from one tensor to a scalar, evaluable in any precision.
///
/// Implementations must be deterministic and must build any internal
/// parameters identically for every scalar type (e.g. by drawing `f32`
/// values from a fixed seed and widening them).
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |autodiff - numeric| / max(|numeric|, 1e-8)` over checked entries.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub autodiff: Vec<f64>,
    pub numeric: Vec<f64>,
}

const DENOM_FLOOR: f64 = 1e-8;

fn eval_f64<F: ScalarFn>(f: &F, x: Tensor<f64>) -> Result<(f64, u64)> {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x);
    let out = f.eval(&mut tape, v)?;
    let val = tape.value(out);
    if !val.is_scalar() {
        return Err(Error::shape(format!(
            "gradient check needs a scalar map, got shape {:?}",
            val.shape()
        )));
    }
    Ok((val.data()[0], tape.relu_pattern()))
}

/// Step reductions tried before giving up on finding a smooth stencil.
const MAX_SHRINKS: usize = 12;

fn numeric_entry<F: ScalarFn>(f: &F, x: &Tensor<f64>, i: usize, step: f64, base: (f64, u64)) -> Result<f64> {
    let at = |d: f64| {
        let mut t = x.clone();
        t.data_mut()[i] += d;
        eval_f64(f, t)
    };
    let (f0, p0) = base;
    let mut h = step;
    let mut first = None;
    for _ in 0..MAX_SHRINKS {
        let (fp, pp) = at(h)?;
        let (fm, pm) = at(-h)?;
        let central = (fp - fm) / (2.0 * h);
        first.get_or_insert(central);
        if pp == p0 && pm == p0 {
            return Ok(central);
        }
        for (sign, f1, p1) in [(1.0, fp, pp), (-1.0, fm, pm)] {
            if p1 == p0 {
                let (f2, p2) = at(2.0 * sign * h)?;
                if p2 == p0 {
                    return Ok(sign * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h));
                }
            }
        }
        h /= 4.0;
    }
    Ok(first.expect("at least one stencil evaluated"))
}

/// Autodiff gradient of `f` at `x` in precision `T`.
pub fn autodiff_grad<T: Scalar, F: ScalarFn>(f: &F, x: &Tensor<T>) -> Result<Vec<f64>> {
    let mut tape = Tape::<T>::new();
    let v = tape.input(x.clone());
    let out = f.eval(&mut tape, v)?;
    tape.backward(out)?;
    Ok(tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]))
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` in `f64`.
///
/// When a ReLU input changes sign inside the stencil the map is not smooth
/// there, so the derivative is taken from a second-order one-sided stencil
/// on the side that stays on the same linear piece, or with a smaller step.
pub fn numeric_grad<F: ScalarFn>(f: &F, x: &Tensor<f64>, step: f64, entries: &[usize]) -> Result<Vec<f64>> {
    let base = eval_f64(f, x.clone())?;
    entries.iter().map(|&i| numeric_entry(f, x, i, step, base)).collect()
}

/// Check every entry of `x`.
pub fn grad_check<T: Scalar, F: ScalarFn>(f: &F, x: &Tensor<T>, step: f64) -> Result<GradCheck> {
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_entries(f, x, step, &all)
}

/// Check a subset of entries of `x`.
pub fn grad_check_entries<T: Scalar, F: ScalarFn>(
    f: &F,
    x: &Tensor<T>,
    step: f64,
    entries: &[usize],
) -> Result<GradCheck> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    if let Some(&bad) = entries.iter().find(|&&i| i >= x.len()) {
        return Err(Error::invalid(format!(
            "entry {bad} out of range for {} elements",
            x.len()
        )));
    }
    let full = autodiff_grad(f, x)?;
    let autodiff: Vec<f64> = entries.iter().map(|&i| full[i]).collect();
    let numeric = numeric_grad(f, &x.cast::<f64>(), step, entries)?;
    let mut max_rel_error = 0.0;
    let mut worst_index = entries.first().copied().unwrap_or(0);
    for (j, (&a, &n)) in autodiff.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / n.abs().max(DENOM_FLOOR);
        if rel > max_rel_error || rel.is_nan() {
            max_rel_error = rel;
            worst_index = entries[j];
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        autodiff,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;
    impl ScalarFn for SumSquares {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        }
    }

    struct SumAll;
    impl ScalarFn for SumAll {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            Ok(tape.sum(x))
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::ones(&[2, 3]).unwrap();
        let r = grad_check(&SumSquares, &x, 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
        assert!(r.autodiff.iter().all(|&g| g == 2.0));
    }

    #[test]
    fn identity_sum_has_unit_gradient() {
        // A power-of-two step keeps every perturbed sum exact.
        let x = Tensor::<f32>::ones(&[4]).unwrap();
        let r = grad_check(&SumAll, &x, 1.0 / 1024.0).unwrap();
        assert!(r.autodiff.iter().all(|&g| g == 1.0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::ones(&[1]).unwrap();
        assert!(grad_check(&SumAll, &x, 0.0).is_err());
    }
}
