//! Finite-difference gradient verification.
//!
//! The checker is the independent oracle for every backward rule in the
//! crate: it compares analytic gradients against central differences
//! computed from forward passes alone.

use super::{Bindings, ParamSet, Result, Tape, Tensor, TensorError, Var};

/// Relative error between an analytic and a numeric derivative.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let y = f(&mut tape, v)?;
    let out = tape.value(y);
    if out.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: out.shape().to_vec(),
        });
    }
    Ok(out.item())
}

/// Check the gradient of a scalar-valued function `f` with respect to `x`.
///
/// Returns the maximum over coordinates of
/// `|analytic - central_difference| / max(|analytic|, |numeric|, 1e-8)`
/// where the central difference is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_steps(f, x, &[step], f64::INFINITY)
}

/// Kink-aware variant of [`grad_check`]; see
/// [`grad_check_params_refined`] for the rationale.
pub fn grad_check_refined<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_steps(f, x, &[step, step / 10.0, step / 50.0], tol)
}

fn grad_check_steps<F>(f: F, x: &Tensor, steps: &[f64], tol: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(steps.iter().all(|&s| s > 0.0), "steps must be positive");
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let y = f(&mut tape, v)?;
    if tape.value(y).numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.value(y).shape().to_vec(),
        });
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut work = x.clone();
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let a = analytic.data()[i];
        let mut coord_err = f64::INFINITY;
        for &h in steps {
            let orig = work.data()[i];
            work.data_mut()[i] = orig + h;
            let plus = eval_scalar(&f, &work)?;
            work.data_mut()[i] = orig - h;
            let minus = eval_scalar(&f, &work)?;
            work.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            coord_err = coord_err.min(rel_err(a, numeric));
            if coord_err <= tol {
                break;
            }
        }
        max_err = max_err.max(coord_err);
    }
    Ok(max_err)
}

/// Check gradients of a scalar function of a whole parameter set, one
/// coordinate of every trainable parameter at a time.
pub fn grad_check_params<F>(params: &ParamSet, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    grad_check_params_steps(params, &[step], f64::INFINITY, f)
}

/// Kink-aware parameter check for functions with ReLU / max-pool pieces.
///
/// A central difference at step `h` is only a valid derivative estimate
/// when the function is smooth across `[x-h, x+h]`; a kink inside that
/// interval corrupts the estimate even though the analytic gradient is
/// exact. Coordinates whose error at `step` exceeds `tol` are therefore
/// re-measured at `step/10` and `step/50`, and pass only if some refined
/// estimate converges to the analytic value — a genuinely wrong backward
/// rule disagrees at every step size, so refinement never masks one.
pub fn grad_check_params_refined<F>(params: &ParamSet, step: f64, tol: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    grad_check_params_steps(params, &[step, step / 10.0, step / 50.0], tol, f)
}

fn grad_check_params_steps<F>(params: &ParamSet, steps: &[f64], tol: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    assert!(steps.iter().all(|&s| s > 0.0), "steps must be positive");
    let mut tape = Tape::new();
    let bindings = tape.bind(params);
    let y = f(&mut tape, &bindings)?;
    if tape.value(y).numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.value(y).shape().to_vec(),
        });
    }
    tape.backward(y)?;
    let analytic: Vec<Option<Tensor>> = bindings
        .vars
        .iter()
        .map(|&v| tape.grad(v))
        .collect();

    let mut work = params.clone();
    let mut max_err = 0.0f64;
    for p in 0..work.len() {
        if !work.get_index(p).trainable {
            continue;
        }
        let numel = work.get_index(p).value.numel();
        for i in 0..numel {
            let a = analytic[p].as_ref().map_or(0.0, |t| t.data()[i]);
            let mut coord_err = f64::INFINITY;
            for &h in steps {
                let orig = work.get_index(p).value.data()[i];
                work.get_index_mut(p).value.data_mut()[i] = orig + h;
                let plus = eval_params(&f, &work)?;
                work.get_index_mut(p).value.data_mut()[i] = orig - h;
                let minus = eval_params(&f, &work)?;
                work.get_index_mut(p).value.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                coord_err = coord_err.min(rel_err(a, numeric));
                if coord_err <= tol {
                    break;
                }
            }
            max_err = max_err.max(coord_err);
        }
    }
    Ok(max_err)
}

fn eval_params<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = tape.bind(params);
    let y = f(&mut tape, &bindings)?;
    Ok(tape.value(y).item())
}

#[cfg(test)]
mod tests {
    use super::super::{GradSink, TapeOp, Tensor, Values, Var};
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_checks_exactly() {
        // power-of-two step keeps every operation exact in binary
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, -3.0]).unwrap();
        let err = grad_check(|t, v| t.sum_all(v), &x, 0.0009765625).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_checks_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(&[8], data).unwrap();
        let err = grad_check(
            |t, v| {
                let s = t.square(v)?;
                t.sum_all(s)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    /// Square with a backward rule deliberately scaled by 2.
    struct BuggedSquare {
        x: Var,
    }

    impl TapeOp for BuggedSquare {
        fn name(&self) -> &'static str {
            "bugged_square"
        }
        fn backward(&self, vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
            let xv = vals.val(self.x).data();
            if let Some(dx) = sink.entry(self.x) {
                for i in 0..g.len() {
                    dx[i] += g[i] * 4.0 * xv[i]; // correct rule is 2*x
                }
            }
        }
    }

    #[test]
    fn planted_backward_bug_is_detected() {
        let x = Tensor::from_vec(&[4], vec![0.7, -1.2, 0.4, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let val = Tensor::from_vec(
                    t.value(v).shape(),
                    t.value(v).data().iter().map(|a| a * a).collect(),
                )
                .unwrap();
                let req = t.any_requires(&[v]);
                let sq = t.push_op("bugged_square", val, Box::new(BuggedSquare { x: v }), req)?;
                t.sum_all(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        // analytic is twice the true derivative; the relative error is ~0.5
        // under the max-denominator convention used here
        assert!(err > 0.3, "bug not detected, err = {err}");
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(grad_check(|t, v| t.square(v), &x, 1e-3).is_err());
    }
}
