use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor.
    pub max_rel_err: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error with the denominator floored at `1e-6`, so gradients that
/// vanish are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got shape {:?}", tape.shape(out))));
    }
    Ok((tape, vars, out))
}

fn scalar_at<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs)?;
    Ok(tape.value(out).data()[0])
}

/// Checks the gradient of the scalar function `f` at `inputs` against
/// central differences with the given `step`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, inputs)?;
    let grads = tape.backward(out)?;

    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input is a gradient leaf").clone();
        let mut worst = 0.0f64;
        for idx in 0..inputs[which].numel() {
            let orig = inputs[which].data()[idx];
            probe[which].data_mut()[idx] = orig + step;
            let up = scalar_at(&f, &probe)?;
            probe[which].data_mut()[idx] = orig - step;
            let down = scalar_at(&f, &probe)?;
            probe[which].data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[idx];
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::Numeric {
                    location: format!("input {which}, element {idx}"),
                    detail: format!("analytic {a}, numeric {numeric}"),
                });
            }
            worst = worst.max(relative_error(a, numeric));
        }
        max_rel_err.push(worst);
    }
    let passed = max_rel_err.iter().all(|&e| e < tol);
    Ok(GradCheckReport { max_rel_err, tol, passed })
}
