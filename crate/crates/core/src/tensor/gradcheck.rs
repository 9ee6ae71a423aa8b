//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |autodiff − fd| / max(1, |fd|)` over the checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Checks `d f / d theta` for a scalar-valued `f`.
pub fn grad_check<F>(f: F, theta: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_params(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(theta),
        step,
        None,
    )?;
    Ok(report.max_rel_error)
}

/// Checks gradients of a scalar `f` with respect to several parameter
/// tensors. `coords`, when given, restricts the finite differences to the
/// listed `(tensor index, element index)` pairs.
pub fn grad_check_params<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(&tape, v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - step;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let ad = analytic[i].data()[j];
        worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked: coords.len(),
    })
}
