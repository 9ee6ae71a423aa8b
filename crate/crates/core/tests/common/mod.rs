//! Shared helpers for the integration tests.
#![allow(dead_code)]

use uniroute::params::{Ctx, ParamId, ParamStore};
use uniroute::rng::Xoshiro256;
use uniroute::tensor::{Tape, Tensor, Var};
use uniroute::Result;

/// Largest relative error between autodiff parameter gradients and central
/// finite differences, `|ad − fd| / max(1, |fd|)`, over the listed
/// `(param, element)` coordinates. `train` selects the forward mode used for
/// both the analytic pass and every perturbed evaluation.
pub fn param_grad_error<F>(store: &ParamStore, coords: &[(ParamId, usize)], step: f64, train: bool, f: F) -> f64
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::with_tape(store, Tape::new(), train, None);
    let loss = f(&mut ctx).unwrap();
    let grads = ctx.backward(loss).unwrap();
    let eval = |s: &ParamStore| -> f64 {
        let mut c = Ctx::with_tape(s, Tape::inference(), train, None);
        let out = f(&mut c).unwrap();
        c.tape.value(out).item()
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &(id, j) in coords {
        let orig = work.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + step;
        let plus = eval(&work);
        work.get_mut(id).data_mut()[j] = orig - step;
        let minus = eval(&work);
        work.get_mut(id).data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let ad = grads.get(id).map_or(0.0, |g| g.data()[j]);
        worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

/// Every coordinate of the given parameters.
pub fn all_coords(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    ids.iter().flat_map(|&id| (0..store.get(id).len()).map(move |j| (id, j))).collect()
}

/// `n` coordinates drawn uniformly over all scalars of the store.
pub fn sample_coords(store: &ParamStore, n: usize, rng: &mut Xoshiro256) -> Vec<(ParamId, usize)> {
    let flat: Vec<(ParamId, usize)> = all_coords(store, &store.ids().collect::<Vec<_>>());
    (0..n).map(|_| flat[rng.below(flat.len())]).collect()
}

/// Weighted sum `Σ w·y` with fixed random weights, turning a tensor output
/// into a scalar with non-degenerate gradients.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut Xoshiro256::seed_from(seed));
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut Xoshiro256::seed_from(seed))
}
