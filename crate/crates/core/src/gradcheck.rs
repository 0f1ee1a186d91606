//! Central finite-difference checks against tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error with a floor so that two vanishing gradients compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares tape gradients of `sum(build(inputs) ⊙ R)` for a fixed random
/// projection `R` against central differences with step `h`. Returns the
/// largest relative error across every input element.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = |g: &mut Graph<f64>, vars: &[Var], proj: &Option<Tensor<f64>>| -> Result<(Var, Tensor<f64>)> {
        let out = build(g, vars)?;
        let proj = match proj {
            Some(p) => p.clone(),
            None => Tensor::from_fn(g.shape(out), |_| 0.0),
        };
        let pv = g.constant(proj.clone());
        let prod = g.mul(out, pv)?;
        Ok((g.sum(prod), proj))
    };

    // fix the projection from the output shape
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let (_, zero) = loss(&mut g, &vars, &None)?;
    let proj = Some(Tensor::from_fn(zero.shape(), |_| rng.random_range(-1.0..1.0)));

    g.clear();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let (l, _) = loss(&mut g, &vars, &proj)?;
    g.backward(l)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let (l, _) = loss(&mut g, &vars, &proj)?;
        Ok(g.value(l).data()[0])
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}

/// Random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}
