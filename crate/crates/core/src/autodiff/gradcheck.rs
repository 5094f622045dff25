use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient magnitude below which the comparison becomes absolute: central
/// differences of an O(1) loss carry roundoff noise near `1e-16 / eps`, so
/// relative errors of smaller gradients measure noise rather than the backward.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input index and coordinate of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares backward gradients of every input against central differences.
/// At most `max_coords` coordinates per input are probed, chosen at random
/// from `seed` when the input is larger. The relative error uses the
/// denominator `max(|a|, |b|, GRAD_FLOOR)`.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (t, &v) in vars.iter().enumerate() {
        let n = inputs[t].numel();
        let coords: Vec<usize> =
            if n <= max_coords { (0..n).collect() } else { sample(&mut rng, n, max_coords).into_vec() };
        for k in coords {
            let a = g.grad(v).map_or(0.0, |gr| gr.data()[k]);
            let orig = probe[t].data()[k];
            probe[t].data_mut()[k] = orig + eps;
            let fp = eval(&f, &probe)?;
            probe[t].data_mut()[k] = orig - eps;
            let fm = eval(&f, &probe)?;
            probe[t].data_mut()[k] = orig;
            let b = (fp - fm) / (2.0 * eps);
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.checked == 1 {
                report = GradCheckReport { max_rel_error: rel, worst: (t, k), analytic: a, numeric: b, ..report };
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    Ok(grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, max_coords, seed)?.max_rel_error)
}
