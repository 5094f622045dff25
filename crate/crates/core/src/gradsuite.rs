//! Finite-difference suites over single ops, network layers and the whole
//! training objective, shared by the command line and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_many, ConvGeom, GradCheckReport, Graph, Tensor, Var};
use crate::error::Result;
use crate::losses::{compound, LossFlags, LossWeights};
use crate::network::{Mode, Network, NetworkConfig};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-6;
/// Tolerance for single ops and layers.
pub const LAYER_TOL: f64 = 1e-4;
/// Tolerance for the loss through the network.
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Op,
    Layer,
    EndToEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Distinct values at least 1e-3 apart in random order, so that no
/// perturbation changes which voxel attains an extremum.
pub fn tie_free(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 1e-3).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("sized")
}

/// `Σ r ⊙ y` for a fixed random `r`, so every output coordinate contributes.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Body = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn case(name: &str, inputs: Vec<Tensor<f64>>, coords: usize, seed: u64, tol: f64, f: Body) -> Result<SuiteResult> {
    let report = grad_check_many(
        |g, v| {
            let y = f(g, v)?;
            if g.shape(y).is_empty() {
                Ok(y)
            } else {
                project(g, y, seed ^ 0x5eed)
            }
        },
        &inputs,
        FD_EPS,
        coords,
        seed,
    )?;
    Ok(SuiteResult { name: name.to_string(), report, tolerance: tol })
}

fn op_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4];
    let any = uniform(&shape, -2.0, 2.0, &mut rng);
    let pos = uniform(&shape, 0.5, 2.0, &mut rng);
    // Kinks of abs and relu stay well away from the probes.
    let away = any.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let one = |name: &str, x: &Tensor<f64>, f: fn(&mut Graph<f64>, Var) -> Result<Var>| {
        case(name, vec![x.clone()], 24, seed, LAYER_TOL, Box::new(move |g, v| f(g, v[0])))
    };
    let mut out = vec![
        one("exp", &any, |g, x| Ok(g.exp(x)))?,
        one("log", &pos, |g, x| Ok(g.log(x, 1e-8)))?,
        one("square", &any, |g, x| Ok(g.square(x)))?,
        one("abs", &away, |g, x| Ok(g.abs(x)))?,
        one("relu", &away, |g, x| Ok(g.relu(x)))?,
        one("sigmoid", &any, |g, x| Ok(g.sigmoid(x)))?,
        one("mean", &any, |g, x| Ok(g.mean(x)))?,
    ];
    let b = uniform(&shape, 0.5, 2.0, &mut rng);
    type BinOp = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let ops: [(&str, BinOp); 4] = [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul), ("div", Graph::div)];
    for (name, op) in ops {
        out.push(case(
            name,
            vec![any.clone(), b.clone()],
            24,
            seed,
            LAYER_TOL,
            Box::new(move |g, v| op(g, v[0], v[1])),
        )?);
    }
    let x = tie_free(&[2, 2, 4, 2, 4], &mut rng);
    for axis in 0..3 {
        out.push(case(
            &format!("central_diff_{axis}"),
            vec![x.clone()],
            64,
            seed,
            LAYER_TOL,
            Box::new(move |g, v| g.central_diff(v[0], axis)),
        )?);
    }
    out.push(case("max_pool3d", vec![x.clone()], 64, seed, LAYER_TOL, Box::new(|g, v| g.max_pool3d(v[0])))?);
    Ok(out)
}

fn layer_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = tie_free(&[2, 1, 4, 5, 3], &mut rng);
    out.push(case("masked_pool_si", vec![x.clone()], 120, seed, LAYER_TOL, Box::new(|g, v| g.masked_pool_si(v[0])))?);
    out.push(case("masked_pool_is", vec![x.clone()], 120, seed, LAYER_TOL, Box::new(|g, v| g.masked_pool_is(v[0])))?);
    out.push(case("curvature_smooth", vec![x], 120, seed, LAYER_TOL, Box::new(|g, v| g.curvature_smooth(v[0], 3)))?);

    let geom = ConvGeom::cube(3, 1, 1);
    let inputs = vec![
        uniform(&[2, 2, 4, 5, 3], -1.0, 1.0, &mut rng),
        uniform(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut rng),
        uniform(&[3], -1.0, 1.0, &mut rng),
    ];
    out.push(case(
        "conv3d",
        inputs,
        60,
        seed,
        LAYER_TOL,
        Box::new(move |g, v| g.conv3d(v[0], v[1], Some(v[2]), geom)),
    )?);

    let geom = ConvGeom::cube(4, 2, 1);
    let inputs = vec![
        uniform(&[2, 2, 2, 3, 2], -1.0, 1.0, &mut rng),
        uniform(&[2, 3, 4, 4, 4], -1.0, 1.0, &mut rng),
        uniform(&[3], -1.0, 1.0, &mut rng),
    ];
    out.push(case(
        "conv_transpose3d",
        inputs,
        60,
        seed,
        LAYER_TOL,
        Box::new(move |g, v| g.conv_transpose3d(v[0], v[1], Some(v[2]), geom)),
    )?);

    let inputs = vec![
        uniform(&[2, 3, 2, 3, 2], -1.0, 1.0, &mut rng),
        uniform(&[3], 0.5, 1.5, &mut rng),
        uniform(&[3], -0.5, 0.5, &mut rng),
    ];
    out.push(case(
        "batch_norm_train",
        inputs,
        72,
        seed,
        LAYER_TOL,
        Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2])?.0)),
    )?);

    let inputs = vec![tie_free(&[2, 2, 4, 2, 4], &mut rng), uniform(&[2, 1, 4, 2, 4], -1.0, 1.0, &mut rng)];
    out.push(case("concat", inputs, 64, seed, LAYER_TOL, Box::new(|g, v| g.concat(&[v[0], v[1]])))?);
    Ok(out)
}

/// Input batch `(2, 1, 8, 16, 16)` of the end-to-end check.
pub const END_TO_END_BATCH: [usize; 5] = [2, 1, 8, 16, 16];

/// The compound loss with default weights through the reduced network,
/// probing `coords` coordinates of every parameter tensor.
pub fn end_to_end(seed: u64, coords: usize) -> Result<SuiteResult> {
    let [_, _, d, h, w] = END_TO_END_BATCH;
    let net = Network::new(NetworkConfig { input_shape: [d, h, w], seed, ..NetworkConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = END_TO_END_BATCH.iter().product();
    let image = Tensor::new(END_TO_END_BATCH.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect())?;
    let inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.cast()).collect();
    let report = grad_check_many(
        |g, v| {
            let x = g.constant(image.clone());
            let (out, _) = net.forward(g, v, x, Mode::Train)?;
            let (terms, _) = compound(g, x, &out, &LossWeights::default(), &LossFlags::default())?;
            Ok(terms.total)
        },
        &inputs,
        FD_EPS,
        coords,
        seed,
    )?;
    Ok(SuiteResult { name: "compound_through_network".into(), report, tolerance: END_TO_END_TOL })
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<SuiteResult>> {
    match scope {
        Scope::Op => op_suite(seed),
        Scope::Layer => layer_suite(seed),
        Scope::EndToEnd => Ok(vec![end_to_end(seed, 3)?]),
    }
}
