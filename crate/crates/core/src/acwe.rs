//! Morphological active contours without edges.
//!
//! Each iteration computes the region means, the image attachment field
//! `Γ = |∇u|·(α(I − c1)² − β(I − c2)²)`, sets `u` to 1 where `Γ < 0` and to 0
//! where `Γ > 0` (leaving it untouched where `Γ == 0`), then applies the
//! curvature smoother `(SI ∘ IS)^μ`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Region, Result};
use crate::morphology;
use crate::volume::{central_diff_axis, BinaryMask, Shape3, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcweParams {
    pub alpha: f64,
    pub beta: f64,
    pub mu: usize,
    /// Area weight. Only 0 is supported.
    pub v: f64,
    pub iterations: usize,
}

impl Default for AcweParams {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 2.0, mu: 1, v: 0.0, iterations: 100 }
    }
}

impl AcweParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidArgument("alpha and beta must be positive".into()));
        }
        if self.v != 0.0 {
            return Err(Error::InvalidArgument("area weight v must be 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSetState {
    pub u: BinaryMask,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMeans {
    /// Mean intensity where `u = 1`.
    pub c1: f64,
    /// Mean intensity where `u = 0`.
    pub c2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// `u = 1` where the intensity is strictly above the volume mean.
    MeanThreshold,
    /// Alternating cubic blocks of side `period`, starting with 1 at the origin.
    Checkerboard(usize),
}

pub fn init_levelset(image: &Volume3D, mode: InitMode) -> Result<LevelSetState> {
    let shape = image.shape();
    let u = match mode {
        InitMode::MeanThreshold => {
            let mean = image.mean();
            BinaryMask::new(shape, image.data().iter().map(|&v| (v as f64 > mean) as u8).collect())?
        }
        InitMode::Checkerboard(period) => {
            if period == 0 {
                return Err(Error::InvalidArgument("checkerboard period must be ≥ 1".into()));
            }
            BinaryMask::from_fn(shape, |z, y, x| (z / period + y / period + x / period) % 2 == 0)
        }
    };
    Ok(LevelSetState { u, iteration: 0 })
}

fn check_same_shape(op: &'static str, a: Shape3, b: Shape3) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("image {a} vs level set {b}")));
    }
    Ok(())
}

pub fn region_means(image: &Volume3D, state: &LevelSetState) -> Result<RegionMeans> {
    check_same_shape("region_means", image.shape(), state.u.shape())?;
    let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &m) in image.data().iter().zip(state.u.data()) {
        if m == 1 {
            s_in += v as f64;
            n_in += 1;
        } else {
            s_out += v as f64;
            n_out += 1;
        }
    }
    if n_in == 0 {
        return Err(Error::DegenerateRegion(Region::Inside));
    }
    if n_out == 0 {
        return Err(Error::DegenerateRegion(Region::Outside));
    }
    Ok(RegionMeans { c1: s_in / n_in as f64, c2: s_out / n_out as f64 })
}

fn attachment_field(image: &Volume3D, u: &BinaryMask, means: RegionMeans, params: &AcweParams) -> Result<Vec<f64>> {
    let shape = u.shape();
    if shape.dims().iter().any(|&d| d < 2) {
        return Err(Error::shape("attachment", format!("every axis needs ≥ 2 voxels, got {shape}")));
    }
    let uf: Vec<f64> = u.data().iter().map(|&v| v as f64).collect();
    let dims = shape.dims();
    let grads = [0, 1, 2].map(|a| central_diff_axis(&uf, dims, a));
    Ok(image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mag = grads[0][i].abs() + grads[1][i].abs() + grads[2][i].abs();
            let v = v as f64;
            mag * (params.alpha * (v - means.c1).powi(2) - params.beta * (v - means.c2).powi(2))
        })
        .collect())
}

/// The image attachment field `Γ` with the L1 central-difference magnitude of `u`.
pub fn attachment(
    image: &Volume3D,
    state: &LevelSetState,
    means: RegionMeans,
    params: &AcweParams,
) -> Result<Volume3D> {
    check_same_shape("attachment", image.shape(), state.u.shape())?;
    let gamma = attachment_field(image, &state.u, means, params)?;
    Volume3D::new(image.shape(), gamma.into_iter().map(|g| g as f32).collect())
}

struct StepOutcome {
    state: LevelSetState,
    means: RegionMeans,
    changed: usize,
}

fn step(image: &Volume3D, state: &LevelSetState, params: &AcweParams) -> Result<StepOutcome> {
    let means = region_means(image, state)?;
    let gamma = attachment_field(image, &state.u, means, params)?;
    let half: Vec<f32> = gamma
        .iter()
        .zip(state.u.data())
        .map(|(&g, &u)| {
            if g < 0.0 {
                1.0
            } else if g > 0.0 {
                0.0
            } else {
                u as f32
            }
        })
        .collect();
    let shape = state.u.shape();
    let smoothed = morphology::curvature_smooth_raw(&half, shape, params.mu)?;
    let u = BinaryMask::new(shape, smoothed.iter().map(|&v| v as u8).collect())?;
    let changed = u.data().iter().zip(state.u.data()).filter(|(a, b)| a != b).count();
    Ok(StepOutcome { state: LevelSetState { u, iteration: state.iteration + 1 }, means, changed })
}

/// One pointwise update followed by `mu` rounds of curvature smoothing.
pub fn acwe_step(image: &Volume3D, state: &LevelSetState, params: &AcweParams) -> Result<LevelSetState> {
    check_same_shape("acwe_step", image.shape(), state.u.shape())?;
    Ok(step(image, state, params)?.state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub changed_voxels: usize,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceLog {
    pub records: Vec<IterationRecord>,
}

impl ConvergenceLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,changed_voxels,c1,c2\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.iteration, r.changed_voxels, r.c1, r.c2));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn converged(&self) -> bool {
        self.records.last().is_some_and(|r| r.changed_voxels == 0)
    }
}

#[derive(Debug, Clone)]
pub struct AcweRun {
    pub mask: BinaryMask,
    pub log: ConvergenceLog,
}

/// Iterates until `params.iterations` steps have run or `u` stops changing.
pub fn acwe_run(image: &Volume3D, initial: LevelSetState, params: &AcweParams) -> Result<AcweRun> {
    params.validate()?;
    check_same_shape("acwe_run", image.shape(), initial.u.shape())?;
    let mut state = initial;
    let mut log = ConvergenceLog::default();
    for _ in 0..params.iterations {
        let iteration = state.iteration + 1;
        let out = step(image, &state, params).map_err(|e| Error::AcweIteration { iteration, source: Box::new(e) })?;
        log.records.push(IterationRecord {
            iteration,
            changed_voxels: out.changed,
            c1: out.means.c1,
            c2: out.means.c2,
        });
        state = out.state;
        if out.changed == 0 {
            break;
        }
    }
    Ok(AcweRun { mask: state.u, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(mu: usize) -> AcweParams {
        AcweParams { mu, ..Default::default() }
    }

    #[test]
    fn init_modes() {
        let (img, gt) =
            make_phantom(&PhantomSpec { tube_count: 2, shape: [8, 16, 16], seed: 4, ..Default::default() }).unwrap();
        assert_eq!(init_levelset(&img, InitMode::MeanThreshold).unwrap().u, gt);

        let img = Volume3D::zeros(Shape3::new(6, 6, 6));
        let cb = init_levelset(&img, InitMode::Checkerboard(3)).unwrap();
        assert_eq!(cb.u.count_ones(), 108);

        let flat = Volume3D::filled(Shape3::new(3, 3, 3), 0.4);
        assert_eq!(init_levelset(&flat, InitMode::MeanThreshold).unwrap().u.count_ones(), 0);
    }

    #[test]
    fn region_means_cases() {
        let s = Shape3::new(3, 3, 3);
        let u = BinaryMask::from_fn(s, |z, _, _| z == 0);
        let state = LevelSetState { u: u.clone(), iteration: 0 };
        let m = region_means(&u.to_volume(), &state).unwrap();
        assert_eq!((m.c1, m.c2), (1.0, 0.0));

        let m = region_means(&Volume3D::filled(s, 0.5), &state).unwrap();
        assert_eq!((m.c1, m.c2), (0.5, 0.5));

        let all = LevelSetState { u: BinaryMask::from_fn(s, |_, _, _| true), iteration: 0 };
        assert!(matches!(region_means(&Volume3D::zeros(s), &all), Err(Error::DegenerateRegion(Region::Outside))));
        let none = LevelSetState { u: BinaryMask::zeros(s), iteration: 0 };
        assert!(matches!(region_means(&Volume3D::zeros(s), &none), Err(Error::DegenerateRegion(Region::Inside))));
    }

    #[test]
    fn region_means_match_two_pass_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape3::new(4, 5, 3);
        let img = Volume3D::new(s, (0..s.len()).map(|_| rng.random::<f32>()).collect()).unwrap();
        let u = BinaryMask::new(s, (0..s.len()).map(|_| rng.random_bool(0.4) as u8).collect()).unwrap();
        let m = region_means(&img, &LevelSetState { u: u.clone(), iteration: 0 }).unwrap();
        let inside: Vec<f64> =
            img.data().iter().zip(u.data()).filter(|(_, &b)| b == 1).map(|(&v, _)| v as f64).collect();
        let outside: Vec<f64> =
            img.data().iter().zip(u.data()).filter(|(_, &b)| b == 0).map(|(&v, _)| v as f64).collect();
        assert!((m.c1 - inside.iter().sum::<f64>() / inside.len() as f64).abs() < 1e-12);
        assert!((m.c2 - outside.iter().sum::<f64>() / outside.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn attachment_cases() {
        let s = Shape3::new(4, 4, 4);
        let u = BinaryMask::from_fn(s, |z, _, _| z < 2);
        let state = LevelSetState { u: u.clone(), iteration: 0 };
        let img = u.to_volume();
        let means = RegionMeans { c1: 1.0, c2: 0.0 };
        let g = attachment(&img, &state, means, &params(1)).unwrap();
        // interior planes z=1 and z=2 carry |∇u| = 0.5; z=0 and z=3 are flat
        assert_eq!(g.get(0, 2, 2), 0.0);
        assert_eq!(g.get(1, 2, 2), -2.0 * 0.5);
        assert_eq!(g.get(2, 2, 2), 1.0 * 0.5);

        // α = β and I halfway between c1 and c2 → Γ = 0
        let p = AcweParams { alpha: 1.0, beta: 1.0, ..params(0) };
        let g = attachment(&Volume3D::filled(s, 0.5), &state, means, &p).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ground_truth_is_fixed_point_without_smoothing() {
        let spec = PhantomSpec { tube_count: 2, shape: [12, 20, 20], seed: 8, ..Default::default() };
        let (img, gt) = make_phantom(&spec).unwrap();
        let state = LevelSetState { u: gt.clone(), iteration: 0 };
        let next = acwe_step(&img, &state, &params(0)).unwrap();
        assert_eq!(next.u, gt);
        assert_eq!(next.iteration, 1);
    }

    #[test]
    fn zero_gamma_keeps_u() {
        let s = Shape3::new(4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = BinaryMask::new(s, (0..s.len()).map(|_| rng.random_bool(0.5) as u8).collect()).unwrap();
        let state = LevelSetState { u: u.clone(), iteration: 0 };
        let next = acwe_step(&Volume3D::filled(s, 0.3), &state, &params(0)).unwrap();
        // constant I: c1 = c2 = 0.3 so Γ ≡ 0
        assert_eq!(next.u, u);
    }

    /// Sign rule evaluated directly from the definitions, no shared kernels.
    fn pointwise_oracle(img: &Volume3D, u: &BinaryMask, p: &AcweParams) -> BinaryMask {
        let s = u.shape();
        let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
        for z in 0..s.z {
            for y in 0..s.y {
                for x in 0..s.x {
                    if u.get(z, y, x) {
                        si += img.get(z, y, x) as f64;
                        ni += 1.0;
                    } else {
                        so += img.get(z, y, x) as f64;
                        no += 1.0;
                    }
                }
            }
        }
        let (c1, c2) = (si / ni, so / no);
        let d = s.dims();
        BinaryMask::from_fn(s, |z, y, x| {
            let at = |c: [usize; 3]| u.get(c[0], c[1], c[2]) as u8 as f64;
            let mut mag = 0.0;
            for a in 0..3 {
                let p0 = [z, y, x];
                let i = p0[a];
                let mut lo = p0;
                let mut hi = p0;
                let diff = if i == 0 {
                    hi[a] = 1;
                    at(hi) - at(p0)
                } else if i == d[a] - 1 {
                    lo[a] = i - 1;
                    at(p0) - at(lo)
                } else {
                    lo[a] = i - 1;
                    hi[a] = i + 1;
                    (at(hi) - at(lo)) / 2.0
                };
                mag += diff.abs();
            }
            let v = img.get(z, y, x) as f64;
            let g = mag * (p.alpha * (v - c1).powi(2) - p.beta * (v - c2).powi(2));
            if g < 0.0 {
                true
            } else if g > 0.0 {
                false
            } else {
                u.get(z, y, x)
            }
        })
    }

    #[test]
    fn mu_zero_step_matches_pointwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape3::new(4, 4, 4);
        for _ in 0..200 {
            let img = Volume3D::new(s, (0..s.len()).map(|_| rng.random::<f32>()).collect()).unwrap();
            let u = BinaryMask::new(s, (0..s.len()).map(|_| rng.random_bool(0.5) as u8).collect()).unwrap();
            if u.count_ones() == 0 || u.count_ones() == s.len() {
                continue;
            }
            let state = LevelSetState { u: u.clone(), iteration: 0 };
            let got = acwe_step(&img, &state, &params(0)).unwrap();
            assert_eq!(got.u, pointwise_oracle(&img, &u, &params(0)));
        }
    }

    #[test]
    fn fixed_point_stops_after_one_iteration() {
        let spec = PhantomSpec { tube_count: 1, shape: [8, 16, 16], seed: 1, ..Default::default() };
        let (img, gt) = make_phantom(&spec).unwrap();
        let run = acwe_run(&img, LevelSetState { u: gt.clone(), iteration: 0 }, &params(0)).unwrap();
        assert_eq!(run.log.records.len(), 1);
        assert_eq!(run.log.records[0].changed_voxels, 0);
        assert!(run.log.converged());
        assert_eq!(run.mask, gt);
        let csv = run.log.to_csv();
        assert!(csv.starts_with("iteration,changed_voxels,c1,c2\n1,0,"));
    }

    #[test]
    fn degenerate_run_reports_iteration() {
        let s = Shape3::new(4, 4, 4);
        let state = LevelSetState { u: BinaryMask::zeros(s), iteration: 0 };
        let err = acwe_run(&Volume3D::zeros(s), state, &params(1)).unwrap_err();
        assert!(matches!(err, Error::AcweIteration { iteration: 1, .. }));
    }

    #[test]
    fn invalid_params() {
        assert!(AcweParams { v: 1.0, ..Default::default() }.validate().is_err());
        assert!(AcweParams { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(AcweParams { alpha: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn mirror_symmetry_is_preserved() {
        // symmetric slab phantom, α = β: the update commutes with x-mirroring
        let s = Shape3::new(6, 6, 8);
        let img = Volume3D::from_fn(s, |z, y, x| {
            let d = (x as f32 - 3.5).abs();
            if d < 1.5 {
                0.9
            } else {
                0.1 + 0.02 * (z + y) as f32
            }
        })
        .unwrap();
        let u = BinaryMask::from_fn(s, |_, _, x| (2..6).contains(&x));
        let p = AcweParams { alpha: 1.0, beta: 1.0, mu: 1, ..Default::default() };
        let mut state = LevelSetState { u, iteration: 0 };
        for _ in 0..3 {
            state = acwe_step(&img, &state, &p).unwrap();
            for z in 0..s.z {
                for y in 0..s.y {
                    for x in 0..s.x {
                        assert_eq!(state.u.get(z, y, x), state.u.get(z, y, s.x - 1 - x));
                    }
                }
            }
        }
    }
}
