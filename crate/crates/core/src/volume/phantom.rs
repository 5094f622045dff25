//! Synthetic vessel phantoms: a union of random capsules over a flat
//! background, with additive Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BinaryMask, Shape3, Volume3D};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// `[z, y, x]` voxel counts.
    pub shape: [usize; 3],
    pub tube_count: usize,
    /// Inclusive radius bounds in voxels.
    pub radius_range: (f64, f64),
    pub foreground_intensity: f64,
    pub background_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [32, 64, 64],
            tube_count: 4,
            radius_range: (1.5, 3.0),
            foreground_intensity: 0.8,
            background_intensity: 0.2,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let [z, y, x] = self.shape;
        if z < 8 || y < 16 || x < 16 {
            return bad(format!("phantom shape {:?} below minimum (8, 16, 16)", self.shape));
        }
        let (lo, hi) = self.radius_range;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("radius range ({lo}, {hi}) must satisfy 1 ≤ min ≤ max"));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.foreground_intensity) || !in_unit(self.background_intensity) {
            return bad("intensities must lie in [0, 1]".into());
        }
        if self.foreground_intensity <= self.background_intensity {
            return bad("foreground intensity must exceed background intensity".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and ≥ 0", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

impl Capsule {
    fn contains(&self, p: [f64; 3]) -> bool {
        let ab = sub(self.b, self.a);
        let ap = sub(p, self.a);
        let len2 = dot(ab, ab);
        let t = if len2 > 0.0 { (dot(ap, ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let closest = [self.a[0] + t * ab[0], self.a[1] + t * ab[1], self.a[2] + t * ab[2]];
        let d = sub(p, closest);
        dot(d, d) <= self.radius * self.radius
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Generates `(image, ground_truth)`. Endpoints are uniform inside the
/// volume's bounding box; voxel centres within `radius` of the segment are
/// foreground. Deterministic given `spec.seed`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume3D, BinaryMask)> {
    spec.validate()?;
    let shape = Shape3::from_dims(spec.shape);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.shape.map(|d| d as f64 - 1.0);
    let point = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|a| rng.random::<f64>() * dims[a]);
    let tubes: Vec<Capsule> = (0..spec.tube_count)
        .map(|_| {
            let a = point(&mut rng);
            let b = point(&mut rng);
            let radius = if spec.radius_range.1 > spec.radius_range.0 {
                rng.random_range(spec.radius_range.0..=spec.radius_range.1)
            } else {
                spec.radius_range.0
            };
            Capsule { a, b, radius }
        })
        .collect();

    let mask = BinaryMask::from_fn(shape, |z, y, x| {
        let p = [z as f64, y as f64, x as f64];
        tubes.iter().any(|t| t.contains(p))
    });

    let (fg, bg) = (spec.foreground_intensity, spec.background_intensity);
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma validated"));
    let data = mask
        .data()
        .iter()
        .map(|&m| {
            let clean = bg + (fg - bg) * m as f64;
            let noisy = match &noise {
                Some(n) => clean + n.sample(&mut rng),
                None => clean,
            };
            noisy.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok((Volume3D::new(shape, data)?, mask))
}
