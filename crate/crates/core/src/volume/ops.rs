use num_traits::Float;
use rand::Rng;

use super::{Shape3, Volume3D};
use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-8;

/// Statistics used by [`normalize_with`]: z-score parameters followed by the
/// range of the z-scored values that gets stretched onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub zmin: f64,
    pub zmax: f64,
}

impl NormStats {
    fn from_values<'a>(values: impl Iterator<Item = &'a [f32]> + Clone) -> Self {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for chunk in values.clone() {
            n += chunk.len();
            sum += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / n.max(1) as f64;
        let mut ss = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for chunk in values {
            for &v in chunk {
                let d = v as f64 - mean;
                ss += d * d;
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
        }
        let std = (ss / n.max(1) as f64).sqrt().max(STD_FLOOR);
        Self { mean, std, zmin: (lo - mean) / std, zmax: (hi - mean) / std }
    }
}

/// Per-volume normalization: z-score, then a linear stretch onto `[0, 1]`.
/// Constant volumes map to all zeros.
pub fn normalize(vol: &Volume3D) -> Volume3D {
    let stats = NormStats::from_values(std::iter::once(vol.data()));
    normalize_with(vol, &stats)
}

/// Pooled statistics over several volumes, for dataset-level normalization.
pub fn dataset_stats(vols: &[Volume3D]) -> NormStats {
    NormStats::from_values(vols.iter().map(|v| v.data()))
}

pub fn normalize_with(vol: &Volume3D, stats: &NormStats) -> Volume3D {
    let range = stats.zmax - stats.zmin;
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            if range <= 0.0 {
                return 0.0;
            }
            let z = (v as f64 - stats.mean) / stats.std;
            (((z - stats.zmin) / range).clamp(0.0, 1.0)) as f32
        })
        .collect();
    Volume3D::new(vol.shape(), data).expect("normalized values are finite").with_spacing(vol.spacing())
}

/// Central difference along one axis of a `(z, y, x)` grid, with one-sided
/// differences on the two border planes. Requires the axis length to be ≥ 2.
pub(crate) fn central_diff_axis<T: Float>(data: &[T], dims: [usize; 3], axis: usize) -> Vec<T> {
    let n = dims[axis];
    debug_assert!(n >= 2);
    let stride = Shape3::from_dims(dims).strides()[axis];
    let half = T::from(0.5).unwrap();
    let mut out = vec![T::zero(); data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = (i / stride) % n;
        *o = if pos == 0 {
            data[i + stride] - data[i]
        } else if pos == n - 1 {
            data[i] - data[i - stride]
        } else {
            (data[i + stride] - data[i - stride]) * half
        };
    }
    out
}

/// Transpose of [`central_diff_axis`], accumulated into `acc`.
pub(crate) fn central_diff_axis_adjoint<T: Float>(grad: &[T], dims: [usize; 3], axis: usize, acc: &mut [T]) {
    let n = dims[axis];
    let stride = Shape3::from_dims(dims).strides()[axis];
    let half = T::from(0.5).unwrap();
    for (i, &g) in grad.iter().enumerate() {
        let pos = (i / stride) % n;
        if pos == 0 {
            acc[i + stride] = acc[i + stride] + g;
            acc[i] = acc[i] - g;
        } else if pos == n - 1 {
            acc[i] = acc[i] + g;
            acc[i - stride] = acc[i - stride] - g;
        } else {
            let h = g * half;
            acc[i + stride] = acc[i + stride] + h;
            acc[i - stride] = acc[i - stride] - h;
        }
    }
}

fn check_gradient_shape(shape: Shape3) -> Result<()> {
    if shape.dims().iter().any(|&d| d < 2) {
        return Err(Error::shape("central_gradient", format!("every axis needs ≥ 2 voxels, got {shape}")));
    }
    Ok(())
}

/// Returns `[∂z, ∂y, ∂x]`.
pub fn central_gradient(vol: &Volume3D) -> Result<[Volume3D; 3]> {
    check_gradient_shape(vol.shape())?;
    let dims = vol.shape().dims();
    let comp = |axis| Volume3D::new(vol.shape(), central_diff_axis(vol.data(), dims, axis));
    Ok([comp(0)?, comp(1)?, comp(2)?])
}

/// Per-voxel `|∂z| + |∂y| + |∂x|`.
pub fn gradient_magnitude_l1(vol: &Volume3D) -> Result<Volume3D> {
    let [gz, gy, gx] = central_gradient(vol)?;
    let data = gz.data().iter().zip(gy.data()).zip(gx.data()).map(|((a, b), c)| a.abs() + b.abs() + c.abs()).collect();
    Volume3D::new(vol.shape(), data)
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

/// Mirror padding about the edge voxel (the edge sample is not repeated).
/// `margins[axis] = (lo, hi)`; every margin must be smaller than the axis length.
pub fn reflect_pad(vol: &Volume3D, margins: [(usize, usize); 3]) -> Result<Volume3D> {
    let dims = vol.shape().dims();
    for axis in 0..3 {
        let (lo, hi) = margins[axis];
        if lo >= dims[axis] || hi >= dims[axis] {
            return Err(Error::InvalidArgument(format!(
                "reflection margin ({lo}, {hi}) too large for axis {axis} of length {}",
                dims[axis]
            )));
        }
    }
    let out = Shape3::new(
        dims[0] + margins[0].0 + margins[0].1,
        dims[1] + margins[1].0 + margins[1].1,
        dims[2] + margins[2].0 + margins[2].1,
    );
    let src = vol.shape();
    let xs: Vec<usize> = (0..out.x).map(|p| mirror(p as isize - margins[2].0 as isize, src.x)).collect();
    let mut data = Vec::with_capacity(out.len());
    for z in 0..out.z {
        let sz = mirror(z as isize - margins[0].0 as isize, src.z);
        for y in 0..out.y {
            let sy = mirror(y as isize - margins[1].0 as isize, src.y);
            let row = src.index(sz, sy, 0);
            data.extend(xs.iter().map(|&sx| vol.data()[row + sx]));
        }
    }
    Ok(Volume3D::new(out, data)?.with_spacing(vol.spacing()))
}

/// Contiguous sub-volume starting at `offset`.
pub fn crop(vol: &Volume3D, offset: [usize; 3], shape: Shape3) -> Result<Volume3D> {
    let src = vol.shape();
    let sd = src.dims();
    let cd = shape.dims();
    if (0..3).any(|a| offset[a] + cd[a] > sd[a]) {
        return Err(Error::InvalidArgument(format!("crop {shape} at {offset:?} exceeds volume {src}")));
    }
    let mut data = Vec::with_capacity(shape.len());
    for z in 0..shape.z {
        for y in 0..shape.y {
            let start = src.index(z + offset[0], y + offset[1], offset[2]);
            data.extend_from_slice(&vol.data()[start..start + shape.x]);
        }
    }
    Ok(Volume3D::new(shape, data)?.with_spacing(vol.spacing()))
}

/// Crop at an offset drawn uniformly over all valid offsets.
pub fn random_crop<R: Rng + ?Sized>(vol: &Volume3D, shape: Shape3, rng: &mut R) -> Result<Volume3D> {
    if !shape.fits_within(vol.shape()) {
        return Err(Error::InvalidArgument(format!("crop {shape} larger than volume {}", vol.shape())));
    }
    let sd = vol.shape().dims();
    let cd = shape.dims();
    let offset =
        [rng.random_range(0..=sd[0] - cd[0]), rng.random_range(0..=sd[1] - cd[1]), rng.random_range(0..=sd[2] - cd[2])];
    crop(vol, offset, shape)
}
