//! Dense 3D volumes and the operations shared by the solver, the network and
//! the evaluation code.
//!
//! Axis order is always `(z, y, x)` with `x` varying fastest in memory.

mod io;
mod ops;
mod phantom;

pub use io::{load_mask, load_volume, save_mask, save_volume};
pub use ops::{
    central_gradient, crop, dataset_stats, gradient_magnitude_l1, normalize, normalize_with, random_crop, reflect_pad,
    NormStats,
};
pub use phantom::{make_phantom, PhantomSpec};

pub(crate) use ops::{central_diff_axis, central_diff_axis_adjoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Shape3 {
    pub const fn new(z: usize, y: usize, x: usize) -> Self {
        Self { z, y, x }
    }

    pub const fn len(&self) -> usize {
        self.z * self.y * self.x
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn dims(&self) -> [usize; 3] {
        [self.z, self.y, self.x]
    }

    pub fn from_dims(d: [usize; 3]) -> Self {
        Self::new(d[0], d[1], d[2])
    }

    /// Linear offset of `(z, y, x)`.
    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }

    /// Memory stride of each axis.
    pub const fn strides(&self) -> [usize; 3] {
        [self.y * self.x, self.x, 1]
    }

    pub fn fits_within(&self, other: Shape3) -> bool {
        self.z <= other.z && self.y <= other.y && self.x <= other.x
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.z, self.y, self.x)
    }
}

/// A dense scalar volume. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    shape: Shape3,
    data: Vec<f32>,
    spacing: Option<[f64; 3]>,
}

impl Volume3D {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Volume3D::new",
                format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data, spacing: None })
    }

    pub fn filled(shape: Shape3, value: f32) -> Self {
        assert!(value.is_finite());
        Self { shape, data: vec![value; shape.len()], spacing: None }
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Builds a volume by evaluating `f(z, y, x)` at every voxel.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.z {
            for y in 0..shape.y {
                for x in 0..shape.x {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn with_spacing(mut self, spacing: Option<[f64; 3]>) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Physical voxel size in micrometres, `(z, y, x)`. Metadata only.
    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.spacing
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(z, y, x)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Ok(Self::new(self.shape, self.data.iter().map(|&v| f(v)).collect())?.with_spacing(self.spacing))
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// A volume whose voxels are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Shape3,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "BinaryMask::new",
                format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask voxel {i} is {}", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self { shape, data: vec![0; shape.len()] }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.z {
            for y in 0..shape.y {
                for x in 0..shape.x {
                    data.push(f(z, y, x) as u8);
                }
            }
        }
        Self { shape, data }
    }

    /// Accepts only volumes whose values are exactly 0.0 or 1.0.
    pub fn from_volume(vol: &Volume3D) -> Result<Self> {
        let mut data = Vec::with_capacity(vol.data.len());
        for (i, &v) in vol.data.iter().enumerate() {
            if v == 0.0 {
                data.push(0);
            } else if v == 1.0 {
                data.push(1);
            } else {
                return Err(Error::InvalidArgument(format!("mask voxel {i} is {v}, not 0 or 1")));
            }
        }
        Ok(Self { shape: vol.shape, data })
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D { shape: self.shape, data: self.data.iter().map(|&v| v as f32).collect(), spacing: None }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.shape.index(z, y, x)] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| 1 - v).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_bad_length_and_nan() {
        let s = Shape3::new(2, 2, 2);
        assert!(Volume3D::new(s, vec![0.0; 7]).is_err());
        let mut d = vec![0.0; 8];
        d[3] = f32::NAN;
        assert!(matches!(Volume3D::new(s, d), Err(Error::NonFinite { index: 3 })));
    }

    #[test]
    fn index_is_x_fastest() {
        let s = Shape3::new(2, 3, 4);
        assert_eq!(s.index(0, 0, 1), 1);
        assert_eq!(s.index(0, 1, 0), 4);
        assert_eq!(s.index(1, 0, 0), 12);
        assert_eq!(s.strides(), [12, 4, 1]);
    }

    #[test]
    fn mask_from_volume_requires_exact_binary() {
        let s = Shape3::new(1, 1, 3);
        let v = Volume3D::new(s, vec![0.0, 1.0, 0.5]).unwrap();
        assert!(BinaryMask::from_volume(&v).is_err());
        let v = Volume3D::new(s, vec![0.0, 1.0, 1.0]).unwrap();
        let m = BinaryMask::from_volume(&v).unwrap();
        assert_eq!(m.count_ones(), 2);
        assert_eq!(m.to_volume(), v);
        assert_eq!(m.complement().count_ones(), 1);
    }
}
