//! Sup-inf / inf-sup operators over the nine planar structuring elements of
//! the 3×3×3 cube, and their composition as a curvature smoother.
//!
//! Border policy: neighbours falling outside the volume are skipped, so every
//! plane's extremum is taken over its in-range voxels only. The centre voxel
//! is always in range, so every extremum is defined.

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Shape3, Volume3D};

/// Plane normals `(z, y, x)`: the three axis planes, then the six diagonal
/// planes in lexicographic order of their normals.
const NORMALS: [[i8; 3]; 9] =
    [[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, -1], [0, 1, 1], [1, -1, 0], [1, 0, -1], [1, 0, 1], [1, 1, 0]];

/// One binary 3×3×3 mask: the voxels of the cube lying on a plane through
/// its centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    normal: [i8; 3],
    offsets: [[isize; 3]; 9],
}

impl StructuringElement {
    fn from_normal(normal: [i8; 3]) -> Self {
        let mut offsets = [[0isize; 3]; 9];
        let mut k = 0;
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let dot = normal[0] as isize * dz + normal[1] as isize * dy + normal[2] as isize * dx;
                    if dot == 0 {
                        offsets[k] = [dz, dy, dx];
                        k += 1;
                    }
                }
            }
        }
        debug_assert_eq!(k, 9);
        Self { normal, offsets }
    }

    pub fn normal(&self) -> [i8; 3] {
        self.normal
    }

    /// Offsets `(dz, dy, dx)` of the active voxels, in raster order.
    pub fn offsets(&self) -> &[[isize; 3]; 9] {
        &self.offsets
    }

    /// The mask as a dense `[dz+1][dy+1][dx+1]` array.
    pub fn mask(&self) -> [[[bool; 3]; 3]; 3] {
        let mut m = [[[false; 3]; 3]; 3];
        for o in &self.offsets {
            m[(o[0] + 1) as usize][(o[1] + 1) as usize][(o[2] + 1) as usize] = true;
        }
        m
    }

    pub fn contains(&self, dz: isize, dy: isize, dx: isize) -> bool {
        self.offsets.contains(&[dz, dy, dx])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElementSet {
    elements: [StructuringElement; 9],
}

impl StructuringElementSet {
    pub fn elements(&self) -> &[StructuringElement; 9] {
        &self.elements
    }

    /// Operator size. Always 1: neighbourhoods are 3×3×3.
    pub fn h(&self) -> usize {
        1
    }
}

/// The canonical nine elements in the fixed order documented on [`NORMALS`].
pub fn structuring_elements() -> StructuringElementSet {
    StructuringElementSet { elements: NORMALS.map(StructuringElement::from_normal) }
}

/// Max over the active voxels of `element` within a 3×3×3 window. `None`
/// marks out-of-range voxels, which are skipped. Window indexing is
/// `[(dz+1)*9 + (dy+1)*3 + (dx+1)]`.
pub fn mask_pool<T: Float>(window: &[Option<T>; 27], element: &StructuringElement) -> T {
    element
        .offsets
        .iter()
        .filter_map(|o| window[((o[0] + 1) * 9 + (o[1] + 1) * 3 + (o[2] + 1)) as usize])
        .fold(T::neg_infinity(), T::max)
}

/// Evaluates the operator and, per output voxel, the linear index of the
/// input voxel it selects. Extrema use strict comparison, so ties go to the
/// first plane in canonical order, then to the first voxel in raster order.
pub(crate) fn plane_operator_routed<T: Float + Send + Sync>(
    data: &[T],
    shape: Shape3,
    sup_inf: bool,
) -> (Vec<T>, Vec<u32>) {
    let set = structuring_elements();
    let [nz, ny, nx] = shape.dims().map(|d| d as isize);
    let strides = shape.strides().map(|s| s as isize);
    let linear: Vec<[isize; 9]> = set
        .elements
        .iter()
        .map(|e| e.offsets.map(|o| o[0] * strides[0] + o[1] * strides[1] + o[2] * strides[2]))
        .collect();
    // inner picks the plane minimum for SI, maximum for IS; outer the reverse
    let inner_better = |v: T, cur: T| if sup_inf { v < cur } else { v > cur };
    let plane = (shape.y * shape.x).max(1);
    let mut out = vec![T::zero(); data.len()];
    let mut route = vec![0u32; data.len()];
    out.par_chunks_mut(plane).zip(route.par_chunks_mut(plane)).enumerate().for_each(|(z, (slab, rslab))| {
        let z = z as isize;
        for y in 0..ny {
            for x in 0..nx {
                let center = z * strides[0] + y * strides[1] + x;
                let interior = z > 0 && z < nz - 1 && y > 0 && y < ny - 1 && x > 0 && x < nx - 1;
                let mut best: Option<(T, isize)> = None;
                for (e, lin) in set.elements.iter().zip(&linear) {
                    let mut ext: Option<(T, isize)> = None;
                    for (o, &l) in e.offsets.iter().zip(lin) {
                        if !interior {
                            let (pz, py, px) = (z + o[0], y + o[1], x + o[2]);
                            if pz < 0 || pz >= nz || py < 0 || py >= ny || px < 0 || px >= nx {
                                continue;
                            }
                        }
                        let i = center + l;
                        let v = data[i as usize];
                        match ext {
                            Some((cur, _)) if !inner_better(v, cur) => {}
                            _ => ext = Some((v, i)),
                        }
                    }
                    let (v, i) = ext.expect("centre voxel is always in range");
                    match best {
                        Some((cur, _)) if !inner_better(cur, v) => {}
                        _ => best = Some((v, i)),
                    }
                }
                let (v, i) = best.expect("nine planes");
                let k = (y * nx + x) as usize;
                slab[k] = v;
                rslab[k] = i as u32;
            }
        }
    });
    (out, route)
}

pub(crate) fn check_shape(op: &'static str, shape: Shape3) -> Result<()> {
    if shape.dims().iter().any(|&d| d < 3) {
        return Err(Error::shape(op, format!("every axis needs ≥ 3 voxels, got {shape}")));
    }
    Ok(())
}

/// `SI` on a raw `(z, y, x)` buffer. Shape must be at least 3 per axis.
pub fn si_raw<T: Float + Send + Sync>(data: &[T], shape: Shape3) -> Result<Vec<T>> {
    check_shape("si", shape)?;
    Ok(plane_operator_routed(data, shape, true).0)
}

/// `IS` on a raw `(z, y, x)` buffer. Shape must be at least 3 per axis.
pub fn is_raw<T: Float + Send + Sync>(data: &[T], shape: Shape3) -> Result<Vec<T>> {
    check_shape("is", shape)?;
    Ok(plane_operator_routed(data, shape, false).0)
}

/// Per voxel, the maximum over the nine planes of the plane minimum.
pub fn si(vol: &Volume3D) -> Result<Volume3D> {
    Volume3D::new(vol.shape(), si_raw(vol.data(), vol.shape())?)
}

/// Per voxel, the minimum over the nine planes of the plane maximum.
pub fn is_op(vol: &Volume3D) -> Result<Volume3D> {
    Volume3D::new(vol.shape(), is_raw(vol.data(), vol.shape())?)
}

/// Applies `SI ∘ IS` `mu` times.
pub fn curvature_smooth_raw<T: Float + Send + Sync>(data: &[T], shape: Shape3, mu: usize) -> Result<Vec<T>> {
    let mut cur = data.to_vec();
    for _ in 0..mu {
        cur = si_raw(&is_raw(&cur, shape)?, shape)?;
    }
    Ok(cur)
}

pub fn curvature_smooth(vol: &Volume3D, mu: usize) -> Result<Volume3D> {
    if mu == 0 {
        return Ok(vol.clone());
    }
    Volume3D::new(vol.shape(), curvature_smooth_raw(vol.data(), vol.shape(), mu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape3, rng: &mut ChaCha8Rng) -> Volume3D {
        Volume3D::new(shape, (0..shape.len()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn nine_elements_of_nine_voxels_through_centre() {
        let set = structuring_elements();
        assert_eq!(set.elements().len(), 9);
        assert_eq!(set.h(), 1);
        for e in set.elements() {
            let m = e.mask();
            let count = m.iter().flatten().flatten().filter(|&&b| b).count();
            assert_eq!(count, 9);
            assert!(m[1][1][1]);
        }
    }

    #[test]
    fn elements_are_distinct_planes() {
        let set = structuring_elements();
        for (i, a) in set.elements().iter().enumerate() {
            for b in &set.elements()[i + 1..] {
                assert_ne!(a.mask(), b.mask());
            }
            // every active voxel lies on the plane n·d = 0
            for o in a.offsets() {
                let n = a.normal();
                assert_eq!(n[0] as isize * o[0] + n[1] as isize * o[1] + n[2] as isize * o[2], 0);
            }
        }
    }

    #[test]
    fn union_covers_cube() {
        // The three axis planes cover everything except the 8 corners; each
        // corner (±1, ±1, ±1) lies on a diagonal plane such as y = x.
        let mut union = [[[false; 3]; 3]; 3];
        for e in structuring_elements().elements() {
            let m = e.mask();
            for z in 0..3 {
                for y in 0..3 {
                    for x in 0..3 {
                        union[z][y][x] |= m[z][y][x];
                    }
                }
            }
        }
        let count = union.iter().flatten().flatten().filter(|&&b| b).count();
        assert_eq!(count, 27);
    }

    #[test]
    fn mask_pool_cases() {
        let set = structuring_elements();
        let flat = [Some(0.5f64); 27];
        let mut spike = [Some(0.0f64); 27];
        spike[13] = Some(1.0);
        for e in set.elements() {
            assert_eq!(mask_pool(&flat, e), 0.5);
            assert_eq!(mask_pool(&spike, e), 1.0);
        }
    }

    #[test]
    fn mask_pool_ignores_out_of_range() {
        let set = structuring_elements();
        let mut w = [None; 27];
        w[13] = Some(-3.0f64);
        for e in set.elements() {
            assert_eq!(mask_pool(&w, e), -3.0);
        }
    }

    #[test]
    fn constant_is_fixed() {
        let v = Volume3D::filled(Shape3::new(4, 5, 3), 0.7);
        assert_eq!(si(&v).unwrap(), v);
        assert_eq!(is_op(&v).unwrap(), v);
        assert_eq!(curvature_smooth(&v, 3).unwrap(), v);
    }

    #[test]
    fn isolated_voxel() {
        let s = Shape3::new(5, 5, 5);
        let v = Volume3D::from_fn(s, |z, y, x| ((z, y, x) == (2, 2, 2)) as u8 as f32).unwrap();
        assert!(si(&v).unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(is_op(&v).unwrap(), v);
        assert!(curvature_smooth(&v, 1).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_space_is_fixed_point() {
        for axis in 0..3 {
            let s = Shape3::new(6, 6, 6);
            let v = Volume3D::from_fn(s, |z, y, x| ([z, y, x][axis] < 3) as u8 as f32).unwrap();
            for mu in 0..4 {
                assert_eq!(curvature_smooth(&v, mu).unwrap(), v, "axis {axis} mu {mu}");
            }
        }
    }

    #[test]
    fn small_shape_rejected() {
        let v = Volume3D::zeros(Shape3::new(2, 5, 5));
        assert!(si(&v).is_err());
        assert!(is_op(&v).is_err());
    }

    #[test]
    fn duality_monotonicity_binarity_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape3::new(5, 4, 6);
        for _ in 0..50 {
            let a = random(s, &mut rng);
            let neg = a.map(|v| -v).unwrap();
            let dual = si(&neg).unwrap().map(|v| -v).unwrap();
            assert_eq!(is_op(&a).unwrap(), dual);

            let b = Volume3D::new(s, a.data().iter().map(|v| v + 0.1 * rng.random::<f32>()).collect()).unwrap();
            for (x, y) in si(&a).unwrap().data().iter().zip(si(&b).unwrap().data()) {
                assert!(x <= y);
            }
            for (x, y) in is_op(&a).unwrap().data().iter().zip(is_op(&b).unwrap().data()) {
                assert!(x <= y);
            }

            let (lo, hi) = (a.min(), a.max());
            for v in si(&a).unwrap().data().iter().chain(is_op(&a).unwrap().data()) {
                assert!(*v >= lo && *v <= hi);
            }

            let bin = a.map(|v| (v > 0.5) as u8 as f32).unwrap();
            for v in si(&bin).unwrap().data().iter().chain(is_op(&bin).unwrap().data()) {
                assert!(*v == 0.0 || *v == 1.0);
            }
        }
    }
}
