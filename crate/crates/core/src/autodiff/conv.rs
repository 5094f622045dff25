//! im2col/col2im kernels shared by `conv3d` and `conv_transpose3d`.

use super::tensor::Real;
use crate::error::{Error, Result};

/// Kernel, stride and zero padding of a 3D convolution, in `(z, y, x)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { kernel, stride, pad }
    }

    pub fn cube(k: usize, s: usize, p: usize) -> Self {
        Self::new([k; 3], [s; 3], [p; 3])
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Spatial output size of a forward convolution over `input`.
    pub fn conv_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if self.stride[a] == 0 || padded < self.kernel[a] {
                return Err(Error::shape(
                    "conv3d",
                    format!("kernel {:?} does not fit input {input:?} with padding {:?}", self.kernel, self.pad),
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Spatial output size of a transposed convolution over `input`.
    pub fn transpose_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * self.stride[a] + self.kernel[a];
            if self.stride[a] == 0 || input[a] == 0 || full <= 2 * self.pad[a] {
                return Err(Error::shape(
                    "conv_transpose3d",
                    format!("kernel {:?} / padding {:?} invalid for input {input:?}", self.kernel, self.pad),
                ));
            }
            out[a] = full - 2 * self.pad[a];
        }
        Ok(out)
    }
}

/// Unfolds `x` (`channels × big`) into columns (`channels·k³ × small`),
/// where `small = conv_out(big)`.
pub(crate) fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    big: [usize; 3],
    small: [usize; 3],
    g: &ConvGeom,
    cols: &mut [T],
) {
    let [kd, kh, kw] = g.kernel;
    let p = small[0] * small[1] * small[2];
    let big_vol = big[0] * big[1] * big[2];
    debug_assert_eq!(cols.len(), channels * kd * kh * kw * p);
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * big_vol..(c + 1) * big_vol];
        for i in 0..kd {
            for j in 0..kh {
                for l in 0..kw {
                    let out = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for od in 0..small[0] {
                        let z = (od * g.stride[0] + i) as isize - g.pad[0] as isize;
                        let zin = z >= 0 && (z as usize) < big[0];
                        for oh in 0..small[1] {
                            let y = (oh * g.stride[1] + j) as isize - g.pad[1] as isize;
                            let yin = zin && y >= 0 && (y as usize) < big[1];
                            if !yin {
                                out[o..o + small[2]].fill(T::zero());
                                o += small[2];
                                continue;
                            }
                            let base = (z as usize * big[1] + y as usize) * big[2];
                            for ow in 0..small[2] {
                                let xx = (ow * g.stride[2] + l) as isize - g.pad[2] as isize;
                                out[o] =
                                    if xx >= 0 && (xx as usize) < big[2] { xc[base + xx as usize] } else { T::zero() };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `acc` (`channels × big`).
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    big: [usize; 3],
    small: [usize; 3],
    g: &ConvGeom,
    acc: &mut [T],
) {
    let [kd, kh, kw] = g.kernel;
    let p = small[0] * small[1] * small[2];
    let big_vol = big[0] * big[1] * big[2];
    let mut row = 0;
    for c in 0..channels {
        let ac = &mut acc[c * big_vol..(c + 1) * big_vol];
        for i in 0..kd {
            for j in 0..kh {
                for l in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for od in 0..small[0] {
                        let z = (od * g.stride[0] + i) as isize - g.pad[0] as isize;
                        let zin = z >= 0 && (z as usize) < big[0];
                        for oh in 0..small[1] {
                            let y = (oh * g.stride[1] + j) as isize - g.pad[1] as isize;
                            if !(zin && y >= 0 && (y as usize) < big[1]) {
                                o += small[2];
                                continue;
                            }
                            let base = (z as usize * big[1] + y as usize) * big[2];
                            for ow in 0..small[2] {
                                let xx = (ow * g.stride[2] + l) as isize - g.pad[2] as isize;
                                if xx >= 0 && (xx as usize) < big[2] {
                                    let t = &mut ac[base + xx as usize];
                                    *t = *t + src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
