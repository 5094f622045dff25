//! Sliding-window inference with reflection padding and overlap averaging.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::{check_divisible, Network, DEFAULT_THRESHOLD};
use crate::volume::{crop, reflect_pad, BinaryMask, Shape3, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub threshold: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { window: [32, 128, 128], stride: [8, 16, 16], threshold: DEFAULT_THRESHOLD }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        check_divisible(self.window)?;
        for a in 0..3 {
            if self.stride[a] == 0 || self.stride[a] > self.window[a] {
                return Err(Error::InvalidArgument(format!(
                    "stride {:?} must be positive and ≤ window {:?}",
                    self.stride, self.window
                )));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// Anything mapping a batch `(N, 1, k, m, n)` to per-voxel scores of the same shape.
pub trait Predictor: Sync {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for Network {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Network::predict(self, batch)
    }
}

/// Reflection margins `(before, after)` on one axis: the padded extent is the
/// window plus a whole number of strides, split as evenly as possible.
pub fn pad_plan(extent: usize, window: usize, stride: usize) -> (usize, usize) {
    let padded = if extent <= window { window } else { window + (extent - window).div_ceil(stride) * stride };
    let total = padded - extent;
    (total / 2, total - total / 2)
}

/// Window start offsets `0, s, 2s, …` along an axis of length `extent`, plus
/// a final offset clamped to `extent − window` when the strides fall short.
pub fn window_offsets(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    if extent < window {
        return Vec::new();
    }
    let last = extent - window;
    let mut offs: Vec<usize> = (0..=last).step_by(stride).collect();
    if *offs.last().expect("offset 0") != last {
        offs.push(last);
    }
    offs
}

struct Plan {
    margins: [(usize, usize); 3],
    padded: Shape3,
    offsets: Vec<[usize; 3]>,
}

fn plan(shape: Shape3, cfg: &InferenceConfig) -> Result<Plan> {
    let dims = shape.dims();
    let margins: [(usize, usize); 3] = std::array::from_fn(|a| pad_plan(dims[a], cfg.window[a], cfg.stride[a]));
    for a in 0..3 {
        if margins[a].0.max(margins[a].1) >= dims[a] {
            return Err(Error::shape(
                "sliding_window_segment",
                format!("volume {shape} too small for window {:?} after reflection padding", cfg.window),
            ));
        }
    }
    let padded = Shape3::from_dims(std::array::from_fn(|a| dims[a] + margins[a].0 + margins[a].1));
    let per_axis: [Vec<usize>; 3] =
        std::array::from_fn(|a| window_offsets(padded.dims()[a], cfg.window[a], cfg.stride[a]));
    let mut offsets = Vec::new();
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                offsets.push([z, y, x]);
            }
        }
    }
    Ok(Plan { margins, padded, offsets })
}

/// Number of windows covering each voxel of a volume of `shape`.
pub fn coverage_counts(shape: Shape3, cfg: &InferenceConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let p = plan(shape, cfg)?;
    let mut counts = vec![0u32; p.padded.len()];
    for o in &p.offsets {
        accumulate_window(&mut counts, p.padded, *o, cfg.window, |c, _| *c += 1);
    }
    let window_counts = Volume3D::new(p.padded, counts.iter().map(|&c| c as f32).collect())?;
    let origin = [p.margins[0].0, p.margins[1].0, p.margins[2].0];
    Ok(crop(&window_counts, origin, shape)?.data().iter().map(|&c| c as u32).collect())
}

fn accumulate_window<A>(
    acc: &mut [A],
    padded: Shape3,
    o: [usize; 3],
    window: [usize; 3],
    mut f: impl FnMut(&mut A, usize),
) {
    let mut k = 0;
    for z in 0..window[0] {
        for y in 0..window[1] {
            let row = padded.index(o[0] + z, o[1] + y, o[2]);
            for slot in &mut acc[row..row + window[2]] {
                f(slot, k);
                k += 1;
            }
        }
    }
}

/// Per-voxel average of the predictor's scores over all windows covering the
/// voxel. The output has the input's shape.
pub fn sliding_window_segment<P: Predictor + ?Sized>(
    net: &P,
    vol: &Volume3D,
    cfg: &InferenceConfig,
) -> Result<Volume3D> {
    cfg.validate()?;
    let shape = vol.shape();
    let p = plan(shape, cfg)?;
    let padded = reflect_pad(vol, p.margins)?;
    let wshape = Shape3::from_dims(cfg.window);
    let mut sum = vec![0.0f64; p.padded.len()];
    let mut count = vec![0u32; p.padded.len()];
    let chunk = rayon::current_num_threads().max(1);
    for group in p.offsets.chunks(chunk) {
        let preds: Vec<Tensor<f32>> = group
            .par_iter()
            .map(|&o| {
                let w = crop(&padded, o, wshape)?;
                let batch = Tensor::new(vec![1, 1, cfg.window[0], cfg.window[1], cfg.window[2]], w.into_data())?;
                net.predict(&batch)
            })
            .collect::<Result<_>>()?;
        for (o, pred) in group.iter().zip(&preds) {
            if pred.numel() != wshape.len() {
                return Err(Error::shape("sliding_window_segment", format!("prediction shape {:?}", pred.shape())));
            }
            let d = pred.data();
            accumulate_window(&mut sum, p.padded, *o, cfg.window, |s, k| *s += d[k] as f64);
            accumulate_window(&mut count, p.padded, *o, cfg.window, |c, _| *c += 1);
        }
    }
    let avg: Vec<f32> = sum.iter().zip(&count).map(|(&s, &c)| (s / c as f64) as f32).collect();
    let avg = Volume3D::new(p.padded, avg)?;
    let origin = [p.margins[0].0, p.margins[1].0, p.margins[2].0];
    let out = crop(&avg, origin, shape)?;
    Ok(out.with_spacing(vol.spacing()))
}

/// 1 where `s > t`, else 0. `t` must lie in `(0, 1)`.
pub fn threshold(s: &Volume3D, t: f32) -> Result<BinaryMask> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside (0, 1)")));
    }
    BinaryMask::new(s.shape(), s.data().iter().map(|&v| (v > t) as u8).collect())
}
