//! Static per-slice PNG overlays of a mask contour on its volume.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use morphseg::volume::{BinaryMask, Volume3D};

const CONTOUR: Rgb<u8> = Rgb([255, 40, 40]);

/// In-plane boundary of the mask: foreground voxels with a 4-neighbour
/// outside the mask or outside the slice.
fn is_contour(mask: &BinaryMask, z: usize, y: usize, x: usize) -> bool {
    let [_, h, w] = mask.shape().dims();
    if !mask.get(z, y, x) {
        return false;
    }
    let outside = |yy: Option<usize>, xx: Option<usize>| match (yy, xx) {
        (Some(yy), Some(xx)) if yy < h && xx < w => !mask.get(z, yy, xx),
        _ => true,
    };
    outside(y.checked_sub(1), Some(x))
        || outside(Some(y + 1), Some(x))
        || outside(Some(y), x.checked_sub(1))
        || outside(Some(y), Some(x + 1))
}

/// Writes `slice_NNNN.png` for every z into `dir`; returns the slice count.
pub fn write_slices(vol: &Volume3D, mask: &BinaryMask, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let [d, h, w] = vol.shape().dims();
    let (lo, hi) = (vol.min(), vol.max());
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    for z in 0..d {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if is_contour(mask, z, y, x) {
                CONTOUR
            } else {
                let g = ((vol.get(z, y, x) - lo) * scale).round().clamp(0.0, 255.0) as u8;
                Rgb([g, g, g])
            }
        });
        let path = dir.join(format!("slice_{z:04}.png"));
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(d)
}
