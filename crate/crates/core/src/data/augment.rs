//! Cropping and resizing of HWC frame stacks.

use rand::Rng;

use crate::error::{invalid, Result};

/// Crops every frame of an HWC stack at the same `(top, left)` offset.
pub fn crop_at(frames: &[f32], hw: (usize, usize), crop: (usize, usize), offset: (usize, usize)) -> Result<Vec<f32>> {
    let (h, w) = hw;
    let (ch, cw) = crop;
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return invalid(format!("crop {crop:?} does not fit in {hw:?}"));
    }
    if offset.0 + ch > h || offset.1 + cw > w {
        return invalid(format!("crop offset {offset:?} out of range"));
    }
    let frame = h * w * 3;
    if frames.len() % frame != 0 {
        return invalid("frame stack length is not a multiple of the frame size");
    }
    let mut out = Vec::with_capacity(frames.len() / frame * ch * cw * 3);
    for f in frames.chunks_exact(frame) {
        for y in offset.0..offset.0 + ch {
            let row = (y * w + offset.1) * 3;
            out.extend_from_slice(&f[row..row + cw * 3]);
        }
    }
    Ok(out)
}

pub fn center_offset(hw: (usize, usize), crop: (usize, usize)) -> (usize, usize) {
    (hw.0.saturating_sub(crop.0) / 2, hw.1.saturating_sub(crop.1) / 2)
}

pub fn center_crop(frames: &[f32], hw: (usize, usize), crop: (usize, usize)) -> Result<Vec<f32>> {
    crop_at(frames, hw, crop, center_offset(hw, crop))
}

/// One uniformly drawn offset shared by all frames of the stack.
pub fn random_crop<R: Rng>(frames: &[f32], hw: (usize, usize), crop: (usize, usize), rng: &mut R) -> Result<Vec<f32>> {
    if crop.0 > hw.0 || crop.1 > hw.1 {
        return invalid(format!("crop {crop:?} does not fit in {hw:?}"));
    }
    let top = rng.random_range(0..=hw.0 - crop.0);
    let left = rng.random_range(0..=hw.1 - crop.1);
    crop_at(frames, hw, crop, (top, left))
}

/// Bilinear resize of an HWC stack with half-pixel centers. Same-size input
/// is returned unchanged.
pub fn resize_bilinear(frames: &[f32], hw: (usize, usize), out: (usize, usize)) -> Vec<f32> {
    if hw == out {
        return frames.to_vec();
    }
    let (h, w) = hw;
    let (oh, ow) = out;
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, oh);
    let xs = taps(w, ow);
    let frame = h * w * 3;
    let mut dst = Vec::with_capacity(frames.len() / frame * oh * ow * 3);
    for f in frames.chunks_exact(frame) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..3 {
                    let p = |y: usize, x: usize| f[(y * w + x) * 3 + c];
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    dst.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    dst
}
