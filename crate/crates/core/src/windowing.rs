//! Spatial bookkeeping for the window encoder.
//!
//! All layouts are row-major: windows are numbered left to right, top to
//! bottom, and tokens inside a window likewise.

use crate::error::{dim_err, Result};
use crate::tensor::{concat_last, linear, Tensor};

/// Token map produced by [`patch_embed`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub tokens: Tensor,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn height(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

fn hwc(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    t.expect_rank(3, what)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2]))
}

/// Split an H×W×3 image into non-overlapping patches and project each
/// flattened patch (row-major pixels, channel fastest) to C dims.
pub fn patch_embed(image: &Tensor, patch_size: usize, weights: &Tensor) -> Result<PatchGrid> {
    let (h, w, c_img) = hwc(image, "patch_embed")?;
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return dim_err(format!(
            "patch_embed: image {h}×{w} is not divisible by patch size {patch_size}"
        ));
    }
    let flat = c_img * patch_size * patch_size;
    if weights.shape().len() != 2 || weights.shape()[0] != flat {
        return dim_err(format!(
            "patch_embed: weights {:?} do not take {flat}-dim patches",
            weights.shape()
        ));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let mut patches = Vec::with_capacity(gh * gw * flat);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let start = (y * w + px * patch_size) * c_img;
                patches.extend_from_slice(&image.data()[start..start + patch_size * c_img]);
            }
        }
    }
    let patches = Tensor::new(vec![gh, gw, flat], patches)?;
    Ok(PatchGrid {
        tokens: linear(&patches, weights, None)?,
        patch_size,
    })
}

/// Regroup an h×w×C map into (h/win · w/win) × win² × C windows.
pub fn window_partition(t: &Tensor, win: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(t, "window_partition")?;
    if win == 0 || h % win != 0 || w % win != 0 {
        return dim_err(format!(
            "window_partition: map {h}×{w} is not divisible by window {win}"
        ));
    }
    let (nh, nw) = (h / win, w / win);
    let mut out = Vec::with_capacity(t.len());
    for wy in 0..nh {
        for wx in 0..nw {
            for dy in 0..win {
                let start = ((wy * win + dy) * w + wx * win) * c;
                out.extend_from_slice(&t.data()[start..start + win * c]);
            }
        }
    }
    Tensor::new(vec![nh * nw, win * win, c], out)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    windows.expect_rank(3, "window_reverse")?;
    let (nwin, area, c) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    let win = (area as f64).sqrt().round() as usize;
    if win * win != area || win == 0 || !h.is_multiple_of(win) || !w.is_multiple_of(win) || nwin * area != h * w {
        return dim_err(format!(
            "window_reverse: {nwin} windows of {area} tokens cannot tile a {h}×{w} map"
        ));
    }
    let nw = w / win;
    let mut out = vec![0.0; h * w * c];
    for (widx, block) in windows.data().chunks_exact(area * c).enumerate() {
        let (wy, wx) = (widx / nw, widx % nw);
        for dy in 0..win {
            let dst = ((wy * win + dy) * w + wx * win) * c;
            out[dst..dst + win * c].copy_from_slice(&block[dy * win * c..(dy + 1) * win * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Toroidal roll: output[y][x] = input[(y − dy) mod h][(x − dx) mod w].
pub fn cyclic_shift(t: &Tensor, dy: isize, dx: isize) -> Result<Tensor> {
    let (h, w, c) = hwc(t, "cyclic_shift")?;
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    if sy == 0 && sx == 0 {
        return Ok(t.clone());
    }
    let mut out = vec![0.0; t.len()];
    for y in 0..h {
        let src_y = (y + h - sy) % h;
        for x in 0..w {
            let src_x = (x + w - sx) % w;
            let src = (src_y * w + src_x) * c;
            out[(y * w + x) * c..][..c].copy_from_slice(&t.data()[src..src + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Concatenate each 2×2 neighbourhood (order: (0,0), (1,0), (0,1), (1,1))
/// to 4C and project to 2C.
pub fn patch_merge(t: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(t, "patch_merge")?;
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("patch_merge: extents {h}×{w} must be even"));
    }
    if weights.shape() != [4 * c, 2 * c] {
        return dim_err(format!(
            "patch_merge: weights {:?} should be [{}, {}]",
            weights.shape(),
            4 * c,
            2 * c
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut cat = Vec::with_capacity(t.len());
    for y in 0..oh {
        for x in 0..ow {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let src = ((2 * y + dy) * w + 2 * x + dx) * c;
                cat.extend_from_slice(&t.data()[src..src + c]);
            }
        }
    }
    linear(&Tensor::new(vec![oh, ow, 4 * c], cat)?, weights, None)
}

/// Stack two maps with identical extents along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    concat_last(a, b)
}
