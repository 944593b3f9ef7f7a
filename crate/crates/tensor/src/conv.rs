//! NHWC im2col helpers for stride-1 square convolutions.

use crate::Elem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    /// Width of one im2col row: `kernel * kernel * in_channels`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub(crate) fn positions_per_sample(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Samples per im2col chunk so a chunk stays near `budget` elements.
    pub(crate) fn chunk_samples(&self, budget: usize) -> usize {
        let per = self.positions_per_sample() * self.patch_len();
        (budget / per.max(1)).clamp(1, self.batch.max(1))
    }
}

/// Fill `cols` with patches for samples `[start, start + count)`.
pub(crate) fn im2col<T: Elem>(x: &[T], g: &ConvGeometry, start: usize, count: usize, cols: &mut [T]) {
    let (h, w, c, k, p) = (g.height, g.width, g.in_channels, g.kernel, g.padding);
    let (oh, ow) = (g.out_height(), g.out_width());
    let patch = g.patch_len();
    debug_assert!(cols.len() >= count * oh * ow * patch);
    for s in 0..count {
        let img = &x[(start + s) * h * w * c..(start + s + 1) * h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((s * oh + oy) * ow + ox) * patch;
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - p as isize;
                    let dst = &mut cols[row + ky * k * c..row + (ky + 1) * k * c];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - p as isize;
                        let d = &mut dst[kx * c..(kx + 1) * c];
                        if ix < 0 || ix >= w as isize {
                            d.iter_mut().for_each(|v| *v = T::zero());
                        } else {
                            let src = (iy * w + ix as usize) * c;
                            d.copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add patch gradients back into `dx` for samples `[start, start + count)`.
pub(crate) fn col2im<T: Elem>(dcols: &[T], g: &ConvGeometry, start: usize, count: usize, dx: &mut [T]) {
    let (h, w, c, k, p) = (g.height, g.width, g.in_channels, g.kernel, g.padding);
    let (oh, ow) = (g.out_height(), g.out_width());
    let patch = g.patch_len();
    for s in 0..count {
        let img = &mut dx[(start + s) * h * w * c..(start + s + 1) * h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((s * oh + oy) * ow + ox) * patch;
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy * w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            img[dst + ch] += dcols[src + ch];
                        }
                    }
                }
            }
        }
    }
}
