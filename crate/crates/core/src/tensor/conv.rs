//! im2col lowering for 2-D convolution on a single C×H×W image.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
            return None;
        }
        let out_h = (height + 2 * pad - kh) / stride + 1;
        let out_w = (width + 2 * pad - kw) / stride + 1;
        Some(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Rows of the column matrix: C·kh·kw.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Writes the (C·kh·kw) × (out_h·out_w) column matrix of `img` into `cols`.
pub(crate) fn im2col<T: Copy + Default>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let p = g.out_len();
    let zero = T::default();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(zero);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kj);
                        if lo == hi {
                            out_row.fill(zero);
                            continue;
                        }
                        out_row[..lo].fill(zero);
                        out_row[hi..].fill(zero);
                        let s0 = (lo + kj).wrapping_sub(g.pad);
                        out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        continue;
                    }
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.width as isize {
                            zero
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto an image gradient.
pub(crate) fn col2im_add<T: Copy + std::ops::Add<Output = T>>(
    g: &ConvGeom,
    cols: &[T],
    img: &mut [T],
) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kj);
                        if lo < hi {
                            let s0 = lo + kj - g.pad;
                            for (d, &v) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                                *d = *d + v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Range of output columns `[lo, hi)` that read an in-bounds input column
/// for kernel column `kj` at stride 1.
#[inline]
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.out_w);
    let hi = (g.width + g.pad).saturating_sub(kj).min(g.out_w).max(lo);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_then_col2im_counts_patch_coverage() {
        let g = ConvGeom::new(1, 3, 3, 3, 3, 1, 1).unwrap();
        let ones = vec![1.0f64; 9];
        let mut cols = vec![0.0; g.patch_len() * g.out_len()];
        im2col(&g, &ones, &mut cols);
        let mut back = vec![0.0; 9];
        col2im_add(&g, &cols, &mut back);
        // each pixel is covered by as many 3x3 windows as fit around it
        assert_eq!(back, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn geometry_rejects_oversized_kernel() {
        assert!(ConvGeom::new(1, 2, 2, 5, 5, 1, 0).is_none());
        assert!(ConvGeom::new(1, 4, 4, 3, 3, 0, 1).is_none());
    }
}
