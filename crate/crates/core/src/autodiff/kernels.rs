//! Raw buffer kernels shared by the forward and backward passes.

use crate::tensor::Element;

/// Geometry of a strided, zero-padded sliding window over a `c x h x w` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds an image into a `(c*k*k) x (oh*ow)` patch matrix.
pub(crate) fn im2col<T: Element>(img: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![T::zero(); g.col_rows() * oh * ow];
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let y = (oi * g.stride + ki) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    let drow = &mut dst[oi * ow..(oi + 1) * ow];
                    if g.stride == 1 {
                        // contiguous run of valid x positions
                        let lo = (pad - kj as isize).max(0) as usize;
                        let hi = ((g.width as isize + pad - kj as isize).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let x0 = (lo as isize + kj as isize - pad) as usize;
                            drow[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
                        }
                    } else {
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let x = (oj * g.stride + kj) as isize - pad;
                            if x >= 0 && x < g.width as isize {
                                *d = src[x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back into an image.
pub(crate) fn col2im_add<T: Element>(cols: &[T], g: ConvGeom, img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let y = (oi * g.stride + ki) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    let srow = &src[oi * ow..(oi + 1) * ow];
                    for (oj, &v) in srow.iter().enumerate() {
                        let x = (oj * g.stride + kj) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
