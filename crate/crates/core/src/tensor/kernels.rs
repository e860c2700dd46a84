//! Forward/backward kernels over raw slices. The graph owns bookkeeping;
//! these functions only do arithmetic.

use super::Element;

/// Output length of a strided, padded convolution along one axis, or `None`
/// when the kernel does not fit.
pub fn conv2d_output_size(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `[C,H,W]` image into a `[C*kh*kw, out_h*out_w]` matrix.
pub(crate) fn im2col<T: Element>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n_cols = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into an image.
pub(crate) fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let n_cols = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Half-open window `[floor(i*len/out), ceil((i+1)*len/out))`.
pub(crate) fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Max-pool the crop `rows x cols` of one `[H,W]` plane into `out_h x out_w`
/// cells, writing values and flat argmax indices into the plane. Ties keep
/// the first maximum in row-major order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn region_max_pool_plane<T: Element>(
    plane: &[T],
    width: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    out_h: usize,
    out_w: usize,
    values: &mut [T],
    argmax: &mut [usize],
) {
    let crop_h = rows.1 - rows.0;
    let crop_w = cols.1 - cols.0;
    for oy in 0..out_h {
        let (y0, y1) = pool_window(oy, crop_h, out_h);
        for ox in 0..out_w {
            let (x0, x1) = pool_window(ox, crop_w, out_w);
            let mut best = T::neg_infinity();
            let mut best_idx = usize::MAX;
            for y in (rows.0 + y0)..(rows.0 + y1) {
                for x in (cols.0 + x0)..(cols.0 + x1) {
                    let idx = y * width + x;
                    let v = plane[idx];
                    if best_idx == usize::MAX || v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
            }
            values[oy * out_w + ox] = best;
            argmax[oy * out_w + ox] = best_idx;
        }
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place softmax over each contiguous row of length `d`.
pub(crate) fn softmax_rows<T: Element>(data: &mut [T], d: usize) {
    for row in data.chunks_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}
