//! Raw convolution and pooling kernels on flat NCHW buffers.

use super::{gemm, Float, Trans};

/// Output extent of a strided window: `floor((n + 2·pad − k) / stride) + 1`.
pub fn conv_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > n + 2 * pad {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies in `0..w`.
fn valid_cols(w: usize, ow: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    let hi = if w + pad > kj {
        ((w + pad - kj - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// `dst[y·w + x] = src[(y+dy)·w + x+dx]`, zero outside the source plane.
/// Same-size planes; `lo..hi` are the columns whose source lies inside.
#[allow(clippy::too_many_arguments)]
fn shifted_copy<T: Float>(
    src: &[T],
    dst: &mut [T],
    w: usize,
    h: usize,
    dy: isize,
    dx: isize,
    lo: usize,
    hi: usize,
) {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy).clamp(0, h as isize) as usize;
    if y_lo >= y_hi {
        dst.fill(T::zero());
        return;
    }
    dst[..y_lo * w].fill(T::zero());
    dst[y_hi * w..].fill(T::zero());
    // One contiguous run covers every valid row; the cells it wraps into
    // across row ends are the out-of-range columns, zeroed afterwards.
    let start = y_lo * w + lo;
    let end = (y_hi - 1) * w + hi;
    let off = ((y_lo as isize + dy) * w as isize + lo as isize + dx) as usize;
    dst[start..end].copy_from_slice(&src[off..off + end - start]);
    // Column-wise so the one or two cells per row do not become memset calls.
    for x in (0..lo).chain(hi..w) {
        for y in y_lo..y_hi {
            dst[y * w + x] = T::zero();
        }
    }
}

/// Unfolds one `C×H×W` sample into a `(C·k·k) × (OH·OW)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(w, ow, kj, stride, pad);
                if stride == 1 && ow == w && oh == h && lo < hi {
                    shifted_copy(
                        src,
                        dst,
                        w,
                        h,
                        ki as isize - pad as isize,
                        kj as isize - pad as isize,
                        lo,
                        hi,
                    );
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = lo * stride + kj - pad;
                    if stride == 1 {
                        line[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                    } else {
                        for (v, &s) in line[lo..hi]
                            .iter_mut()
                            .zip(srow[start..].iter().step_by(stride))
                        {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a sample plane.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(w, ow, kj, stride, pad);
                if lo >= hi {
                    continue;
                }
                let start = lo * stride + kj - pad;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    if stride == 1 {
                        for (d, &v) in drow[start..start + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in drow[start..].iter_mut().step_by(stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.batch * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        let cols_ref = if g.is_pointwise() {
            xb
        } else {
            im2col(
                xb, g.cin, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, &mut cols,
            );
            &cols
        };
        gemm(
            g.cout,
            g.patch(),
            plane,
            weight,
            Trans::No,
            cols_ref,
            Trans::No,
            T::zero(),
            ob,
        );
    }
    out
}

/// Returns `(d_input, d_weight)` for an upstream gradient `dout`.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * g.in_sample()]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.cout * patch]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcols = vec![
        T::zero();
        if need_dx && !g.is_pointwise() {
            patch * plane
        } else {
            0
        }
    ];
    for b in 0..g.batch {
        let xb = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        let db = &dout[b * g.cout * plane..(b + 1) * g.cout * plane];
        if let Some(dw) = dw.as_mut() {
            let cols_ref = if g.is_pointwise() {
                xb
            } else {
                im2col(
                    xb, g.cin, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, &mut cols,
                );
                &cols
            };
            // dW += dOut_b · cols_bᵀ, accumulated in sample order.
            gemm(
                g.cout,
                plane,
                patch,
                db,
                Trans::No,
                cols_ref,
                Trans::Yes,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.in_sample()..(b + 1) * g.in_sample()];
            if g.is_pointwise() {
                gemm(
                    patch,
                    g.cout,
                    plane,
                    weight,
                    Trans::Yes,
                    db,
                    Trans::No,
                    T::zero(),
                    dxb,
                );
            } else {
                gemm(
                    patch,
                    g.cout,
                    plane,
                    weight,
                    Trans::Yes,
                    db,
                    Trans::No,
                    T::zero(),
                    &mut dcols,
                );
                col2im(
                    &dcols, g.cin, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, dxb,
                );
            }
        }
    }
    (dx, dw)
}

/// Max pooling over `k×k` windows; padded cells never win. Returns values and argmax offsets.
#[allow(clippy::too_many_arguments)]
pub(crate) fn max_pool_forward<T: Float>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = base;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = base + iy as usize * w + ix as usize;
                        if x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    (out, arg)
}
