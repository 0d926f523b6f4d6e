//! Raw forward/backward kernels behind the tape operations.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output extent for one spatial axis, or `None` if the kernel does not fit.
    pub fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Output columns `ox` whose input column `ox·stride + j − pad` lies inside `[0, w)`.
fn valid_range(out: usize, input: usize, stride: usize, pad: usize, j: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j).div_ceil(stride);
    let hi = (input + pad).saturating_sub(j).div_ceil(stride);
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

/// Unfolds `x` (`[N, C, H, W]`) into a `[C·kh·kw, N·Ho·Wo]` matrix.
fn im2col<R: Real>(x: &[R], g: &ConvGeom) -> Vec<R> {
    let ncol = g.cols();
    let hw_out = g.ho * g.wo;
    let mut cols = vec![R::ZERO; g.ckk() * ncol];
    for c in 0..g.c {
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, g.pad, i);
            for j in 0..g.kw {
                let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, g.pad, j);
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut cols[row * ncol..(row + 1) * ncol];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * hw_out..(n + 1) * hw_out];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + i - g.pad;
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let d = &mut dst[oy * g.wo + xlo..oy * g.wo + xhi];
                        let ix0 = xlo * g.stride + j - g.pad;
                        if g.stride == 1 {
                            d.copy_from_slice(&src[ix0..ix0 + d.len()]);
                        } else {
                            for (k, v) in d.iter_mut().enumerate() {
                                *v = src[ix0 + k * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column matrix back onto `dx`, accumulating overlaps.
fn col2im<R: Real>(cols: &[R], g: &ConvGeom, dx: &mut [R]) {
    let ncol = g.cols();
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, g.pad, i);
            for j in 0..g.kw {
                let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, g.pad, j);
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &cols[row * ncol..(row + 1) * ncol];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * hw_out..(n + 1) * hw_out];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + i - g.pad;
                        let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                        let s = &src[oy * g.wo + xlo..oy * g.wo + xhi];
                        let ix0 = xlo * g.stride + j - g.pad;
                        if g.stride == 1 {
                            for (d, &v) in dst[ix0..ix0 + s.len()].iter_mut().zip(s) {
                                *d += v;
                            }
                        } else {
                            for (k, &v) in s.iter().enumerate() {
                                dst[ix0 + k * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<R: Real>(x: &[R], w: &[R], b: Option<&[R]>, g: &ConvGeom) -> Vec<R> {
    let ncol = g.cols();
    let ckk = g.ckk();
    let hw_out = g.ho * g.wo;
    let cols = im2col(x, g);
    let mut yt = vec![R::ZERO; g.o * ncol];
    R::gemm(g.o, ckk, ncol, w, (ckk as isize, 1), &cols, (ncol as isize, 1), R::ZERO, &mut yt, (ncol as isize, 1));
    let mut y = vec![R::ZERO; g.n * g.o * hw_out];
    for o in 0..g.o {
        let bias = b.map_or(R::ZERO, |b| b[o]);
        for n in 0..g.n {
            let src = &yt[o * ncol + n * hw_out..o * ncol + (n + 1) * hw_out];
            let dst = &mut y[(n * g.o + o) * hw_out..(n * g.o + o + 1) * hw_out];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    y
}

pub(crate) struct ConvGrads<R> {
    pub dx: Option<Vec<R>>,
    pub dw: Vec<R>,
    pub db: Vec<R>,
}

pub(crate) fn conv2d_backward<R: Real>(x: &[R], w: &[R], dy: &[R], g: &ConvGeom, need_dx: bool) -> ConvGrads<R> {
    let ncol = g.cols();
    let ckk = g.ckk();
    let hw_out = g.ho * g.wo;
    let mut dyt = vec![R::ZERO; g.o * ncol];
    let mut db = vec![R::ZERO; g.o];
    for n in 0..g.n {
        for o in 0..g.o {
            let src = &dy[(n * g.o + o) * hw_out..(n * g.o + o + 1) * hw_out];
            dyt[o * ncol + n * hw_out..o * ncol + (n + 1) * hw_out].copy_from_slice(src);
        }
    }
    for o in 0..g.o {
        db[o] = dyt[o * ncol..(o + 1) * ncol].iter().copied().sum();
    }
    let cols = im2col(x, g);
    let mut dw = vec![R::ZERO; g.o * ckk];
    R::gemm(g.o, ncol, ckk, &dyt, (ncol as isize, 1), &cols, (1, ncol as isize), R::ZERO, &mut dw, (ckk as isize, 1));
    let dx = if need_dx {
        let mut dcols = cols;
        R::gemm(ckk, g.o, ncol, w, (1, ckk as isize), &dyt, (ncol as isize, 1), R::ZERO, &mut dcols, (ncol as isize, 1));
        let mut dx = vec![R::ZERO; x.len()];
        col2im(&dcols, g, &mut dx);
        Some(dx)
    } else {
        None
    };
    ConvGrads { dx, dw, db }
}

/// Max pooling over `[N, C, H, W]`; padded cells never win. Returns values and
/// the flat input index of each winner.
pub(crate) fn maxpool_forward<R: Real>(x: &[R], g: &ConvGeom) -> (Vec<R>, Vec<usize>) {
    let hw_out = g.ho * g.wo;
    let mut y = vec![R::ZERO; g.n * g.c * hw_out];
    let mut arg = vec![0usize; y.len()];
    for nc in 0..g.n * g.c {
        let base = nc * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = R::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = nc * hw_out + oy * g.wo + ox;
                y[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (y, arg)
}
