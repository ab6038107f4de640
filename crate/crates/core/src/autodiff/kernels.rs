//! Forward/backward numeric kernels shared by the graph ops.

use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols_width(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfold the whole batch into a `[C·kh·kw, B·H'·W']` matrix.
fn im2col<T: Element>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let width = g.cols_width();
    let mut cols = vec![T::zero(); g.patch() * width];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * width..(row + 1) * width];
                for b in 0..g.batch {
                    let plane = &input[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an input-shaped buffer.
fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let width = g.cols_width();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * width..(row + 1) * width];
                for b in 0..g.batch {
                    let plane = &mut out[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                plane[iy as usize * g.width + ix as usize] =
                                    plane[iy as usize * g.width + ix as usize] + src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let cols = im2col(g, input);
    let width = g.cols_width();
    let patch = g.patch();
    // [F, B·H'·W']
    let mut fm = vec![T::zero(); g.filters * width];
    T::gemm(
        g.filters, patch, width, kernel, patch as isize, 1, &cols, width as isize, 1, T::zero(), &mut fm,
    );
    let spatial = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); g.batch * g.filters * spatial];
    for f in 0..g.filters {
        for b in 0..g.batch {
            let src = &fm[f * width + b * spatial..][..spatial];
            let dst = &mut out[(b * g.filters + f) * spatial..][..spatial];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias[f];
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let width = g.cols_width();
    let patch = g.patch();
    let spatial = g.out_h() * g.out_w();
    // Regroup grad_out [B,F,S] into [F, B·S].
    let mut gfm = vec![T::zero(); g.filters * width];
    for b in 0..g.batch {
        for f in 0..g.filters {
            gfm[f * width + b * spatial..][..spatial]
                .copy_from_slice(&grad_out[(b * g.filters + f) * spatial..][..spatial]);
        }
    }
    let bias = want.2.then(|| {
        (0..g.filters)
            .map(|f| {
                gfm[f * width..(f + 1) * width]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v)
            })
            .collect()
    });
    let kernel_grad = want.1.then(|| {
        let cols = im2col(g, input);
        let mut dk = vec![T::zero(); g.filters * patch];
        // dK = gfm · colsᵀ
        T::gemm(
            g.filters, width, patch, &gfm, width as isize, 1, &cols, 1, width as isize, T::zero(), &mut dk,
        );
        dk
    });
    let input_grad = want.0.then(|| {
        let mut dcols = vec![T::zero(); patch * width];
        // dcols = Kᵀ · gfm
        T::gemm(
            patch, g.filters, width, kernel, 1, patch as isize, &gfm, width as isize, 1, T::zero(), &mut dcols,
        );
        let mut dx = vec![T::zero(); input.len()];
        col2im(g, &dcols, &mut dx);
        dx
    });
    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias,
    }
}

/// Max pooling; returns the output and, per output element, the flat input index of the
/// first (row-major) maximal element in its window.
pub(crate) fn maxpool_forward<T: Element>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = input[best_idx];
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// `out[i,j] = sum_p a[i,p] * b[j,p]` for row-major `a: [m,k]`, `b: [n,k]`.
pub(crate) fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, T::zero(), &mut out);
    out
}

/// `out[i,j] = sum_p a[i,p] * b[p,j]` for row-major `a: [m,k]`, `b: [k,n]`.
pub(crate) fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, T::zero(), &mut out);
    out
}

/// `out[i,j] = sum_p a[p,i] * b[p,j]` for row-major `a: [k,m]`, `b: [k,n]`.
pub(crate) fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, T::zero(), &mut out);
    out
}
