//! Raw slice kernels behind the graph ops. Layout is NCHW throughout.

use crate::tensor::Scalar;

/// Geometry shared by convolution and transposed convolution.
///
/// `h`/`w` is the large grid (conv input, transposed-conv output) and
/// `oh`/`ow` the small grid (conv output, transposed-conv input).
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    #[inline]
    fn src(&self, i: usize, j: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (i * self.stride + ki) as isize - self.pad as isize;
        let x = (j * self.stride + kj) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfold `x` (shape `[n, c, h, w]`) into `[c*kh*kw, n*oh*ow]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for i in 0..g.oh {
                        for j in 0..g.ow {
                            if let Some((y, xx)) = g.src(i, j, ki, kj) {
                                dst[n * plane + i * g.ow + j] = x[base + y * g.w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the large grid.
pub fn col2im<T: Scalar>(cols_data: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for i in 0..g.oh {
                        for j in 0..g.ow {
                            if let Some((y, xx)) = g.src(i, j, ki, kj) {
                                out[base + y * g.w + xx] =
                                    out[base + y * g.w + xx] + src[n * plane + i * g.ow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[n, c, p]` -> `[c, n*p]`.
pub fn nc_to_cn<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let s = (ni * c + ci) * p;
            let d = ci * n * p + ni * p;
            out[d..d + p].copy_from_slice(&x[s..s + p]);
        }
    }
    out
}

/// `[c, n*p]` -> `[n, c, p]`.
pub fn cn_to_nc<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let d = (ni * c + ci) * p;
            let s = ci * n * p + ni * p;
            out[d..d + p].copy_from_slice(&x[s..s + p]);
        }
    }
    out
}

/// Row-major `a[m,k] * b[k,n]`, either operand optionally transposed in place.
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, &mut c, n as isize, 1, T::zero());
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Statistics per channel over (N, H, W).
    Batch,
    /// Statistics per (sample, channel) over (H, W).
    Instance,
    /// Statistics per sample over (C, H, W).
    Layer,
}

/// Group index of every element of an `[n, c, p]` tensor plus the group count.
pub fn norm_groups(kind: NormKind, n: usize, c: usize, p: usize) -> (Vec<usize>, usize) {
    let mut ids = Vec::with_capacity(n * c * p);
    for ni in 0..n {
        for ci in 0..c {
            let gid = match kind {
                NormKind::Batch => ci,
                NormKind::Instance => ni * c + ci,
                NormKind::Layer => ni,
            };
            ids.extend(std::iter::repeat_n(gid, p));
        }
    }
    let count = match kind {
        NormKind::Batch => c,
        NormKind::Instance => n * c,
        NormKind::Layer => n,
    };
    (ids, count)
}

/// Per-group biased mean and variance.
pub fn group_stats<T: Scalar>(x: &[T], ids: &[usize], groups: usize) -> (Vec<T>, Vec<T>) {
    let mut sum = vec![0.0f64; groups];
    let mut cnt = vec![0usize; groups];
    for (v, &g) in x.iter().zip(ids) {
        sum[g] += v.f64();
        cnt[g] += 1;
    }
    let mean: Vec<f64> = sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect();
    let mut var = vec![0.0f64; groups];
    for (v, &g) in x.iter().zip(ids) {
        let d = v.f64() - mean[g];
        var[g] += d * d;
    }
    let var = var.iter().zip(&cnt).map(|(s, &c)| T::c(s / c as f64)).collect();
    (mean.into_iter().map(T::c).collect(), var)
}
