use alloc::vec;

use super::{Graph, Op, Sink, Var};
use crate::error::shape_err;
use crate::scalar::gemm;
use crate::{Result, Scalar, Tensor};

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, pad: kernel / 2, groups: 1 }
    }
}

struct Dims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn dims(x: &[usize], w: &[usize], geom: &ConvGeom) -> Result<Dims> {
    let (&[n, ci, h, wd], &[co, cig, k, k2]) = (x, w) else {
        return Err(shape_err!("conv2d expects rank-4 input and kernel, got {:?} and {:?}", x, w));
    };
    let g = geom.groups;
    if g == 0 || ci % g != 0 || co % g != 0 || cig != ci / g || k != k2 {
        return Err(shape_err!("conv2d: kernel {:?} incompatible with input {:?} (groups {})", w, x, g));
    }
    if geom.stride == 0 || h + 2 * geom.pad < k || wd + 2 * geom.pad < k {
        return Err(shape_err!("conv2d: spatial extent {}x{} smaller than kernel {}", h, wd, k));
    }
    let ho = (h + 2 * geom.pad - k) / geom.stride + 1;
    let wo = (wd + 2 * geom.pad - k) / geom.stride + 1;
    Ok(Dims { n, ci, h, w: wd, co, k, ho, wo })
}

/// Unfolds one group of one batch item into `cig·k·k` rows of `ho·wo`
/// columns, rows `ld` apart.
fn im2col<T: Scalar>(x: &[T], d: &Dims, cig: usize, geom: &ConvGeom, col: &mut [T], ld: usize) {
    let (k, s, p) = (d.k, geom.stride, geom.pad);
    let plane = d.ho * d.wo;
    for ci in 0..cig {
        let src = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * ld..][..plane];
                let (lo, hi) = valid_range(d.wo, d.w, s, kx, p);
                for oy in 0..d.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&line[lo + kx - p..hi + kx - p]);
                    } else {
                        for (ox, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = line[(lo + ox) * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &Dims, cig: usize, geom: &ConvGeom, gx: &mut [T], ld: usize) {
    let (k, s, p) = (d.k, geom.stride, geom.pad);
    let plane = d.ho * d.wo;
    for ci in 0..cig {
        let dst = &mut gx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * ld..][..plane];
                let (lo, hi) = valid_range(d.wo, d.w, s, kx, p);
                if lo == hi {
                    continue;
                }
                for oy in 0..d.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &row[oy * d.wo + lo..oy * d.wo + hi];
                    if s == 1 {
                        for (o, &v) in line[lo + kx - p..hi + kx - p].iter_mut().zip(src) {
                            *o += v;
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            line[(lo + ox) * s + kx - p] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` whose input column `ox*s + kx - p` lies inside `[0, w)`.
#[inline]
fn valid_range(len_out: usize, len_in: usize, s: usize, kx: usize, p: usize) -> (usize, usize) {
    let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 }.min(len_out);
    let hi = if len_in + p > kx { ((len_in + p - kx - 1) / s + 1).min(len_out) } else { 0 };
    (lo, hi.max(lo))
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut total = acc.iter().copied().sum::<T>();
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

fn is_pointwise(d: &Dims, geom: &ConvGeom) -> bool {
    d.k == 1 && geom.stride == 1 && geom.pad == 0
}

/// Upper bound on the elements of one unfolded batch chunk.
const COL_BUDGET: usize = 1 << 16;

fn images_per_gemm(kc: usize, plane: usize, n: usize) -> usize {
    (COL_BUDGET / (kc * plane).max(1)).clamp(1, n.max(1))
}

/// [`im2col`], or a plain row copy for pointwise kernels.
fn unfold<T: Scalar>(x: &[T], d: &Dims, cig: usize, geom: &ConvGeom, col: &mut [T], ld: usize) {
    if is_pointwise(d, geom) {
        let plane = d.h * d.w;
        for r in 0..cig {
            col[r * ld..][..plane].copy_from_slice(&x[r * plane..(r + 1) * plane]);
        }
    } else {
        im2col(x, d, cig, geom, col, ld);
    }
}

/// Adjoint of [`unfold`], accumulating into `gx`.
fn fold<T: Scalar>(col: &[T], d: &Dims, cig: usize, geom: &ConvGeom, gx: &mut [T], ld: usize) {
    if is_pointwise(d, geom) {
        let plane = d.h * d.w;
        for r in 0..cig {
            for (o, &v) in gx[r * plane..(r + 1) * plane].iter_mut().zip(&col[r * ld..][..plane]) {
                *o += v;
            }
        }
    } else {
        col2im(col, d, cig, geom, gx, ld);
    }
}

impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation with zero padding, optional bias and channel groups.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let d = dims(self.shape(x), self.shape(w), &geom)?;
        if let Some(b) = b {
            if self.shape(b) != [d.co] {
                return Err(shape_err!("conv2d bias shape {:?}, expected [{}]", self.shape(b), d.co));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); d.n * d.co * d.ho * d.wo];
        let plane = d.ho * d.wo;
        let g = geom.groups;
        let (cig, cog) = (d.ci / g, d.co / g);
        if g == d.ci && d.co == d.ci {
            depthwise_forward(xv, wv, &d, &geom, &mut out);
        } else {
            let kc = cig * d.k * d.k;
            let nb = images_per_gemm(kc, plane, d.n);
            let mut col = vec![T::zero(); kc * nb * plane];
            let mut res = vec![T::zero(); cog * nb * plane];
            for n0 in (0..d.n).step_by(nb) {
                let m = nb.min(d.n - n0);
                let ld = m * plane;
                for gi in 0..g {
                    for j in 0..m {
                        let xs = &xv[((n0 + j) * d.ci + gi * cig) * d.h * d.w..][..cig * d.h * d.w];
                        unfold(xs, &d, cig, &geom, &mut col[j * plane..], ld);
                    }
                    let ws = &wv[gi * cog * kc..(gi + 1) * cog * kc];
                    gemm(cog, kc, ld, ws, false, &col, false, T::zero(), &mut res);
                    for j in 0..m {
                        for c in 0..cog {
                            out[((n0 + j) * d.co + gi * cog + c) * plane..][..plane]
                                .copy_from_slice(&res[c * ld + j * plane..][..plane]);
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for n in 0..d.n {
                for c in 0..d.co {
                    let bias = bv[c];
                    out[(n * d.co + c) * plane..][..plane].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::from_vec(&[d.n, d.co, d.ho, d.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], d: &Dims, geom: &ConvGeom, out: &mut [T]) {
    let (k, s, p) = (d.k, geom.stride, geom.pad);
    for n in 0..d.n {
        for c in 0..d.ci {
            let src = &x[(n * d.ci + c) * d.h * d.w..][..d.h * d.w];
            let dst = &mut out[(n * d.ci + c) * d.ho * d.wo..][..d.ho * d.wo];
            let ker = &w[c * k * k..(c + 1) * k * k];
            for oy in 0..d.ho {
                let orow = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let irow = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for kx in 0..k {
                        let wv = ker[ky * k + kx];
                        let (lo, hi) = valid_range(d.wo, d.w, s, kx, p);
                        if lo == hi {
                            continue;
                        }
                        if s == 1 {
                            for (o, &i) in orow[lo..hi].iter_mut().zip(&irow[lo + kx - p..hi + kx - p]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * irow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    d: &Dims,
    geom: &ConvGeom,
    g: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (k, s, p) = (d.k, geom.stride, geom.pad);
    for n in 0..d.n {
        for c in 0..d.ci {
            let base_in = (n * d.ci + c) * d.h * d.w;
            let base_out = (n * d.ci + c) * d.ho * d.wo;
            let ker = &w[c * k * k..(c + 1) * k * k];
            for oy in 0..d.ho {
                let grow = &g[base_out + oy * d.wo..][..d.wo];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let ioff = base_in + iy as usize * d.w;
                    for kx in 0..k {
                        let (lo, hi) = valid_range(d.wo, d.w, s, kx, p);
                        if lo == hi {
                            continue;
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let wv = ker[ky * k + kx];
                            let row = &mut gx[ioff..ioff + d.w];
                            if s == 1 {
                                for (o, &gv) in row[lo + kx - p..hi + kx - p].iter_mut().zip(&grow[lo..hi]) {
                                    *o += wv * gv;
                                }
                            } else {
                                for ox in lo..hi {
                                    row[ox * s + kx - p] += wv * grow[ox];
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            let row = &x[ioff..ioff + d.w];
                            let mut acc = T::zero();
                            if s == 1 {
                                acc = dot(&row[lo + kx - p..hi + kx - p], &grow[lo..hi]);
                            } else {
                                for ox in lo..hi {
                                    acc += row[ox * s + kx - p] * grow[ox];
                                }
                            }
                            gw[c * k * k + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_backward<T: Scalar>(
    sink: &mut Sink<'_, T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    g: &Tensor<T>,
) {
    let xt = sink.value(x);
    let wt = sink.value(w);
    let d = dims(xt.shape(), wt.shape(), geom).expect("validated in forward");
    let gd = g.data();
    let plane = d.ho * d.wo;
    if let Some(b) = b {
        if let Some(gb) = sink.slot(b) {
            for n in 0..d.n {
                for (c, o) in gb.iter_mut().enumerate() {
                    *o += gd[(n * d.co + c) * plane..][..plane].iter().copied().sum::<T>();
                }
            }
        }
    }
    let grp = geom.groups;
    if grp == d.ci && d.co == d.ci {
        let mut gw = sink.slot(w).map(|s| vec![T::zero(); s.len()]);
        depthwise_backward(xt.data(), wt.data(), &d, geom, gd, None, gw.as_deref_mut());
        if let Some(gw) = gw {
            sink.accumulate(w, &gw);
        }
        if let Some(gx) = sink.slot(x) {
            depthwise_backward(xt.data(), wt.data(), &d, geom, gd, Some(gx), None);
        }
        return;
    }
    let (cig, cog) = (d.ci / grp, d.co / grp);
    let kc = cig * d.k * d.k;
    let nb = images_per_gemm(kc, plane, d.n);
    let mut col = vec![T::zero(); kc * nb * plane];
    let mut gcol = vec![T::zero(); cog * nb * plane];
    for n0 in (0..d.n).step_by(nb) {
        let m = nb.min(d.n - n0);
        let ld = m * plane;
        for gi in 0..grp {
            for j in 0..m {
                for c in 0..cog {
                    gcol[c * ld + j * plane..][..plane]
                        .copy_from_slice(&gd[((n0 + j) * d.co + gi * cog + c) * plane..][..plane]);
                }
            }
            if let Some(gw) = sink.slot(w) {
                for j in 0..m {
                    let xs = &xt.data()[((n0 + j) * d.ci + gi * cig) * d.h * d.w..][..cig * d.h * d.w];
                    unfold(xs, &d, cig, geom, &mut col[j * plane..], ld);
                }
                let gws = &mut gw[gi * cog * kc..(gi + 1) * cog * kc];
                gemm(cog, ld, kc, &gcol, false, &col, true, T::one(), gws);
            }
            if let Some(gx) = sink.slot(x) {
                let ws = &wt.data()[gi * cog * kc..(gi + 1) * cog * kc];
                gemm(kc, cog, ld, ws, true, &gcol, false, T::zero(), &mut col);
                for j in 0..m {
                    let gxs = &mut gx[((n0 + j) * d.ci + gi * cig) * d.h * d.w..][..cig * d.h * d.w];
                    fold(&col[j * plane..], &d, cig, geom, gxs, ld);
                }
            }
        }
    }
}
