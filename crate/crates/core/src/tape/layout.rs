use alloc::vec::Vec;

use super::{Graph, Op, Sink, Var};
use crate::error::shape_err;
use crate::{Result, Scalar, Tensor};

/// Mirror index without edge repetition (`-1 → 1`, `n → n-2`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

impl<T: Scalar> Graph<T> {
    /// Reflect padding of both spatial axes by `pad` pixels.
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if pad >= h || pad >= w {
            return Err(shape_err!("reflect pad {} needs spatial extent > pad, got {}x{}", pad, h, w));
        }
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in src.chunks_exact(h * w) {
            for oy in 0..ho {
                let iy = reflect(oy as isize - pad as isize, h);
                for ox in 0..wo {
                    out.push(plane[iy * w + reflect(ox as isize - pad as isize, w)]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::PadReflect { x, pad }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [n, _, h, w] = self.value(*first).dims4()?;
        let mut total = 0;
        for &v in xs {
            let [n2, c, h2, w2] = self.value(v).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(shape_err!("concat: {:?} vs {:?}", self.shape(v), self.shape(*first)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(n * total * h * w);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[1] * h * w;
                out.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }))
    }

    /// Channels `start .. start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if start + len > c {
            return Err(shape_err!("channel slice {}..{} out of {}", start, start + len, c));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * h * w);
        for b in 0..n {
            out.extend_from_slice(&src[(b * c + start) * h * w..(b * c + start + len) * h * w]);
        }
        let value = Tensor::from_vec(&[n, len, h, w], out)?;
        Ok(self.push(value, Op::SliceChannels { x, start }))
    }

    /// Output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if perm.len() != c || perm.iter().any(|&p| p >= c) {
            return Err(shape_err!("channel permutation of length {} for {} channels", perm.len(), c));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for b in 0..n {
            for &p in perm {
                out.extend_from_slice(&src[(b * c + p) * h * w..][..h * w]);
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::PermuteChannels { x, perm: perm.to_vec() }))
    }

    /// Reorders spatial positions per batch item: output token `i` (raster
    /// index) is input token `index[n][i]`.
    pub fn permute_tokens(&mut self, x: Var, index: Vec<Vec<u32>>) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let l = h * w;
        if index.len() != n || index.iter().any(|ix| ix.len() != l || ix.iter().any(|&i| i as usize >= l)) {
            return Err(shape_err!("token index does not match {} batch items of {} tokens", n, l));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for (b, ix) in index.iter().enumerate() {
            for ch in 0..c {
                let plane = &src[(b * c + ch) * l..][..l];
                out.extend(ix.iter().map(|&i| plane[i as usize]));
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::PermuteTokens { x, index }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if factor == 0 {
            return Err(shape_err!("upsample factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in src.chunks_exact(h * w) {
            for oy in 0..ho {
                let row = &plane[(oy / factor) * w..][..w];
                for ox in 0..wo {
                    out.push(row[ox / factor]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::UpsampleNearest { x, factor }))
    }

    /// Global average pool to `n × c × 1 × 1`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let data = self.value(x).data().chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.push(value, Op::MeanSpatial { x }))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::from_f64(t.len() as f64);
        self.push(Tensor::scalar(m), Op::MeanAll { x })
    }
}

pub(super) fn pad_reflect_backward<T: Scalar>(sink: &mut Sink<'_, T>, x: Var, pad: usize, g: &Tensor<T>) {
    let [_, _, h, w] = sink.value(x).dims4().expect("rank 4");
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    if let Some(gx) = sink.slot(x) {
        for (gp, op) in gx.chunks_exact_mut(h * w).zip(g.data().chunks_exact(ho * wo)) {
            for oy in 0..ho {
                let iy = reflect(oy as isize - pad as isize, h);
                for ox in 0..wo {
                    gp[iy * w + reflect(ox as isize - pad as isize, w)] += op[oy * wo + ox];
                }
            }
        }
    }
}

pub(super) fn concat_backward<T: Scalar>(sink: &mut Sink<'_, T>, xs: &[Var], g: &Tensor<T>) {
    let [n, total, h, w] = g.dims4().expect("rank 4");
    let mut start = 0;
    for &v in xs {
        let c = sink.value(v).shape()[1];
        if let Some(gx) = sink.slot(v) {
            for b in 0..n {
                let src = &g.data()[(b * total + start) * h * w..][..c * h * w];
                for (o, &s) in gx[b * c * h * w..(b + 1) * c * h * w].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        start += c;
    }
}

pub(super) fn slice_backward<T: Scalar>(sink: &mut Sink<'_, T>, x: Var, start: usize, g: &Tensor<T>) {
    let [n, c, h, w] = sink.value(x).dims4().expect("rank 4");
    let len = g.shape()[1];
    if let Some(gx) = sink.slot(x) {
        for b in 0..n {
            let dst = &mut gx[(b * c + start) * h * w..][..len * h * w];
            for (o, &s) in dst.iter_mut().zip(&g.data()[b * len * h * w..][..len * h * w]) {
                *o += s;
            }
        }
    }
}

pub(super) fn permute_channels_backward<T: Scalar>(
    sink: &mut Sink<'_, T>,
    x: Var,
    perm: &[usize],
    g: &Tensor<T>,
) {
    let [n, c, h, w] = g.dims4().expect("rank 4");
    if let Some(gx) = sink.slot(x) {
        for b in 0..n {
            for (i, &p) in perm.iter().enumerate() {
                let src = &g.data()[(b * c + i) * h * w..][..h * w];
                for (o, &s) in gx[(b * c + p) * h * w..][..h * w].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
    }
}

pub(super) fn permute_tokens_backward<T: Scalar>(
    sink: &mut Sink<'_, T>,
    x: Var,
    index: &[Vec<u32>],
    g: &Tensor<T>,
) {
    let [_, c, h, w] = g.dims4().expect("rank 4");
    let l = h * w;
    if let Some(gx) = sink.slot(x) {
        for (b, ix) in index.iter().enumerate() {
            for ch in 0..c {
                let off = (b * c + ch) * l;
                for (i, &src) in ix.iter().enumerate() {
                    gx[off + src as usize] += g.data()[off + i];
                }
            }
        }
    }
}

pub(super) fn upsample_backward<T: Scalar>(sink: &mut Sink<'_, T>, x: Var, factor: usize, g: &Tensor<T>) {
    let [_, _, h, w] = sink.value(x).dims4().expect("rank 4");
    let wo = w * factor;
    if let Some(gx) = sink.slot(x) {
        for (gp, op) in gx.chunks_exact_mut(h * w).zip(g.data().chunks_exact(h * w * factor * factor)) {
            for (oy, row) in op.chunks_exact(wo).enumerate() {
                let dst = &mut gp[(oy / factor) * w..][..w];
                for (ox, &v) in row.iter().enumerate() {
                    dst[ox / factor] += v;
                }
            }
        }
    }
}

pub(super) fn mean_spatial_backward<T: Scalar>(sink: &mut Sink<'_, T>, x: Var, g: &Tensor<T>) {
    let [_, _, h, w] = sink.value(x).dims4().expect("rank 4");
    let inv = T::from_f64(1.0 / (h * w) as f64);
    if let Some(gx) = sink.slot(x) {
        for (p, &gv) in gx.chunks_exact_mut(h * w).zip(g.data()) {
            p.iter_mut().for_each(|o| *o += gv * inv);
        }
    }
}
