use alloc::format;
use alloc::vec;

use super::{Graph, Op, Sink, Var};
use crate::error::shape_err;
use crate::scalar::gemm;
use crate::{Error, Result, Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Layer normalization over the channel axis at every spatial position,
    /// with per-channel affine `w`, `b`.
    pub fn layer_norm_channels(&mut self, x: Var, w: Var, b: Var, eps: f64) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        if self.shape(w) != [c] || self.shape(b) != [c] {
            return Err(shape_err!("layer norm affine must be [{}]", c));
        }
        let l = h * wd;
        let xv = self.value(x).data();
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let inv_c = T::from_f64(1.0 / c as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); n * l];
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); l];
        let mut var = vec![T::zero(); l];
        for bi in 0..n {
            let base = bi * c * l;
            mean.iter_mut().for_each(|v| *v = T::zero());
            var.iter_mut().for_each(|v| *v = T::zero());
            for ch in 0..c {
                for (m, &v) in mean.iter_mut().zip(&xv[base + ch * l..][..l]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            for ch in 0..c {
                for ((s, &v), &m) in var.iter_mut().zip(&xv[base + ch * l..][..l]).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let r = &mut rstd[bi * l..(bi + 1) * l];
            for (r, &s) in r.iter_mut().zip(&var) {
                *r = T::one() / (s * inv_c + eps).sqrt();
            }
            for ch in 0..c {
                let off = base + ch * l;
                for p in 0..l {
                    let xh = (xv[off + p] - mean[p]) * r[p];
                    xhat[off + p] = xh;
                    out[off + p] = xh * wv[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, wd], out)?;
        Ok(self.push(value, Op::LayerNorm { x, w, b, xhat, rstd }))
    }

    /// Log-softmax over the channel axis at every spatial position.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let l = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..n {
            for p in 0..l {
                let at = |ch: usize| bi * c * l + ch * l + p;
                let mx = (0..c).map(|ch| xv[at(ch)]).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|ch| (xv[at(ch)] - mx).exp()).sum::<T>().ln() + mx;
                for ch in 0..c {
                    out[at(ch)] = xv[at(ch)] - lse;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::LogSoftmax { x }))
    }

    /// Gumbel-softmax over the channel axis.
    ///
    /// `noise` (same shape as the logits) is added before the tempered
    /// softmax; pass `None` for a noiseless relaxation. With `hard`, the value
    /// is the exact one-hot of the per-position argmax (first index on ties)
    /// while the gradient is that of the soft relaxation (straight-through).
    pub fn gumbel_softmax(&mut self, logits: Var, noise: Option<&Tensor<T>>, tau: f64, hard: bool) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("gumbel temperature must be positive, got {tau}")));
        }
        let [n, c, h, w] = self.value(logits).dims4()?;
        if let Some(z) = noise {
            if z.shape() != self.shape(logits) {
                return Err(shape_err!("gumbel noise shape {:?} vs logits {:?}", z.shape(), self.shape(logits)));
            }
        }
        let l = h * w;
        let inv_tau = T::from_f64(1.0 / tau);
        let xv = self.value(logits).data();
        let mut soft = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut row = vec![T::zero(); c];
        for bi in 0..n {
            for p in 0..l {
                let at = |ch: usize| bi * c * l + ch * l + p;
                for (ch, r) in row.iter_mut().enumerate() {
                    let z = noise.map_or(T::zero(), |z| z.data()[at(ch)]);
                    *r = (xv[at(ch)] + z) * inv_tau;
                }
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    total += *r;
                }
                let mut best = 0;
                for ch in 0..c {
                    let s = row[ch] / total;
                    soft[at(ch)] = s;
                    if s > soft[at(best)] {
                        best = ch;
                    }
                }
                for ch in 0..c {
                    out[at(ch)] = if hard {
                        if ch == best {
                            T::one()
                        } else {
                            T::zero()
                        }
                    } else {
                        soft[at(ch)]
                    };
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::Gumbel { logits, soft, inv_tau }))
    }

    /// Selective state-space scan along the raster token order.
    ///
    /// Shapes: `x`, `delta`: `n × ch × h × w`; `a`: `ch × d`; `b`, `c`:
    /// `n × d × h × w`; `skip`: `ch`. For every batch item and channel the
    /// recurrence `h_i = exp(Δ_i a) ⊙ h_{i-1} + Δ_i b_i x_i`, `h_0 = 0`,
    /// `y_i = c_i · h_i + skip ⊙ x_i` runs over the flattened tokens.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, skip: Var) -> Result<Var> {
        let [n, ch, h, w] = self.value(x).dims4()?;
        let l = h * w;
        let ds = match self.shape(a) {
            &[c2, ds] if c2 == ch => ds,
            s => return Err(shape_err!("scan transition shape {:?}, expected [{}, d]", s, ch)),
        };
        if self.shape(delta) != self.shape(x) {
            return Err(shape_err!("scan step shape {:?} vs input {:?}", self.shape(delta), self.shape(x)));
        }
        for v in [b, c] {
            if self.shape(v) != [n, ds, h, w] {
                return Err(shape_err!("scan input/output maps must be [{}, {}, {}, {}], got {:?}", n, ds, h, w, self.shape(v)));
            }
        }
        if self.shape(skip) != [ch] {
            return Err(shape_err!("scan skip vector must be [{}]", ch));
        }
        let (xv, dv, av) = (self.value(x).data(), self.value(delta).data(), self.value(a).data());
        let (bv, cv, sv) = (self.value(b).data(), self.value(c).data(), self.value(skip).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut states = vec![T::zero(); n * ch * l * ds];
        let mut decay = vec![T::zero(); n * ch * l * ds];
        let mut state = vec![T::zero(); ds];
        let (mut bt, mut ct) = (vec![T::zero(); l * ds], vec![T::zero(); l * ds]);
        for bi in 0..n {
            token_major(&bv[bi * ds * l..(bi + 1) * ds * l], ds, l, &mut bt);
            token_major(&cv[bi * ds * l..(bi + 1) * ds * l], ds, l, &mut ct);
            for k in 0..ch {
                state.fill(T::zero());
                let row = (bi * ch + k) * l;
                let arow = &av[k * ds..(k + 1) * ds];
                for i in 0..l {
                    let (xi, dt) = (xv[row + i], dv[row + i]);
                    let sbase = (row + i) * ds;
                    let abar = &mut decay[sbase..sbase + ds];
                    for (e, &a) in abar.iter_mut().zip(arow) {
                        *e = (dt * a).exp_fast();
                    }
                    let drive = dt * xi;
                    let (bi_row, ci_row) = (&bt[i * ds..(i + 1) * ds], &ct[i * ds..(i + 1) * ds]);
                    let hs = &mut states[sbase..sbase + ds];
                    let mut y = T::zero();
                    for s in 0..ds {
                        let v = abar[s] * state[s] + drive * bi_row[s];
                        state[s] = v;
                        hs[s] = v;
                        y += ci_row[s] * v;
                    }
                    let y = y + sv[k] * xi;
                    if !y.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite scan state at step {i} (batch {bi}, channel {k})"
                        )));
                    }
                    out[row + i] = y;
                }
            }
        }
        let value = Tensor::from_vec(&[n, ch, h, w], out)?;
        Ok(self.push(value, Op::Scan { x, delta, a, b, c, d: skip, states, decay }))
    }

    /// Batched matrix product of rank-3 tensors: `op(a) · op(b)` per batch
    /// entry, where `op` transposes the last two axes when the flag is set.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, ra, ca], &[bb, rb, cb]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(shape_err!("bmm expects rank-3 operands, got {:?} and {:?}", sa, sb));
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, nn) = if tb { (cb, rb) } else { (rb, cb) };
        if ba != bb || k != k2 {
            return Err(shape_err!("bmm: incompatible {:?} (t={}) and {:?} (t={})", sa, ta, sb, tb));
        }
        let mut out = vec![T::zero(); ba * m * nn];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(m, k, nn, &av[i * m * k..], ta, &bv[i * k * nn..], tb, T::zero(), &mut out[i * m * nn..]);
        }
        let value = Tensor::from_vec(&[ba, m, nn], out)?;
        Ok(self.push(value, Op::Bmm { a, b, ta, tb }))
    }

    /// Bilinear resampling of `x` at `p + off(p)` with border clamping.
    /// `off` has two channels: horizontal then vertical displacement in pixels.
    pub fn warp(&mut self, x: Var, off: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.shape(off) != [n, 2, h, w] {
            return Err(shape_err!("offset field {:?} does not match features {:?}", self.shape(off), self.shape(x)));
        }
        let (xv, ov) = (self.value(x).data(), self.value(off).data());
        let l = h * w;
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let s = sample_point(ov[(bi * 2) * l + p], ov[(bi * 2 + 1) * l + p], xx, y, w, h);
                    for ch in 0..c {
                        let plane = &xv[(bi * c + ch) * l..][..l];
                        out[(bi * c + ch) * l + p] = s.blend(plane, w);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::Warp { x, off }))
    }
}

/// Bilinear sampling location after border clamping.
struct SamplePoint<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    // Whether the unclamped coordinate lies strictly inside the grid, i.e.
    // whether the sample moves with the offset.
    live_x: bool,
    live_y: bool,
}

fn sample_point<T: Scalar>(dx: T, dy: T, x: usize, y: usize, w: usize, h: usize) -> SamplePoint<T> {
    let axis = |base: usize, d: T, len: usize| {
        let hi = T::from_f64((len - 1) as f64);
        let raw = T::from_f64(base as f64) + d;
        let live = raw > T::zero() && raw < hi;
        let pos = raw.max(T::zero()).min(hi);
        let i0 = pos.floor().to_usize().unwrap_or(0).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - T::from_f64(i0 as f64), live)
    };
    let (x0, x1, fx, live_x) = axis(x, dx, w);
    let (y0, y1, fy, live_y) = axis(y, dy, h);
    SamplePoint { x0, x1, y0, y1, fx, fy, live_x, live_y }
}

impl<T: Scalar> SamplePoint<T> {
    #[inline]
    fn corners(&self, plane: &[T], w: usize) -> [T; 4] {
        [
            plane[self.y0 * w + self.x0],
            plane[self.y0 * w + self.x1],
            plane[self.y1 * w + self.x0],
            plane[self.y1 * w + self.x1],
        ]
    }

    #[inline]
    fn blend(&self, plane: &[T], w: usize) -> T {
        let [v00, v01, v10, v11] = self.corners(plane, w);
        let one = T::one();
        (one - self.fy) * ((one - self.fx) * v00 + self.fx * v01) + self.fy * ((one - self.fx) * v10 + self.fx * v11)
    }
}

pub(super) fn layer_norm_backward<T: Scalar>(
    sink: &mut Sink<'_, T>,
    x: Var,
    w: Var,
    b: Var,
    xhat: &[T],
    rstd: &[T],
    g: &Tensor<T>,
) {
    let [n, c, h, wd] = g.dims4().expect("rank 4");
    let l = h * wd;
    let gd = g.data();
    let wv = sink.value(w).data();
    if let Some(gb) = sink.slot(b) {
        for bi in 0..n {
            for (ch, o) in gb.iter_mut().enumerate() {
                *o += gd[(bi * c + ch) * l..][..l].iter().copied().sum::<T>();
            }
        }
    }
    if let Some(gw) = sink.slot(w) {
        for bi in 0..n {
            for (ch, o) in gw.iter_mut().enumerate() {
                let off = (bi * c + ch) * l;
                *o += gd[off..off + l].iter().zip(&xhat[off..off + l]).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
    }
    if let Some(gx) = sink.slot(x) {
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut m1 = vec![T::zero(); l];
        let mut m2 = vec![T::zero(); l];
        for bi in 0..n {
            m1.iter_mut().for_each(|v| *v = T::zero());
            m2.iter_mut().for_each(|v| *v = T::zero());
            for ch in 0..c {
                let off = (bi * c + ch) * l;
                for p in 0..l {
                    let dxh = gd[off + p] * wv[ch];
                    m1[p] += dxh;
                    m2[p] += dxh * xhat[off + p];
                }
            }
            for ch in 0..c {
                let off = (bi * c + ch) * l;
                for p in 0..l {
                    let dxh = gd[off + p] * wv[ch];
                    gx[off + p] += rstd[bi * l + p] * (dxh - m1[p] * inv_c - xhat[off + p] * m2[p] * inv_c);
                }
            }
        }
    }
}

pub(super) fn log_softmax_backward<T: Scalar>(sink: &mut Sink<'_, T>, x: Var, out: &Tensor<T>, g: &Tensor<T>) {
    let [n, c, h, w] = g.dims4().expect("rank 4");
    let l = h * w;
    let (gd, od) = (g.data(), out.data());
    if let Some(gx) = sink.slot(x) {
        for bi in 0..n {
            for p in 0..l {
                let at = |ch: usize| bi * c * l + ch * l + p;
                let total: T = (0..c).map(|ch| gd[at(ch)]).sum();
                for ch in 0..c {
                    gx[at(ch)] += gd[at(ch)] - od[at(ch)].exp() * total;
                }
            }
        }
    }
}

pub(super) fn gumbel_backward<T: Scalar>(sink: &mut Sink<'_, T>, logits: Var, soft: &[T], inv_tau: T, g: &Tensor<T>) {
    let [n, c, h, w] = g.dims4().expect("rank 4");
    let l = h * w;
    let gd = g.data();
    if let Some(gx) = sink.slot(logits) {
        for bi in 0..n {
            for p in 0..l {
                let at = |ch: usize| bi * c * l + ch * l + p;
                let dot: T = (0..c).map(|ch| gd[at(ch)] * soft[at(ch)]).sum();
                for ch in 0..c {
                    gx[at(ch)] += inv_tau * soft[at(ch)] * (gd[at(ch)] - dot);
                }
            }
        }
    }
}

/// `[d, l]` to `[l, d]`.
fn token_major<T: Scalar>(src: &[T], d: usize, l: usize, dst: &mut [T]) {
    for s in 0..d {
        for i in 0..l {
            dst[i * d + s] = src[s * l + i];
        }
    }
}

/// `[l, d]` to `[d, l]`, accumulating.
fn channel_major<T: Scalar>(src: &[T], d: usize, l: usize, dst: &mut [T]) {
    for s in 0..d {
        for i in 0..l {
            dst[s * l + i] += src[i * d + s];
        }
    }
}

pub(super) fn scan_backward<T: Scalar>(
    sink: &mut Sink<'_, T>,
    vars: [Var; 6],
    states: &[T],
    decay: &[T],
    g: &Tensor<T>,
) {
    let [x, delta, a, b, c, skip] = vars;
    let [n, ch, h, w] = g.dims4().expect("rank 4");
    let l = h * w;
    let ds = sink.value(a).shape()[1];
    let xv = sink.value(x).data();
    let dv = sink.value(delta).data();
    let av = sink.value(a).data();
    let bv = sink.value(b).data();
    let cv = sink.value(c).data();
    let sv = sink.value(skip).data();
    let gd = g.data();

    let mut gx = vec![T::zero(); xv.len()];
    let mut gdelta = vec![T::zero(); dv.len()];
    let mut ga = vec![T::zero(); av.len()];
    let mut gb = vec![T::zero(); bv.len()];
    let mut gc = vec![T::zero(); cv.len()];
    let mut gs = vec![T::zero(); sv.len()];
    let mut carry = vec![T::zero(); ds];
    let (mut bt, mut ct) = (vec![T::zero(); l * ds], vec![T::zero(); l * ds]);
    let (mut gbt, mut gct) = (vec![T::zero(); l * ds], vec![T::zero(); l * ds]);
    let zeros = vec![T::zero(); ds];
    for bi in 0..n {
        token_major(&bv[bi * ds * l..(bi + 1) * ds * l], ds, l, &mut bt);
        token_major(&cv[bi * ds * l..(bi + 1) * ds * l], ds, l, &mut ct);
        gbt.fill(T::zero());
        gct.fill(T::zero());
        for k in 0..ch {
            carry.fill(T::zero());
            let row = (bi * ch + k) * l;
            let arow = &av[k * ds..(k + 1) * ds];
            let mut ga_k = vec![T::zero(); ds];
            for i in (0..l).rev() {
                let (xi, dt, gy) = (xv[row + i], dv[row + i], gd[row + i]);
                gs[k] += gy * xi;
                let sbase = (row + i) * ds;
                let hs = &states[sbase..sbase + ds];
                let abar = &decay[sbase..sbase + ds];
                let hprev = if i > 0 { &states[sbase - ds..sbase] } else { &zeros[..] };
                let (b_i, c_i) = (&bt[i * ds..(i + 1) * ds], &ct[i * ds..(i + 1) * ds]);
                let (gb_i, gc_i) = (&mut gbt[i * ds..(i + 1) * ds], &mut gct[i * ds..(i + 1) * ds]);
                let drive = dt * xi;
                let (mut gdt, mut gdrive) = (T::zero(), T::zero());
                for s in 0..ds {
                    gc_i[s] += gy * hs[s];
                    let gh = gy * c_i[s] + carry[s];
                    let gabar = gh * hprev[s] * abar[s];
                    gdt += gabar * arow[s];
                    ga_k[s] += gabar * dt;
                    gdrive += gh * b_i[s];
                    gb_i[s] += gh * drive;
                    carry[s] = abar[s] * gh;
                }
                gx[row + i] += gy * sv[k] + gdrive * dt;
                gdelta[row + i] += gdt + gdrive * xi;
            }
            for s in 0..ds {
                ga[k * ds + s] += ga_k[s];
            }
        }
        channel_major(&gbt, ds, l, &mut gb[bi * ds * l..(bi + 1) * ds * l]);
        channel_major(&gct, ds, l, &mut gc[bi * ds * l..(bi + 1) * ds * l]);
    }
    sink.accumulate(x, &gx);
    sink.accumulate(delta, &gdelta);
    sink.accumulate(a, &ga);
    sink.accumulate(b, &gb);
    sink.accumulate(c, &gc);
    sink.accumulate(skip, &gs);
}

pub(super) fn bmm_backward<T: Scalar>(sink: &mut Sink<'_, T>, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor<T>) {
    let av = sink.value(a);
    let bv = sink.value(b);
    let (ba, m, nn) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let k = if ta { av.shape()[1] } else { av.shape()[2] };
    let gd = g.data();
    if let Some(ga) = sink.slot(a) {
        for i in 0..ba {
            let (gs, bs) = (&gd[i * m * nn..], &bv.data()[i * k * nn..]);
            let dst = &mut ga[i * m * k..(i + 1) * m * k];
            if ta {
                gemm(k, nn, m, bs, tb, gs, true, T::one(), dst);
            } else {
                gemm(m, nn, k, gs, false, bs, !tb, T::one(), dst);
            }
        }
    }
    if let Some(gb) = sink.slot(b) {
        for i in 0..ba {
            let (gs, as_) = (&gd[i * m * nn..], &av.data()[i * m * k..]);
            let dst = &mut gb[i * k * nn..(i + 1) * k * nn];
            if tb {
                gemm(nn, m, k, gs, true, as_, ta, T::one(), dst);
            } else {
                gemm(k, m, nn, as_, !ta, gs, false, T::one(), dst);
            }
        }
    }
}

pub(super) fn warp_backward<T: Scalar>(sink: &mut Sink<'_, T>, x: Var, off: Var, g: &Tensor<T>) {
    let xt = sink.value(x);
    let ot = sink.value(off);
    let [n, c, h, w] = xt.dims4().expect("rank 4");
    let l = h * w;
    let (xv, ov, gd) = (xt.data(), ot.data(), g.data());
    let one = T::one();
    if let Some(goff) = sink.slot(off) {
        for bi in 0..n {
            for p in 0..l {
                let s = sample_point(ov[(bi * 2) * l + p], ov[(bi * 2 + 1) * l + p], p % w, p / w, w, h);
                let (mut gdx, mut gdy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let plane = &xv[(bi * c + ch) * l..][..l];
                    let [v00, v01, v10, v11] = s.corners(plane, w);
                    let go = gd[(bi * c + ch) * l + p];
                    gdx += go * ((one - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                    gdy += go * ((one - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
                }
                if s.live_x {
                    goff[(bi * 2) * l + p] += gdx;
                }
                if s.live_y {
                    goff[(bi * 2 + 1) * l + p] += gdy;
                }
            }
        }
    }
    if let Some(gx) = sink.slot(x) {
        for bi in 0..n {
            for p in 0..l {
                let s = sample_point(ov[(bi * 2) * l + p], ov[(bi * 2 + 1) * l + p], p % w, p / w, w, h);
                let wts = [
                    (one - s.fy) * (one - s.fx),
                    (one - s.fy) * s.fx,
                    s.fy * (one - s.fx),
                    s.fy * s.fx,
                ];
                let idx = [s.y0 * w + s.x0, s.y0 * w + s.x1, s.y1 * w + s.x0, s.y1 * w + s.x1];
                for ch in 0..c {
                    let go = gd[(bi * c + ch) * l + p];
                    let plane = &mut gx[(bi * c + ch) * l..][..l];
                    for (&i, &wt) in idx.iter().zip(&wts) {
                        plane[i] += go * wt;
                    }
                }
            }
        }
    }
}
