use alloc::vec::Vec;

use super::{Binary, Graph, Op, Sink, Var};
use crate::error::shape_err;
use crate::{Result, Scalar, Tensor};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    /// Exact (erf) GELU.
    Gelu,
    Relu,
    Softplus,
    Exp,
    Neg,
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline(always)]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    let e = (-x.abs()).exp_fast();
    let r = T::one() / (T::one() + e);
    if x >= T::zero() {
        r
    } else {
        e * r
    }
}

#[inline(always)]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::from_f64(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline(always)]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

impl Unary {
    /// Derivative given the input `x` and the output `y`.
    #[inline(always)]
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Gelu => {
                let cdf = T::from_f64(0.5) * (T::one() + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
                let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp_fast();
                cdf + x * pdf
            }
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Neg => -T::one(),
        }
    }
}

/// Broadcast geometry of a binary op over rank-4 padded shapes.
struct Bcast {
    out: [usize; 4],
    sa: [usize; 4],
    sb: [usize; 4],
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut s = [1; 4];
    let off = 4 - shape.len();
    s[off..].copy_from_slice(shape);
    s
}

fn strides(shape: &[usize; 4], out: &[usize; 4]) -> [usize; 4] {
    let mut st = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        st[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    st
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a.len() != b.len() {
        return Err(shape_err!("broadcast needs equal ranks, got {:?} and {:?}", a, b));
    }
    let (pa, pb) = (pad4(a), pad4(b));
    let mut out = [1; 4];
    for d in 0..4 {
        out[d] = match (pa[d], pb[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("shapes {:?} and {:?} do not broadcast", a, b)),
        };
    }
    Ok(Bcast { out, sa: strides(&pa, &out), sb: strides(&pb, &out) })
}

#[inline]
fn for_each_index(bc: &Bcast, mut f: impl FnMut(usize, usize, usize)) {
    let o = bc.out;
    let mut k = 0;
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let base_a = i0 * bc.sa[0] + i1 * bc.sa[1] + i2 * bc.sa[2];
                let base_b = i0 * bc.sb[0] + i1 * bc.sb[1] + i2 * bc.sb[2];
                for i3 in 0..o[3] {
                    f(k, base_a + i3 * bc.sa[3], base_b + i3 * bc.sb[3]);
                    k += 1;
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                })
                .collect();
            Tensor::from_vec(ta.shape(), data)?
        } else {
            let bc = broadcast(ta.shape(), tb.shape())?;
            let n: usize = bc.out.iter().product();
            let mut data = Vec::with_capacity(n);
            let (da, db) = (ta.data(), tb.data());
            for_each_index(&bc, |_, ia, ib| {
                let (x, y) = (da[ia], db[ib]);
                data.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                })
            });
            let rank = ta.rank();
            Tensor::from_vec(&bc.out[4 - rank..], data)?
        };
        Ok(self.push(value, Op::Binary { a, b, kind }))
    }

    /// Elementwise sum with broadcasting over unit extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Elementwise product with broadcasting over unit extents.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let xs = self.value(x);
        // One loop per kind so each body inlines and vectorizes.
        let value = match kind {
            Unary::Sigmoid => xs.map(sigmoid),
            Unary::Gelu => xs.map(gelu),
            Unary::Relu => xs.map(|v| v.max(T::zero())),
            Unary::Softplus => xs.map(softplus),
            Unary::Exp => xs.map(|v| v.exp()),
            Unary::Neg => xs.map(|v| -v),
        };
        self.push(value, Op::Unary { x, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    /// Mean absolute difference of two equally shaped tensors.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("l1: shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let n = T::from_f64(ta.len() as f64);
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::L1 { a, b }))
    }
}

pub(super) fn unary_backward<T: Scalar>(
    sink: &mut Sink<'_, T>,
    x: Var,
    kind: Unary,
    out: &Tensor<T>,
    g: &Tensor<T>,
) {
    let xs = sink.value(x).data();
    if let Some(gx) = sink.slot(x) {
        let it = gx.iter_mut().zip(g.data()).zip(xs.iter().zip(out.data()));
        match kind {
            Unary::Sigmoid => it.for_each(|((o, &gv), (&xv, &yv))| *o += gv * Unary::Sigmoid.derivative(xv, yv)),
            Unary::Gelu => it.for_each(|((o, &gv), (&xv, &yv))| *o += gv * Unary::Gelu.derivative(xv, yv)),
            Unary::Relu => it.for_each(|((o, &gv), (&xv, &yv))| *o += gv * Unary::Relu.derivative(xv, yv)),
            Unary::Softplus => it.for_each(|((o, &gv), (&xv, &yv))| *o += gv * Unary::Softplus.derivative(xv, yv)),
            Unary::Exp => it.for_each(|((o, &gv), (&xv, &yv))| *o += gv * Unary::Exp.derivative(xv, yv)),
            Unary::Neg => it.for_each(|((o, &gv), (&xv, &yv))| *o += gv * Unary::Neg.derivative(xv, yv)),
        }
    }
}

pub(super) fn binary_backward<T: Scalar>(
    sink: &mut Sink<'_, T>,
    a: Var,
    b: Var,
    kind: Binary,
    g: &Tensor<T>,
) {
    let sa = sink.value(a).shape();
    let sb = sink.value(b).shape();
    let bc = broadcast(&sa, &sb).expect("shapes validated in forward");
    let gd = g.data();
    // Mul needs the other operand's values.
    let (va, vb) = if kind == Binary::Mul {
        (sink.value(a).data(), sink.value(b).data())
    } else {
        (&[][..], &[][..])
    };
    let same = sa == sb;
    if let Some(ga) = sink.slot(a) {
        if same {
            for k in 0..gd.len() {
                ga[k] += match kind {
                    Binary::Mul => gd[k] * vb[k],
                    _ => gd[k],
                };
            }
        } else {
            for_each_index(&bc, |k, ia, ib| {
                ga[ia] += match kind {
                    Binary::Mul => gd[k] * vb[ib],
                    _ => gd[k],
                };
            });
        }
    }
    if let Some(gb) = sink.slot(b) {
        if same {
            for k in 0..gd.len() {
                gb[k] += match kind {
                    Binary::Add => gd[k],
                    Binary::Sub => -gd[k],
                    Binary::Mul => gd[k] * va[k],
                };
            }
        } else {
            for_each_index(&bc, |k, ia, ib| {
                gb[ib] += match kind {
                    Binary::Add => gd[k],
                    Binary::Sub => -gd[k],
                    Binary::Mul => gd[k] * va[ia],
                };
            });
        }
    }
}

pub(super) fn l1_backward<T: Scalar>(sink: &mut Sink<'_, T>, a: Var, b: Var, g: &Tensor<T>) {
    let va = sink.value(a).data();
    let vb = sink.value(b).data();
    let s = g.data()[0] / T::from_f64(va.len() as f64);
    let sign: Vec<T> = va
        .iter()
        .zip(vb)
        .map(|(&x, &y)| {
            let d = x - y;
            if d > T::zero() {
                s
            } else if d < T::zero() {
                -s
            } else {
                T::zero()
            }
        })
        .collect();
    sink.accumulate(a, &sign);
    if let Some(gb) = sink.slot(b) {
        for (o, &v) in gb.iter_mut().zip(&sign) {
            *o -= v;
        }
    }
}
