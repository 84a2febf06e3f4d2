//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value; [`Graph::backward`] walks the nodes in reverse and accumulates
//! gradients for every node that depends on a parameter. Kernels with
//! structure worth exploiting (convolution, the selective scan, bilinear
//! warping, the straight-through gumbel router) are single nodes with
//! hand-written adjoints.

mod conv;
mod elementwise;
mod layout;
mod special;

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{ParamId, ParamStore};
use crate::{Result, Scalar, Tensor};

pub use self::conv::ConvGeom;
pub use self::elementwise::Unary;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op<T> {
    Leaf,
    Param,
    Binary { a: Var, b: Var, kind: Binary },
    Unary { x: Var, kind: Unary },
    Scale { x: Var, factor: T },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    PadReflect { x: Var, pad: usize },
    Reshape { x: Var },
    Concat { xs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    PermuteChannels { x: Var, perm: Vec<usize> },
    PermuteTokens { x: Var, index: Vec<Vec<u32>> },
    UpsampleNearest { x: Var, factor: usize },
    MeanSpatial { x: Var },
    MeanAll { x: Var },
    L1 { a: Var, b: Var },
    LayerNorm { x: Var, w: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    LogSoftmax { x: Var },
    Gumbel { logits: Var, soft: Vec<T>, inv_tau: T },
    Scan { x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var, states: Vec<T>, decay: Vec<T> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Warp { x: Var, off: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            op => op_inputs(op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a constant (no gradient is tracked for it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Inserts a parameter; repeated calls for the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Back-propagates from a single-element output (seed gradient 1).
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        let seed = Tensor::full(self.value(output).shape(), T::one());
        if seed.len() != 1 {
            return Err(crate::error::shape_err!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            ));
        }
        Ok(self.backward_with(output, seed))
    }

    /// Back-propagates an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, params: self.params.clone() }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut sink = Sink { graph: self, grads };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Binary { a, b, kind } => elementwise::binary_backward(&mut sink, *a, *b, *kind, g),
            Op::Unary { x, kind } => elementwise::unary_backward(&mut sink, *x, *kind, &node.value, g),
            Op::Scale { x, factor } => {
                if let Some(gx) = sink.slot(*x) {
                    for (o, &v) in gx.iter_mut().zip(g.data()) {
                        *o += v * *factor;
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => conv::conv2d_backward(&mut sink, *x, *w, *b, geom, g),
            Op::PadReflect { x, pad } => layout::pad_reflect_backward(&mut sink, *x, *pad, g),
            Op::Reshape { x } => sink.accumulate(*x, g.data()),
            Op::Concat { xs } => layout::concat_backward(&mut sink, xs, g),
            Op::SliceChannels { x, start } => layout::slice_backward(&mut sink, *x, *start, g),
            Op::PermuteChannels { x, perm } => layout::permute_channels_backward(&mut sink, *x, perm, g),
            Op::PermuteTokens { x, index } => layout::permute_tokens_backward(&mut sink, *x, index, g),
            Op::UpsampleNearest { x, factor } => layout::upsample_backward(&mut sink, *x, *factor, g),
            Op::MeanSpatial { x } => layout::mean_spatial_backward(&mut sink, *x, g),
            Op::MeanAll { x } => {
                if let Some(gx) = sink.slot(*x) {
                    let s = g.data()[0] / T::from_f64(gx.len() as f64);
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::L1 { a, b } => elementwise::l1_backward(&mut sink, *a, *b, g),
            Op::LayerNorm { x, w, b, xhat, rstd } => {
                special::layer_norm_backward(&mut sink, *x, *w, *b, xhat, rstd, g)
            }
            Op::LogSoftmax { x } => special::log_softmax_backward(&mut sink, *x, &node.value, g),
            Op::Gumbel { logits, soft, inv_tau } => {
                special::gumbel_backward(&mut sink, *logits, soft, *inv_tau, g)
            }
            Op::Scan { x, delta, a, b, c, d, states, decay } => {
                special::scan_backward(&mut sink, [*x, *delta, *a, *b, *c, *d], states, decay, g)
            }
            Op::Bmm { a, b, ta, tb } => special::bmm_backward(&mut sink, *a, *b, *ta, *tb, g),
            Op::Warp { x, off } => special::warp_backward(&mut sink, *x, *off, g),
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::Binary { a, b, .. } | Op::L1 { a, b } | Op::Bmm { a, b, .. } => vec![*a, *b],
        Op::Unary { x, .. }
        | Op::Scale { x, .. }
        | Op::PadReflect { x, .. }
        | Op::Reshape { x }
        | Op::SliceChannels { x, .. }
        | Op::PermuteChannels { x, .. }
        | Op::PermuteTokens { x, .. }
        | Op::UpsampleNearest { x, .. }
        | Op::MeanSpatial { x }
        | Op::MeanAll { x }
        | Op::LogSoftmax { x } => vec![*x],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::Concat { xs } => xs.clone(),
        Op::LayerNorm { x, w, b, .. } => vec![*x, *w, *b],
        Op::Gumbel { logits, .. } => vec![*logits],
        Op::Scan { x, delta, a, b, c, d, .. } => vec![*x, *delta, *a, *b, *c, *d],
        Op::Warp { x, off } => vec![*x, *off],
    }
}

/// Gradient accumulator handed to the per-op adjoints.
pub(crate) struct Sink<'a, T> {
    graph: &'a Graph<T>,
    grads: &'a mut [Option<Tensor<T>>],
}

impl<'a, T: Scalar> Sink<'a, T> {
    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        self.graph.value(v)
    }

    /// Mutable gradient buffer of `v`, or `None` when `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.graph.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.graph.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: &[T]) {
        if let Some(s) = self.slot(v) {
            for (o, &x) in s.iter_mut().zip(g) {
                *o += x;
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a node, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, if the parameter took part in the pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// All parameters that were used, with their gradients (zero when unreached).
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> + '_ {
        self.params.iter().map(move |(&id, &v)| (id, self.get(v)))
    }
}
