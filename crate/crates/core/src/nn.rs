//! Parameter storage, initialization and the basic layers shared by every block.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::profile::Cost;
use crate::tape::ConvGeom;
use crate::{Graph, Result, Scalar, Tensor, Var};
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// Index of a learnable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Flat, ordered collection of named learnable arrays.
///
/// Blocks only hold [`ParamId`]s, so one constructed model can be evaluated
/// against stores of different precision (see [`ParamStore::cast`]).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    /// Registers a new array. Names are expected to be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId((self.values.len() - 1) as u32)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.index()]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.index()]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index()]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|i| ParamId(i as u32))
    }

    /// Number of arrays.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids().map(move |id| (id, self.name(id), self.value(id)))
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(_, _, t)| t.len()).sum()
    }

    /// Sets every array whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hit = 0;
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                value.data_mut().iter_mut().for_each(|v| *v = T::zero());
                hit += 1;
            }
        }
        hit
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }
}

/// Hands out parameters under a dotted name prefix, drawing initial values
/// from a caller-owned random stream.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Child initializer whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        let prefix = self.qualify(name);
        Init { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform samples in `(-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.random_range(-bound..bound))).collect();
        let full = self.qualify(name);
        self.store.add(full, Tensor::from_vec(shape, data).expect("shape/product agree"))
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.qualify(name);
        self.store.add(full, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.fill(name, shape, 0.0)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Replaces the initial value of an existing parameter (same shape).
    pub fn overwrite(&mut self, id: ParamId, value: Tensor<T>) {
        let slot = self.store.value_mut(id);
        assert_eq!(slot.shape(), value.shape(), "overwrite must keep the shape");
        *slot = value;
    }
}

/// How the prompt router turns logits into a routing matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Gumbel noise, hard one-hot forward, straight-through gradient.
    Train,
    /// Deterministic argmax, no noise.
    Eval,
    /// Noiseless softmax relaxation; smooth, used for gradient checks.
    Soft,
}

/// State threaded through one forward pass.
pub struct Ctx<'a, T> {
    pub graph: Graph<T>,
    pub store: &'a ParamStore<T>,
    pub routing: Routing,
    pub tau: f64,
    rng: Option<&'a mut dyn RngCore>,
    taps: Option<Vec<(String, Var)>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, routing: Routing) -> Self {
        Self { graph: Graph::new(), store, routing, tau: 1.0, rng: None, taps: None }
    }

    /// Random stream for routing noise; without one, [`Routing::Train`]
    /// behaves like [`Routing::Eval`] in the forward value.
    pub fn with_rng(mut self, rng: &'a mut dyn RngCore) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Records named intermediate feature maps (see [`Ctx::tap`]).
    pub fn with_taps(mut self) -> Self {
        self.taps = Some(Vec::new());
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        if let Some(t) = self.taps.as_mut() {
            t.push((name.into(), v));
        }
    }

    pub fn taps(&self) -> &[(String, Var)] {
        self.taps.as_deref().unwrap_or(&[])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Standard Gumbel samples of the given shape, or `None` when routing is
    /// noiseless or no stream was supplied.
    pub(crate) fn gumbel_noise(&mut self, shape: &[usize]) -> Option<Tensor<T>> {
        if self.routing != Routing::Train {
            return None;
        }
        let rng = self.rng.as_mut()?;
        let dist = rand_distr::Gumbel::new(0.0, 1.0).expect("unit scale");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rand_distr::Distribution::sample(&dist, &mut **rng))).collect();
        Some(Tensor::from_vec(shape, data).expect("shape/product agree"))
    }
}

/// 2-D convolution with "same" padding (`k / 2`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights and bias, `U(±1/√fan_in)`.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::build(init, name, cin, cout, k, 1, 1, true, false)
    }

    /// Same layer with all-zero weights and bias.
    pub fn zeroed<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::build(init, name, cin, cout, k, 1, 1, true, true)
    }

    /// Depthwise `k × k` convolution over `c` channels.
    pub fn depthwise<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, k: usize) -> Self {
        Self::build(init, name, c, c, k, 1, c, true, false)
    }

    pub fn strided<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::build(init, name, cin, cout, k, stride, 1, true, false)
    }

    /// Fully general constructor.
    pub fn build<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        zero: bool,
    ) -> Self {
        let mut init = init.sub(name);
        let fan_in = (cin / groups) * k * k;
        let bound = if zero { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
        let shape = [cout, cin / groups, k, k];
        let w = if zero { init.zeros("weight", &shape) } else { init.uniform("weight", &shape, bound) };
        let b = bias.then(|| if zero { init.zeros("bias", &[cout]) } else { init.uniform("bias", &[cout], bound) });
        Self { w, b, cin, cout, k, stride, groups }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom { stride: self.stride, pad: self.k / 2, groups: self.groups }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let b = self.b.map(|b| cx.param(b));
        cx.graph.conv2d(x, w, b, self.geom())
    }

    /// Output spatial size for an `h × w` input.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        ((h + 2 * pad - self.k) / self.stride + 1, (w + 2 * pad - self.k) / self.stride + 1)
    }

    pub fn param_count(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.k * self.k + if self.b.is_some() { self.cout } else { 0 }
    }

    /// `2 · Cin · Cout · k² · H'W' / groups` for an `h × w` input.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_size(h, w);
        (2 * self.cin * self.cout * self.k * self.k * ho * wo / self.groups) as u64
    }

    pub fn cost(&self, name: &str, h: usize, w: usize) -> Cost {
        Cost::leaf(name, self.flops(h, w))
    }
}

/// Layer normalization across channels at each spatial position.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub w: ParamId,
    pub b: ParamId,
}

impl LayerNorm2d {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        let mut init = init.sub(name);
        Self { w: init.fill("weight", &[c], 1.0), b: init.zeros("bias", &[c]) }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.w), cx.param(self.b));
        cx.graph.layer_norm_channels(x, w, b, Self::EPS)
    }
}

/// Multiplies a feature map by a learnable scalar.
pub(crate) fn scale_by<T: Scalar>(cx: &mut Ctx<'_, T>, id: ParamId, x: Var) -> Result<Var> {
    let s = cx.param(id);
    let s = cx.graph.reshape(s, &[1, 1, 1, 1])?;
    cx.graph.mul(x, s)
}
