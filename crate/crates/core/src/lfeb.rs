//! Low-frequency enhancement block: a prompt-routed state-space branch and a
//! squeeze-excitation branch fused by learnable scalars, then a feed-forward
//! refinement.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err};
use crate::hfeb::{ChannelAttention, ResidualBlock};
use crate::nn::{scale_by, Conv2d, Ctx, Init, LayerNorm2d, ParamId, Routing};
use crate::profile::Cost;
use crate::tape::ConvGeom;
use crate::{Result, Scalar, Tensor, Var};
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// Size of the prompt pool and of the scan state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Number of prompts `T`.
    pub prompts: usize,
    /// Inner rank `r` of the factored pool.
    pub rank: usize,
    /// Scan state size `d` (also the prompt width).
    pub state_dim: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { prompts: 16, rank: 4, state_dim: 16 }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        let PromptConfig { prompts, rank, state_dim } = *self;
        if prompts < 2 || state_dim < 1 || rank < 1 {
            return Err(config_err!("prompt pool needs T >= 2, r >= 1, d >= 1 (got {prompts}, {rank}, {state_dim})"));
        }
        if 2 * rank > prompts.min(state_dim) {
            return Err(config_err!("prompt rank {rank} must be at most min(T, d)/2 = {}", prompts.min(state_dim) / 2));
        }
        Ok(())
    }
}

/// What occupies the state-space slot of the block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssbVariant {
    #[default]
    Full,
    /// Routing and reordering kept, prompts not added to the readout.
    NoPromptPool,
    /// Every token receives the average pool prompt; raster scan order.
    NoRouting,
    /// Routed prompts, raster scan order.
    NoReorder,
    /// Dense `T × d` pool per block instead of the shared low-rank factors.
    NoLowRank,
    /// Two 3×3 convolutions with a GELU in between.
    Cnn,
    /// Multi-head transposed self-attention with softmax.
    SelfAttention,
    /// Branch removed.
    None,
}

impl AssbVariant {
    pub fn uses_shared_basis(self) -> bool {
        matches!(self, Self::Full | Self::NoPromptPool | Self::NoRouting | Self::NoReorder)
    }
}

/// Per-block hyperparameters of the low-frequency path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LfebConfig {
    pub prompt: PromptConfig,
    pub seb_reduction: usize,
    pub ffn_expansion: usize,
    pub assb: AssbVariant,
    pub seb: bool,
    pub heads: usize,
}

impl Default for LfebConfig {
    fn default() -> Self {
        Self { prompt: PromptConfig::default(), seb_reduction: 4, ffn_expansion: 2, assb: AssbVariant::Full, seb: true, heads: 2 }
    }
}

/// Order in which tokens are scanned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticPermutation {
    /// `forward[i]` is the raster position scanned at step `i`.
    pub forward: Vec<u32>,
    /// `inverse[p]` is the scan step of raster position `p`.
    pub inverse: Vec<u32>,
}

impl SemanticPermutation {
    pub fn identity(len: usize) -> Self {
        let forward: Vec<u32> = (0..len as u32).collect();
        Self { inverse: forward.clone(), forward }
    }

    /// Stable sort of raster positions by `keys`.
    pub fn from_keys(keys: &[u32]) -> Self {
        let mut forward: Vec<u32> = (0..keys.len() as u32).collect();
        forward.sort_by_key(|&p| keys[p as usize]);
        let mut inverse = vec![0u32; keys.len()];
        for (i, &p) in forward.iter().enumerate() {
            inverse[p as usize] = i as u32;
        }
        Self { forward, inverse }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

/// Per-token argmax over the channel axis of an `n × T × h × w` routing map
/// (first index on ties).
pub fn route_index<T: Scalar>(pm: &Tensor<T>) -> Result<Vec<Vec<u32>>> {
    let [n, t, h, w] = pm.dims4()?;
    let l = h * w;
    let d = pm.data();
    Ok((0..n)
        .map(|b| {
            (0..l)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..t {
                        if d[(b * t + k) * l + p] > d[(b * t + best) * l + p] {
                            best = k;
                        }
                    }
                    best as u32
                })
                .collect()
        })
        .collect())
}

/// Gathers tokens into scan order.
pub fn sgn_unfold<T: Scalar>(cx: &mut Ctx<'_, T>, x: Var, perms: &[SemanticPermutation]) -> Result<Var> {
    let index = perms.iter().map(|p| p.forward.clone()).collect();
    cx.graph.permute_tokens(x, index)
}

/// Scatters scan-ordered tokens back to raster layout.
pub fn sgn_fold<T: Scalar>(cx: &mut Ctx<'_, T>, y: Var, perms: &[SemanticPermutation]) -> Result<Var> {
    let index = perms.iter().map(|p| p.inverse.clone()).collect();
    cx.graph.permute_tokens(y, index)
}

/// `x ⊙ σ(DW3×3(Conv1×1(x)))`.
#[derive(Clone, Debug)]
pub struct PositionalGate {
    pub pw: Conv2d,
    pub dw: Conv2d,
}

impl PositionalGate {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize) -> Self {
        Self { pw: Conv2d::new(init, "gate_pw", c, c, 1), dw: Conv2d::depthwise(init, "gate_dw", c, 3) }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = self.pw.forward(cx, x)?;
        let g = self.dw.forward(cx, g)?;
        let g = cx.graph.sigmoid(g);
        cx.graph.mul(x, g)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        Cost::node("gate", vec![self.pw.cost("pw", h, w), self.dw.cost("dw", h, w)])
    }
}

/// Where a block's prompt pool comes from.
#[derive(Clone, Copy, Debug)]
pub enum PromptPool {
    /// `M_A · M_B` with `M_A` shared network-wide.
    LowRank { basis: ParamId, mix: ParamId },
    /// Dense `T × d` pool.
    Dense(ParamId),
}

/// Routing logits, prompt pool and router of one state-space block.
#[derive(Clone, Debug)]
pub struct PromptRouter {
    pub proj: Conv2d,
    pub pool: PromptPool,
    pub cfg: PromptConfig,
}

impl PromptRouter {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, cfg: PromptConfig, basis: Option<ParamId>) -> Self {
        let proj = Conv2d::new(init, "route", c, cfg.prompts, 1);
        let pool = match basis {
            Some(basis) => {
                let bound = 1.0 / (cfg.rank as f64).sqrt();
                PromptPool::LowRank { basis, mix: init.uniform("prompt_mix", &[cfg.rank, cfg.state_dim], bound) }
            }
            None => PromptPool::Dense(init.uniform("prompt_pool", &[cfg.prompts, cfg.state_dim], 1.0)),
        };
        Self { proj, pool, cfg }
    }

    /// Transposed pool `d × T`, shaped as a 1×1 convolution weight so that
    /// applying it to the routing map yields per-token prompts.
    pub fn pool_weight<T: Scalar>(&self, cx: &mut Ctx<'_, T>) -> Result<Var> {
        let (t, r, d) = (self.cfg.prompts, self.cfg.rank, self.cfg.state_dim);
        let pool_t = match self.pool {
            PromptPool::LowRank { basis, mix } => {
                let a = cx.param(basis);
                let a = cx.graph.reshape(a, &[1, t, r])?;
                let b = cx.param(mix);
                let b = cx.graph.reshape(b, &[1, r, d])?;
                cx.graph.bmm(b, a, true, true)?
            }
            PromptPool::Dense(id) => {
                let p = cx.param(id);
                let p = cx.graph.reshape(p, &[1, t, d])?;
                let eye = cx.constant(Tensor::from_fn(&[1, d, d], |i| if i / d == i % d { T::one() } else { T::zero() }));
                cx.graph.bmm(eye, p, false, true)?
            }
        };
        cx.graph.reshape(pool_t, &[d, t, 1, 1])
    }

    /// Routing map `P_m` (`n × T × h × w`) and per-token prompts `P` (`n × d × h × w`).
    pub fn route<T: Scalar>(&self, cx: &mut Ctx<'_, T>, f2: Var) -> Result<(Var, Var)> {
        let logits = self.proj.forward(cx, f2)?;
        let logits = cx.graph.log_softmax_channels(logits)?;
        let shape = cx.graph.shape(logits).to_vec();
        let noise = cx.gumbel_noise(&shape);
        let hard = cx.routing != Routing::Soft;
        let pm = cx.graph.gumbel_softmax(logits, noise.as_ref(), cx.tau, hard)?;
        let w = self.pool_weight(cx)?;
        let p = cx.graph.conv2d(pm, w, None, ConvGeom::same(1))?;
        Ok((pm, p))
    }

    /// Every token gets the mean prompt of the pool.
    pub fn uniform_prompts<T: Scalar>(&self, cx: &mut Ctx<'_, T>, like: Var) -> Result<Var> {
        let [n, _, h, w] = cx.value(like).dims4()?;
        let t = self.cfg.prompts;
        let uniform = cx.constant(Tensor::full(&[n, t, h, w], T::from_f64(1.0 / t as f64)));
        let wt = self.pool_weight(cx)?;
        cx.graph.conv2d(uniform, wt, None, ConvGeom::same(1))
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let (t, d) = (self.cfg.prompts, self.cfg.state_dim);
        let pool = match self.pool {
            PromptPool::LowRank { .. } => 2 * t * self.cfg.rank * d,
            PromptPool::Dense(_) => 0,
        };
        Cost::node(
            "route",
            vec![self.proj.cost("logits", h, w), Cost::leaf("pool", pool as u64), Cost::leaf("prompts", (2 * t * d * h * w) as u64)],
        )
    }
}

/// Selective scan parameters over `c` channels with `d` states.
#[derive(Clone, Debug)]
pub struct ScanParams {
    pub delta: Conv2d,
    pub b: Conv2d,
    pub c: Conv2d,
    /// Pre-activation of the transition; `A = −softplus(a_raw)`.
    pub a_raw: ParamId,
    pub skip: ParamId,
    pub channels: usize,
    pub state_dim: usize,
}

impl ScanParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, d: usize) -> Self {
        let delta = Conv2d::new(init, "delta", c, c, 1);
        // Step sizes start log-spaced in [1e-3, 1e-1].
        let bias = delta.b.expect("delta has a bias");
        let steps: Vec<T> = (0..c)
            .map(|i| {
                let f = if c > 1 { i as f64 / (c - 1) as f64 } else { 0.5 };
                let dt = libm::exp(libm::log(1e-3) + f * (libm::log(1e-1) - libm::log(1e-3)));
                T::from_f64(inverse_softplus(dt))
            })
            .collect();
        init_overwrite(init, bias, steps);
        let b = Conv2d::build(init, "b_proj", c, d, 1, 1, 1, false, false);
        let cm = Conv2d::build(init, "c_proj", c, d, 1, 1, 1, false, false);
        // Transition magnitudes 1..d, the usual real diagonal initialization.
        let a_raw = init.zeros("a_log", &[c, d]);
        init_overwrite(init, a_raw, (0..c * d).map(|i| T::from_f64(inverse_softplus((i % d + 1) as f64))).collect());
        let skip = init.fill("skip", &[c], 1.0);
        Self { delta, b, c: cm, a_raw, skip, channels: c, state_dim: d }
    }

    /// Runs the scan over tokens already in scan order, with `prompts` added to
    /// the readout matrix.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, prompts: Option<Var>) -> Result<Var> {
        let dt = self.delta.forward(cx, x)?;
        let dt = cx.graph.softplus(dt);
        let a = cx.param(self.a_raw);
        let a = cx.graph.softplus(a);
        let a = cx.graph.neg(a);
        let b = self.b.forward(cx, x)?;
        let mut c = self.c.forward(cx, x)?;
        if let Some(p) = prompts {
            if cx.graph.shape(p) != cx.graph.shape(c) {
                return Err(shape_err!("prompt map {:?} does not match readout {:?}", cx.graph.shape(p), cx.graph.shape(c)));
            }
            c = cx.graph.add(c, p)?;
        }
        let skip = cx.param(self.skip);
        cx.graph.selective_scan(x, dt, a, b, c, skip)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let scan = 2 * 2 * self.channels * self.state_dim * h * w;
        Cost::node(
            "sse",
            vec![
                self.delta.cost("delta", h, w),
                self.b.cost("b", h, w),
                self.c.cost("c", h, w),
                Cost::leaf("scan", scan as u64),
            ],
        )
    }
}

fn inverse_softplus(y: f64) -> f64 {
    // log(exp(y) − 1), stable for large y.
    y + libm::log(-libm::expm1(-y))
}

fn init_overwrite<T: Scalar>(init: &mut Init<'_, T>, id: ParamId, values: Vec<T>) {
    let shape = init.store().value(id).shape().to_vec();
    init.overwrite(id, Tensor::from_vec(&shape, values).expect("same length"));
}

/// Tap name under which every routed block records its routing map.
pub const ROUTING_TAP: &str = "assb.routing";

/// Prompt-routed, semantically reordered state-space block.
#[derive(Clone, Debug)]
pub struct Assb {
    pub gate: PositionalGate,
    pub router: PromptRouter,
    pub scan: ScanParams,
    pub out: Conv2d,
    pub variant: AssbVariant,
}

/// Intermediate results of [`Assb::forward_traced`].
pub struct AssbTrace {
    pub gated: Var,
    pub routing: Option<Var>,
    pub prompts: Option<Var>,
    pub perms: Vec<SemanticPermutation>,
    pub out: Var,
}

impl Assb {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, cfg: PromptConfig, variant: AssbVariant, basis: Option<ParamId>) -> Self {
        let gate = PositionalGate::new(init, c);
        let basis = if variant == AssbVariant::NoLowRank { None } else { basis };
        let router = PromptRouter::new(init, c, cfg, basis);
        let scan = ScanParams::new(init, c, cfg.state_dim);
        let out = Conv2d::new(init, "out", c, c, 1);
        Self { gate, router, scan, out, variant }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(cx, x)?.out)
    }

    pub fn forward_traced<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<AssbTrace> {
        let [n, _, h, w] = cx.value(x).dims4()?;
        let gated = self.gate.forward(cx, x)?;
        let (routing, prompts, perms) = match self.variant {
            AssbVariant::NoRouting => {
                let p = self.router.uniform_prompts(cx, gated)?;
                (None, Some(p), vec![SemanticPermutation::identity(h * w); n])
            }
            _ => {
                let (pm, p) = self.router.route(cx, gated)?;
                cx.tap(ROUTING_TAP, pm);
                let perms = if self.variant == AssbVariant::NoReorder {
                    vec![SemanticPermutation::identity(h * w); n]
                } else {
                    route_index(cx.value(pm))?.iter().map(|k| SemanticPermutation::from_keys(k)).collect()
                };
                let p = (self.variant != AssbVariant::NoPromptPool).then_some(p);
                (Some(pm), p, perms)
            }
        };
        let seq = sgn_unfold(cx, gated, &perms)?;
        let prompt_seq = match prompts {
            Some(p) => Some(sgn_unfold(cx, p, &perms)?),
            None => None,
        };
        let y = self.scan.forward(cx, seq, prompt_seq)?;
        let y = sgn_fold(cx, y, &perms)?;
        let out = self.out.forward(cx, y)?;
        Ok(AssbTrace { gated, routing, prompts, perms, out })
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        Cost::node("assb", vec![self.gate.cost(h, w), self.router.cost(h, w), self.scan.cost(h, w), self.out.cost("out", h, w)])
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug)]
pub struct Seb {
    pub down: Conv2d,
    pub up: Conv2d,
}

impl Seb {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || reduction >= c || c % reduction != 0 {
            return Err(config_err!("SE reduction {reduction} must divide and be smaller than the width {c}"));
        }
        let mut init = init.sub("seb");
        Ok(Self { down: Conv2d::new(&mut init, "down", c, c / reduction, 1), up: Conv2d::new(&mut init, "up", c / reduction, c, 1) })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.graph.mean_spatial(x)?;
        let s = self.down.forward(cx, s)?;
        let s = cx.graph.gelu(s);
        let s = self.up.forward(cx, s)?;
        let s = cx.graph.sigmoid(s);
        cx.graph.mul(x, s)
    }

    pub fn cost(&self) -> Cost {
        Cost::node("seb", vec![self.down.cost("down", 1, 1), self.up.cost("up", 1, 1)])
    }
}

/// Stand-ins for the state-space branch used by ablations.
#[derive(Clone, Debug)]
pub enum GlobalBranch {
    Assb(Assb),
    Cnn(ResidualBlock),
    SelfAttention(ChannelAttention),
    None,
}

impl GlobalBranch {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Option<Var>> {
        Ok(match self {
            Self::Assb(a) => Some(a.forward(cx, x)?),
            Self::Cnn(rb) => Some(rb.branch(cx, x)?),
            Self::SelfAttention(sa) => Some(sa.forward(cx, x)?),
            Self::None => None,
        })
    }

    fn cost(&self, h: usize, w: usize) -> Option<Cost> {
        match self {
            Self::Assb(a) => Some(a.cost(h, w)),
            Self::Cnn(rb) => Some(rb.cost("cnn", h, w)),
            Self::SelfAttention(sa) => Some(sa.cost("sa", h, w)),
            Self::None => None,
        }
    }
}

/// The full low-frequency block.
#[derive(Clone, Debug)]
pub struct Lfeb {
    pub norm1: LayerNorm2d,
    pub global: GlobalBranch,
    pub seb: Option<Seb>,
    pub s1: ParamId,
    pub s2: ParamId,
    pub norm2: LayerNorm2d,
    pub ffn_in: Conv2d,
    pub ffn_out: Conv2d,
}

impl Lfeb {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, cfg: &LfebConfig, basis: Option<ParamId>) -> Result<Self> {
        cfg.prompt.validate()?;
        let norm1 = LayerNorm2d::new(init, "norm1", c);
        let global = match cfg.assb {
            AssbVariant::Cnn => GlobalBranch::Cnn(ResidualBlock::new(&mut init.sub("cnn"), c)),
            AssbVariant::SelfAttention => GlobalBranch::SelfAttention(ChannelAttention::new(&mut init.sub("sa"), c, cfg.heads)?),
            AssbVariant::None => GlobalBranch::None,
            v => GlobalBranch::Assb(Assb::new(&mut init.sub("assb"), c, cfg.prompt, v, basis)),
        };
        let seb = if cfg.seb { Some(Seb::new(init, c, cfg.seb_reduction)?) } else { None };
        let s1 = init.fill("s1", &[1], 1.0);
        let s2 = init.fill("s2", &[1], 1.0);
        let norm2 = LayerNorm2d::new(init, "norm2", c);
        let hidden = c * cfg.ffn_expansion;
        let ffn_in = Conv2d::new(init, "ffn_in", c, hidden, 1);
        let ffn_out = Conv2d::new(init, "ffn_out", hidden, c, 1);
        Ok(Self { norm1, global, seb, s1, s2, norm2, ffn_in, ffn_out })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let u = self.norm1.forward(cx, x)?;
        let mut mid = x;
        if let Some(g) = self.global.forward(cx, u)? {
            let g = scale_by(cx, self.s1, g)?;
            mid = cx.graph.add(mid, g)?;
        }
        if let Some(seb) = &self.seb {
            let s = seb.forward(cx, u)?;
            let s = scale_by(cx, self.s2, s)?;
            mid = cx.graph.add(mid, s)?;
        }
        let v = self.norm2.forward(cx, mid)?;
        let v = self.ffn_in.forward(cx, v)?;
        let v = cx.graph.gelu(v);
        let v = self.ffn_out.forward(cx, v)?;
        cx.graph.add(mid, v)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let mut parts = Vec::new();
        parts.extend(self.global.cost(h, w));
        parts.extend(self.seb.as_ref().map(Seb::cost));
        parts.push(Cost::node("ffn", vec![self.ffn_in.cost("in", h, w), self.ffn_out.cost("out", h, w)]));
        Cost::node("lfeb", parts)
    }
}
