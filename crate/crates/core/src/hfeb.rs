//! High-frequency enhancement block: residual convolutions, the recurrent
//! multi-kernel refinement path and depthwise position-aware channel attention
//! on a channel-reduced trunk.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err};
use crate::nn::{Conv2d, Ctx, Init, ParamId};
use crate::profile::Cost;
use crate::{Error, Result, Scalar, Var};

/// Kernel set of the refinement path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HfrVariant {
    /// Parallel 7×7 and 5×5 depthwise kernels with channel shuffle.
    #[default]
    Full,
    /// Same kernels, shuffle removed.
    NoShuffle,
    /// Two parallel 5×5 kernels.
    Only5,
    /// Two parallel 7×7 kernels.
    Only7,
    /// Refinement path removed.
    Off,
}

impl HfrVariant {
    fn kernels(self) -> Option<(usize, usize)> {
        match self {
            Self::Full | Self::NoShuffle => Some((7, 5)),
            Self::Only5 => Some((5, 5)),
            Self::Only7 => Some((7, 7)),
            Self::Off => None,
        }
    }
}

/// Attention temperature source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TempMode {
    /// Per-head scalars generated from the pooled input.
    #[default]
    Generated,
    /// One learnable scalar per head.
    Fixed,
}

/// Per-block hyperparameters of the high-frequency path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HfebConfig {
    pub hfr: HfrVariant,
    pub hfr_cycles: usize,
    pub shuffle_groups: usize,
    pub dpa: bool,
    pub heads: usize,
    pub temp: TempMode,
    pub temp_hidden: usize,
    pub positional: bool,
    /// Residual blocks applied at full width before the channel reduction.
    pub wide_blocks: usize,
}

impl Default for HfebConfig {
    fn default() -> Self {
        Self {
            hfr: HfrVariant::Full,
            hfr_cycles: 2,
            shuffle_groups: 2,
            dpa: true,
            heads: 2,
            temp: TempMode::Generated,
            temp_hidden: 16,
            positional: true,
            wide_blocks: 3,
        }
    }
}

/// Channel permutation of a grouped shuffle: the channels viewed as
/// `groups × (c / groups)` and transposed.
pub fn shuffle_permutation(c: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || c % groups != 0 {
        return Err(shape_err!("channel shuffle: {c} channels not divisible into {groups} groups"));
    }
    let per = c / groups;
    Ok((0..c).map(|i| (i % groups) * per + i / groups).collect())
}

pub fn channel_shuffle<T: Scalar>(cx: &mut Ctx<'_, T>, x: Var, groups: usize) -> Result<Var> {
    let c = cx.graph.shape(x).get(1).copied().unwrap_or(0);
    let perm = shuffle_permutation(c, groups)?;
    cx.graph.permute_channels(x, &perm)
}

/// `x + Conv3×3(GELU(Conv3×3(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize) -> Self {
        Self { conv1: Conv2d::new(init, "conv1", c, c, 3), conv2: Conv2d::new(init, "conv2", c, c, 3) }
    }

    /// The residual branch alone.
    pub fn branch<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = cx.graph.gelu(y);
        self.conv2.forward(cx, y)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.branch(cx, x)?;
        cx.graph.add(x, y)
    }

    pub fn cost(&self, name: &str, h: usize, w: usize) -> Cost {
        Cost::node(name, vec![self.conv1.cost("conv1", h, w), self.conv2.cost("conv2", h, w)])
    }
}

/// Recurrent multi-kernel depthwise refinement with shared weights.
#[derive(Clone, Debug)]
pub struct Hfr {
    pub dw_a: Conv2d,
    pub dw_b: Conv2d,
    pub expand: Conv2d,
    pub reduce: Conv2d,
    pub cycles: usize,
    pub shuffle_groups: Option<usize>,
}

impl Hfr {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, cfg: &HfebConfig) -> Result<Option<Self>> {
        let Some((ka, kb)) = cfg.hfr.kernels() else { return Ok(None) };
        if cfg.hfr_cycles == 0 {
            return Err(config_err!("refinement cycles must be >= 1"));
        }
        let shuffle_groups = (cfg.hfr != HfrVariant::NoShuffle).then_some(cfg.shuffle_groups);
        if let Some(g) = shuffle_groups {
            if g < 2 || (4 * c) % g != 0 {
                return Err(config_err!("shuffle groups {g} must be >= 2 and divide {}", 4 * c));
            }
        }
        let mut init = init.sub("hfr");
        Ok(Some(Self {
            dw_a: Conv2d::depthwise(&mut init, &format!("dw{ka}a"), c, ka),
            dw_b: Conv2d::depthwise(&mut init, &format!("dw{kb}b"), c, kb),
            expand: Conv2d::new(&mut init, "expand", 2 * c, 4 * c, 1),
            reduce: Conv2d::new(&mut init, "reduce", 4 * c, c, 1),
            cycles: cfg.hfr_cycles,
            shuffle_groups,
        }))
    }

    /// One refinement cycle.
    pub fn step<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = self.dw_a.forward(cx, x)?;
        let b = self.dw_b.forward(cx, x)?;
        let cat = cx.graph.concat_channels(&[a, b])?;
        let mut y = self.expand.forward(cx, cat)?;
        if let Some(g) = self.shuffle_groups {
            y = channel_shuffle(cx, y, g)?;
        }
        self.reduce.forward(cx, y)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        for _ in 0..self.cycles {
            y = self.step(cx, y)?;
        }
        Ok(y)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let cycle = |i: usize| {
            Cost::node(
                &format!("cycle{i}"),
                vec![
                    self.dw_a.cost("dw_a", h, w),
                    self.dw_b.cost("dw_b", h, w),
                    self.expand.cost("expand", h, w),
                    self.reduce.cost("reduce", h, w),
                ],
            )
        };
        Cost::node("hfr", (0..self.cycles).map(cycle).collect())
    }
}

/// Projects `x` to per-head query/key/value maps: `n·heads × m × L` each.
struct HeadSplit {
    q: Var,
    k: Var,
    v: Var,
}

fn split_heads<T: Scalar>(cx: &mut Ctx<'_, T>, qkv: Var, heads: usize) -> Result<HeadSplit> {
    let [n, c3, h, w] = cx.value(qkv).dims4()?;
    let c = c3 / 3;
    let m = c / heads;
    let mut parts = [qkv; 3];
    for (i, p) in parts.iter_mut().enumerate() {
        let s = cx.graph.slice_channels(qkv, i * c, c)?;
        *p = cx.graph.reshape(s, &[n * heads, m, h * w])?;
    }
    Ok(HeadSplit { q: parts[0], k: parts[1], v: parts[2] })
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(config_err!("{heads} attention heads do not divide {c} channels"));
    }
    Ok(())
}

/// Depthwise position-aware channel attention.
#[derive(Clone, Debug)]
pub struct Dpa {
    pub qkv: Conv2d,
    pub qkv_dw: Conv2d,
    pub temp: Temperature,
    pub pos: Option<(Conv2d, Conv2d)>,
    pub proj: Conv2d,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub enum Temperature {
    Generated { w3: Conv2d, w2: Conv2d },
    Fixed(ParamId),
}

impl Dpa {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, cfg: &HfebConfig) -> Result<Self> {
        check_heads(c, cfg.heads)?;
        let mut init = init.sub("dpa");
        let qkv = Conv2d::new(&mut init, "qkv", c, 3 * c, 1);
        let qkv_dw = Conv2d::depthwise(&mut init, "qkv_dw", 3 * c, 3);
        let temp = match cfg.temp {
            TempMode::Generated => Temperature::Generated {
                w3: Conv2d::new(&mut init, "temp_w3", c, cfg.temp_hidden, 1),
                w2: Conv2d::new(&mut init, "temp_w2", cfg.temp_hidden, cfg.heads, 1),
            },
            TempMode::Fixed => Temperature::Fixed(init.fill("temp", &[cfg.heads], 1.0)),
        };
        let pos = cfg
            .positional
            .then(|| (Conv2d::new(&mut init, "pos1", c, c, 1), Conv2d::new(&mut init, "pos2", c, c, 1)));
        let proj = Conv2d::new(&mut init, "proj", c, c, 1);
        Ok(Self { qkv, qkv_dw, temp, pos, proj, heads: cfg.heads })
    }

    /// Per-head temperature, `n × heads × 1 × 1` or `1 × heads × 1 × 1`.
    pub fn temperature<T: Scalar>(&self, cx: &mut Ctx<'_, T>, y: Var) -> Result<Var> {
        match &self.temp {
            Temperature::Generated { w3, w2 } => {
                let s = cx.graph.mean_spatial(y)?;
                let s = w3.forward(cx, s)?;
                let s = cx.graph.gelu(s);
                w2.forward(cx, s)
            }
            Temperature::Fixed(id) => {
                let t = cx.param(*id);
                cx.graph.reshape(t, &[1, self.heads, 1, 1])
            }
        }
    }

    /// Non-negative attention maps, `n × heads × m × m`.
    pub fn attention<T: Scalar>(&self, cx: &mut Ctx<'_, T>, y: Var) -> Result<(Var, Var)> {
        let [n, c, h, w] = cx.value(y).dims4()?;
        let m = c / self.heads;
        let qkv = self.qkv.forward(cx, y)?;
        let qkv = self.qkv_dw.forward(cx, qkv)?;
        let HeadSplit { q, k, v } = split_heads(cx, qkv, self.heads)?;
        let s = cx.graph.bmm(q, k, false, true)?;
        let s = cx.graph.scale(s, 1.0 / (h * w) as f64);
        let s = cx.graph.reshape(s, &[n, self.heads, m, m])?;
        let t = self.temperature(cx, y)?;
        let s = cx.graph.mul(s, t)?;
        let a = cx.graph.relu(s);
        let vals = cx.value(a).data();
        if let Some(bad) = vals.iter().position(|v| !v.is_finite()) {
            let head = (bad / (m * m)) % self.heads;
            return Err(Error::Numerical(format!("non-finite attention score in head {head}")));
        }
        Ok((a, v))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, y: Var) -> Result<Var> {
        check_heads(cx.graph.shape(y)[1], self.heads)?;
        let [n, c, h, w] = cx.value(y).dims4()?;
        let m = c / self.heads;
        let (a, v) = self.attention(cx, y)?;
        let a = cx.graph.reshape(a, &[n * self.heads, m, m])?;
        // Token-major reading of V·A: out_i = Σ_j A[j, i] v_j.
        let out = cx.graph.bmm(a, v, true, false)?;
        let mut out = cx.graph.reshape(out, &[n, c, h, w])?;
        if let Some((p1, p2)) = &self.pos {
            let p = p1.forward(cx, y)?;
            let p = cx.graph.gelu(p);
            let p = p2.forward(cx, p)?;
            let p = cx.graph.sigmoid(p);
            out = cx.graph.add(out, p)?;
        }
        self.proj.forward(cx, out)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let c = self.proj.cin;
        let m = c / self.heads;
        let products = (2 * 2 * m * m * h * w * self.heads) as u64;
        let mut parts = vec![self.qkv.cost("qkv", h, w), self.qkv_dw.cost("qkv_dw", h, w), Cost::leaf("attention", products)];
        if let Temperature::Generated { w3, w2 } = &self.temp {
            parts.push(Cost::node("temp", vec![w3.cost("w3", 1, 1), w2.cost("w2", 1, 1)]));
        }
        if let Some((p1, p2)) = &self.pos {
            parts.push(Cost::node("pos", vec![p1.cost("pos1", h, w), p2.cost("pos2", h, w)]));
        }
        parts.push(self.proj.cost("proj", h, w));
        Cost::node("dpa", parts)
    }
}

/// Multi-head transposed self-attention with softmax normalization and a
/// learnable per-head temperature; stand-in for the state-space branch in
/// ablations.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub qkv: Conv2d,
    pub qkv_dw: Conv2d,
    pub temp: ParamId,
    pub proj: Conv2d,
    pub heads: usize,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, heads: usize) -> Result<Self> {
        check_heads(c, heads)?;
        Ok(Self {
            qkv: Conv2d::new(init, "qkv", c, 3 * c, 1),
            qkv_dw: Conv2d::depthwise(init, "qkv_dw", 3 * c, 3),
            temp: init.fill("temp", &[heads], 1.0),
            proj: Conv2d::new(init, "proj", c, c, 1),
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, y: Var) -> Result<Var> {
        let [n, c, h, w] = cx.value(y).dims4()?;
        let m = c / self.heads;
        let qkv = self.qkv.forward(cx, y)?;
        let qkv = self.qkv_dw.forward(cx, qkv)?;
        let HeadSplit { q, k, v } = split_heads(cx, qkv, self.heads)?;
        // Scores transposed (keys along the channel axis) so the softmax runs
        // over keys for every query.
        let st = cx.graph.bmm(k, q, false, true)?;
        let st = cx.graph.scale(st, 1.0 / (h * w) as f64);
        let st = cx.graph.reshape(st, &[n, self.heads, m, m])?;
        let t = cx.param(self.temp);
        let t = cx.graph.reshape(t, &[1, self.heads, 1, 1])?;
        let st = cx.graph.mul(st, t)?;
        let st = cx.graph.reshape(st, &[n * self.heads, m, m, 1])?;
        let p = cx.graph.log_softmax_channels(st)?;
        let p = cx.graph.exp(p);
        let p = cx.graph.reshape(p, &[n * self.heads, m, m])?;
        let out = cx.graph.bmm(p, v, true, false)?;
        let out = cx.graph.reshape(out, &[n, c, h, w])?;
        self.proj.forward(cx, out)
    }

    pub fn cost(&self, name: &str, h: usize, w: usize) -> Cost {
        let c = self.proj.cin;
        let m = c / self.heads;
        let products = (2 * 2 * m * m * h * w * self.heads) as u64;
        Cost::node(
            name,
            vec![self.qkv.cost("qkv", h, w), self.qkv_dw.cost("qkv_dw", h, w), Cost::leaf("attention", products), self.proj.cost("proj", h, w)],
        )
    }
}

/// The full high-frequency block.
#[derive(Clone, Debug)]
pub struct Hfeb {
    pub wide: Vec<ResidualBlock>,
    pub reduce: Conv2d,
    pub rb1: ResidualBlock,
    pub dpa: Option<Dpa>,
    pub rb2: ResidualBlock,
    pub hfr: Option<Hfr>,
    pub expand: Conv2d,
}

impl Hfeb {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, cfg: &HfebConfig) -> Result<Self> {
        if c % 2 != 0 {
            return Err(config_err!("high-frequency block width must be even, got {c}"));
        }
        let r = c / 2;
        let wide = (0..cfg.wide_blocks).map(|i| ResidualBlock::new(&mut init.sub(&format!("wide{i}")), c)).collect();
        let reduce = Conv2d::new(init, "reduce", c, r, 1);
        let rb1 = ResidualBlock::new(&mut init.sub("rb1"), r);
        let dpa = if cfg.dpa { Some(Dpa::new(init, r, cfg)?) } else { None };
        let rb2 = ResidualBlock::new(&mut init.sub("rb2"), r);
        let hfr = Hfr::new(init, r, cfg)?;
        let expand = Conv2d::new(init, "expand", r, c, 1);
        Ok(Self { wide, reduce, rb1, dpa, rb2, hfr, expand })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut z = x;
        for rb in &self.wide {
            z = rb.forward(cx, z)?;
        }
        let r = self.reduce.forward(cx, z)?;
        let mut t = self.rb1.forward(cx, r)?;
        if let Some(dpa) = &self.dpa {
            let a = dpa.forward(cx, t)?;
            t = cx.graph.add(t, a)?;
        }
        t = self.rb2.forward(cx, t)?;
        if let Some(hfr) = &self.hfr {
            let f = hfr.forward(cx, r)?;
            t = cx.graph.add(t, f)?;
        }
        let e = self.expand.forward(cx, t)?;
        cx.graph.add(x, e)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let mut parts: Vec<Cost> = self.wide.iter().enumerate().map(|(i, rb)| rb.cost(&format!("wide{i}"), h, w)).collect();
        parts.push(self.reduce.cost("reduce", h, w));
        parts.push(self.rb1.cost("rb1", h, w));
        parts.extend(self.dpa.as_ref().map(|d| d.cost(h, w)));
        parts.push(self.rb2.cost("rb2", h, w));
        parts.extend(self.hfr.as_ref().map(|f| f.cost(h, w)));
        parts.push(self.expand.cost("expand", h, w));
        Cost::node("hfeb", parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_examples() {
        assert_eq!(shuffle_permutation(4, 2).unwrap(), vec![0, 2, 1, 3]);
        assert_eq!(shuffle_permutation(6, 1).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert!(shuffle_permutation(6, 4).is_err());
        let a = shuffle_permutation(12, 3).unwrap();
        let b = shuffle_permutation(12, 4).unwrap();
        let composed: Vec<usize> = (0..12).map(|i| a[b[i]]).collect();
        assert_eq!(composed, (0..12).collect::<Vec<_>>());
    }
}
