//! The three-level U-shaped network, its configuration and ablation variants.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err};
use crate::freqsep::{split_frequency, LowPassSpec};
use crate::hfeb::{Hfeb, HfebConfig, HfrVariant, TempMode};
use crate::lfeb::{AssbVariant, Lfeb, LfebConfig, PromptConfig};
use crate::nn::{Conv2d, Ctx, Init, ParamId, ParamStore, Routing};
use crate::profile::Cost;
use crate::{Error, Result, Scalar, Tensor, Var};

/// How decoder features are aligned to the shallow features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// Offsets predicted from the shallow features drive a bilinear warp.
    #[default]
    Learned,
    /// No alignment: decoder features are added directly.
    Off,
    /// Warp with an identically zero displacement field.
    ZeroWarp,
    /// Warp with one learnable displacement shared by every pixel.
    FixedWarp,
    /// Convolutional correction from the concatenated features instead of a warp.
    ConvAlign,
}

/// Switches for the ablation studies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub hfr: HfrVariant,
    pub no_dpa: bool,
    pub dpa_fixed_temp: bool,
    pub dpa_no_pos: bool,
    pub no_seb: bool,
    pub swap_branches: bool,
    pub offsets: OffsetMode,
    pub assb_variant: AssbVariant,
}

/// Every hyperparameter needed to build (and profile) the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub lfeb_per_level: Vec<usize>,
    pub hfeb_per_level: Vec<usize>,
    pub prompt: PromptConfig,
    pub gumbel_tau: f64,
    pub seb_reduction: usize,
    pub ffn_expansion: usize,
    pub dpa_heads: usize,
    pub temp_hidden: usize,
    pub hfr_cycles: usize,
    pub shuffle_groups: usize,
    pub hfeb_wide_blocks: usize,
    pub lowpass: LowPassSpec,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            levels: 3,
            lfeb_per_level: vec![2, 2, 2],
            hfeb_per_level: vec![2, 3, 4],
            prompt: PromptConfig::default(),
            gumbel_tau: 1.0,
            seb_reduction: 4,
            ffn_expansion: 2,
            dpa_heads: 2,
            temp_hidden: 16,
            hfr_cycles: 2,
            shuffle_groups: 2,
            hfeb_wide_blocks: 3,
            lowpass: LowPassSpec::default(),
            ablation: Ablation::default(),
        }
    }
}

/// Names accepted by [`make_variant`].
pub const ABLATION_FLAGS: &[&str] = &[
    "no_hfr",
    "hfr_no_cs",
    "hfr_only5",
    "hfr_only7",
    "no_dpa",
    "dpa_fixed_temp",
    "dpa_no_pos",
    "dpa_fixed_temp_no_pos",
    "no_seb",
    "swap_branches",
    "no_offsets",
    "zero_offset_warp",
    "fixed_warp",
    "conv_align",
    "assb_none",
    "assb_cnn",
    "assb_sa",
    "assb_no_prompt_pool",
    "assb_no_routing",
    "assb_no_reorder",
    "assb_no_lowrank",
];

/// Returns `cfg` with the named ablation applied.
pub fn make_variant(cfg: &ModelConfig, flag: &str) -> Result<ModelConfig> {
    let mut out = cfg.clone();
    let a = &mut out.ablation;
    match flag {
        "no_hfr" => a.hfr = HfrVariant::Off,
        "hfr_no_cs" => a.hfr = HfrVariant::NoShuffle,
        "hfr_only5" => a.hfr = HfrVariant::Only5,
        "hfr_only7" => a.hfr = HfrVariant::Only7,
        "no_dpa" => a.no_dpa = true,
        "dpa_fixed_temp" => a.dpa_fixed_temp = true,
        "dpa_no_pos" => a.dpa_no_pos = true,
        "dpa_fixed_temp_no_pos" => {
            a.dpa_fixed_temp = true;
            a.dpa_no_pos = true;
        }
        "no_seb" => a.no_seb = true,
        "swap_branches" => a.swap_branches = true,
        "no_offsets" => a.offsets = OffsetMode::Off,
        "zero_offset_warp" => a.offsets = OffsetMode::ZeroWarp,
        "fixed_warp" => a.offsets = OffsetMode::FixedWarp,
        "conv_align" => a.offsets = OffsetMode::ConvAlign,
        "assb_none" => a.assb_variant = AssbVariant::None,
        "assb_cnn" => a.assb_variant = AssbVariant::Cnn,
        "assb_sa" => a.assb_variant = AssbVariant::SelfAttention,
        "assb_no_prompt_pool" => a.assb_variant = AssbVariant::NoPromptPool,
        "assb_no_routing" => a.assb_variant = AssbVariant::NoRouting,
        "assb_no_reorder" => a.assb_variant = AssbVariant::NoReorder,
        "assb_no_lowrank" => a.assb_variant = AssbVariant::NoLowRank,
        other => return Err(Error::UnknownFlag(other.to_string())),
    }
    Ok(out)
}

impl ModelConfig {
    /// The reduced-width variant.
    pub fn small() -> Self {
        Self { base_channels: 24, ..Self::default() }
    }

    /// Desk-scale configuration used by the overfitting experiments.
    pub fn toy() -> Self {
        Self { base_channels: 16, lfeb_per_level: vec![1, 1, 1], hfeb_per_level: vec![1, 1, 2], ..Self::default() }
    }

    /// Channel width at level `l` (0-based).
    pub fn width(&self, l: usize) -> usize {
        self.base_channels << l
    }

    pub fn lfeb_config(&self) -> LfebConfig {
        LfebConfig {
            prompt: self.prompt,
            seb_reduction: self.seb_reduction,
            ffn_expansion: self.ffn_expansion,
            assb: self.ablation.assb_variant,
            seb: !self.ablation.no_seb,
            heads: self.dpa_heads,
        }
    }

    pub fn hfeb_config(&self) -> HfebConfig {
        HfebConfig {
            hfr: self.ablation.hfr,
            hfr_cycles: self.hfr_cycles,
            shuffle_groups: self.shuffle_groups,
            dpa: !self.ablation.no_dpa,
            heads: self.dpa_heads,
            temp: if self.ablation.dpa_fixed_temp { TempMode::Fixed } else { TempMode::Generated },
            temp_hidden: self.temp_hidden,
            positional: !self.ablation.dpa_no_pos,
            wide_blocks: self.hfeb_wide_blocks,
        }
    }

    /// Checks every divisibility and range rule at every level.
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c == 0 || c % 2 != 0 {
            return Err(config_err!("base_channels must be a positive even number, got {c}"));
        }
        if self.levels == 0 {
            return Err(config_err!("levels must be >= 1"));
        }
        if self.lfeb_per_level.len() != self.levels || self.hfeb_per_level.len() != self.levels {
            return Err(config_err!(
                "block counts must list one entry per level ({}), got {:?} / {:?}",
                self.levels,
                self.lfeb_per_level,
                self.hfeb_per_level
            ));
        }
        if !(self.gumbel_tau > 0.0) {
            return Err(config_err!("gumbel_tau must be positive, got {}", self.gumbel_tau));
        }
        if self.ffn_expansion == 0 || self.temp_hidden == 0 {
            return Err(config_err!("ffn_expansion and temp_hidden must be >= 1"));
        }
        self.prompt.validate()?;
        self.lowpass.validate()?;
        for l in 0..self.levels {
            let w = self.width(l);
            let r = w / 2;
            if self.seb_reduction == 0 || self.seb_reduction >= w || w % self.seb_reduction != 0 {
                return Err(config_err!("seb_reduction {} incompatible with width {w}", self.seb_reduction));
            }
            if self.dpa_heads == 0 || r % self.dpa_heads != 0 || w % self.dpa_heads != 0 {
                return Err(config_err!("dpa_heads {} must divide widths {w} and {r}", self.dpa_heads));
            }
            if self.shuffle_groups < 2 || (4 * r) % self.shuffle_groups != 0 {
                return Err(config_err!("shuffle_groups {} must be >= 2 and divide {}", self.shuffle_groups, 4 * r));
            }
        }
        if self.hfr_cycles == 0 {
            return Err(config_err!("hfr_cycles must be >= 1"));
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn size_multiple(&self) -> usize {
        (1usize << (self.levels - 1)).max(4)
    }
}

/// Low- and high-frequency stacks of one U-shape stage, plus the merge.
#[derive(Clone, Debug)]
pub struct Stage {
    pub lfebs: Vec<Lfeb>,
    pub hfebs: Vec<Hfeb>,
    pub mix: Conv2d,
    pub swap: bool,
}

impl Stage {
    fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig, level: usize, basis: Option<ParamId>) -> Result<Self> {
        let c = cfg.width(level);
        let (lc, hc) = (cfg.lfeb_config(), cfg.hfeb_config());
        let lfebs = (0..cfg.lfeb_per_level[level])
            .map(|i| Lfeb::new(&mut init.sub(&format!("lfeb{i}")), c, &lc, basis))
            .collect::<Result<_>>()?;
        let hfebs =
            (0..cfg.hfeb_per_level[level]).map(|i| Hfeb::new(&mut init.sub(&format!("hfeb{i}")), c, &hc)).collect::<Result<_>>()?;
        let mix = Conv2d::new(init, "mix", c, c, 1);
        Ok(Self { lfebs, hfebs, mix, swap: cfg.ablation.swap_branches })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, name: &str, lowpass: &LowPassSpec) -> Result<Var> {
        let (lo, hi) = split_frequency(&mut cx.graph, x, lowpass)?;
        let (to_lfeb, to_hfeb) = if self.swap { (hi, lo) } else { (lo, hi) };
        let mut a = to_lfeb;
        for b in &self.lfebs {
            a = b.forward(cx, a)?;
        }
        let mut h = to_hfeb;
        for b in &self.hfebs {
            h = b.forward(cx, h)?;
        }
        cx.tap(format!("{name}.lfeb"), a);
        cx.tap(format!("{name}.hfeb"), h);
        let merged = cx.graph.add(a, h)?;
        self.mix.forward(cx, merged)
    }

    fn cost(&self, name: &str, h: usize, w: usize) -> Cost {
        let mut parts: Vec<Cost> = Vec::new();
        parts.extend(self.lfebs.iter().enumerate().map(|(i, b)| rename(b.cost(h, w), &format!("lfeb{i}"))));
        parts.extend(self.hfebs.iter().enumerate().map(|(i, b)| rename(b.cost(h, w), &format!("hfeb{i}"))));
        parts.push(self.mix.cost("mix", h, w));
        Cost::node(name, parts)
    }
}

fn rename(mut c: Cost, name: &str) -> Cost {
    c.name = name.to_string();
    c
}

/// Offset predictor / alignment branch.
#[derive(Clone, Debug)]
pub enum Aligner {
    Learned { conv1: Conv2d, conv2: Conv2d },
    Off,
    ZeroWarp,
    FixedWarp(ParamId),
    ConvAlign { conv1: Conv2d, conv2: Conv2d },
}

/// The assembled network. Holds parameter handles only; values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Fadpnet {
    pub cfg: ModelConfig,
    pub shallow: Conv2d,
    pub prompt_basis: Option<ParamId>,
    pub encoder: Vec<Stage>,
    pub down: Vec<Conv2d>,
    pub bottleneck: Stage,
    pub up: Vec<Conv2d>,
    pub skip_reduce: Vec<Conv2d>,
    pub decoder: Vec<Stage>,
    pub fuse: Conv2d,
    pub align: Aligner,
    pub tail: Conv2d,
}

/// Named intermediate results of a forward pass.
pub struct Forward {
    pub output: Var,
    pub shallow: Var,
    pub decoded: Var,
    pub offsets: Option<Var>,
    pub aligned: Var,
}

impl Fadpnet {
    /// Builds the network, registering all parameters in `store`.
    pub fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(store, rng);
        let c = cfg.base_channels;
        let levels = cfg.levels;
        let shallow = Conv2d::new(&mut init, "shallow", 3, c, 3);
        let prompt_basis = cfg
            .ablation
            .assb_variant
            .uses_shared_basis()
            .then(|| init.uniform("prompt_basis", &[cfg.prompt.prompts, cfg.prompt.rank], 1.0));
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..levels - 1 {
            encoder.push(Stage::new(&mut init.sub(&format!("enc{}", l + 1)), cfg, l, prompt_basis)?);
            down.push(Conv2d::strided(&mut init, &format!("down{}", l + 1), cfg.width(l), cfg.width(l + 1), 3, 2));
        }
        let bottleneck = Stage::new(&mut init.sub(&format!("mid{levels}")), cfg, levels - 1, prompt_basis)?;
        let mut up = Vec::new();
        let mut skip_reduce = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..levels - 1).rev() {
            let w = cfg.width(l);
            up.push(Conv2d::new(&mut init, &format!("up{}", l + 1), 2 * w, w, 3));
            skip_reduce.push(Conv2d::new(&mut init, &format!("skip{}", l + 1), 2 * w, w, 1));
            decoder.push(Stage::new(&mut init.sub(&format!("dec{}", l + 1)), cfg, l, prompt_basis)?);
        }
        let fused_width: usize = (0..levels).map(|l| cfg.width(l)).sum();
        let fuse = Conv2d::new(&mut init, "fuse", fused_width, c, 1);
        let align = match cfg.ablation.offsets {
            OffsetMode::Learned => {
                let mut i = init.sub("offsets");
                Aligner::Learned { conv1: Conv2d::new(&mut i, "conv1", c, c, 3), conv2: Conv2d::zeroed(&mut i, "conv2", c, 2, 3) }
            }
            OffsetMode::Off => Aligner::Off,
            OffsetMode::ZeroWarp => Aligner::ZeroWarp,
            OffsetMode::FixedWarp => Aligner::FixedWarp(init.zeros("fixed_offset", &[2])),
            OffsetMode::ConvAlign => {
                let mut i = init.sub("conv_align");
                Aligner::ConvAlign { conv1: Conv2d::new(&mut i, "conv1", 2 * c, c, 3), conv2: Conv2d::zeroed(&mut i, "conv2", c, c, 3) }
            }
        };
        let tail = Conv2d::new(&mut init, "tail", c, 3, 3);
        Ok(Self { cfg: cfg.clone(), shallow, prompt_basis, encoder, down, bottleneck, up, skip_reduce, decoder, fuse, align, tail })
    }

    /// Convenience constructor returning a fresh store as well.
    pub fn init<T: Scalar>(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let net = Self::new(cfg, &mut store, rng)?;
        Ok((net, store))
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(shape_err!("network input must be n x 3 x h x w, got {:?}", shape));
        };
        if c != 3 {
            return Err(shape_err!("network input must have 3 channels, got {c}"));
        }
        let m = self.cfg.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(shape_err!("input size {h}x{w} must be a positive multiple of {m}"));
        }
        let coarsest = h.min(w) >> (self.cfg.levels - 1);
        if coarsest < self.cfg.lowpass.kernel_size {
            return Err(shape_err!("input {h}x{w} too small: coarsest level {coarsest} below the low-pass kernel"));
        }
        Ok(())
    }

    /// Displacement field predicted from the shallow features.
    pub fn predict_offsets<T: Scalar>(&self, cx: &mut Ctx<'_, T>, f1: Var) -> Result<Option<Var>> {
        let [n, _, h, w] = cx.value(f1).dims4()?;
        Ok(match &self.align {
            Aligner::Learned { conv1, conv2 } => {
                let o = conv1.forward(cx, f1)?;
                let o = cx.graph.gelu(o);
                Some(conv2.forward(cx, o)?)
            }
            Aligner::ZeroWarp => Some(cx.constant(Tensor::zeros(&[n, 2, h, w]))),
            Aligner::FixedWarp(id) => {
                let o = cx.param(*id);
                let o = cx.graph.reshape(o, &[1, 2, 1, 1])?;
                let zeros = cx.constant(Tensor::zeros(&[n, 2, h, w]));
                Some(cx.graph.add(zeros, o)?)
            }
            Aligner::Off | Aligner::ConvAlign { .. } => None,
        })
    }

    /// Full forward pass from the pre-upsampled degraded image.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, input: Var) -> Result<Forward> {
        self.check_input(cx.graph.shape(input))?;
        cx.tau = self.cfg.gumbel_tau;
        let levels = self.cfg.levels;
        let lowpass = self.cfg.lowpass;
        let f1 = self.shallow.forward(cx, input)?;

        let mut skips = Vec::new();
        let mut x = f1;
        for l in 0..levels - 1 {
            x = self.encoder[l].forward(cx, x, &format!("enc{}", l + 1), &lowpass)?;
            skips.push(x);
            x = self.down[l].forward(cx, x)?;
        }
        x = self.bottleneck.forward(cx, x, &format!("mid{levels}"), &lowpass)?;
        let mut decoded = vec![x];
        for (i, l) in (0..levels - 1).rev().enumerate() {
            let u = cx.graph.upsample_nearest(x, 2)?;
            let u = self.up[i].forward(cx, u)?;
            let cat = cx.graph.concat_channels(&[u, skips[l]])?;
            let r = self.skip_reduce[i].forward(cx, cat)?;
            x = self.decoder[i].forward(cx, r, &format!("dec{}", l + 1), &lowpass)?;
            decoded.push(x);
        }
        // Coarse-to-fine outputs, each brought to full resolution.
        let mut parts = Vec::new();
        for (i, &d) in decoded.iter().enumerate().rev() {
            let factor = 1 << (levels - 1 - i);
            parts.push(if factor == 1 { d } else { cx.graph.upsample_nearest(d, factor)? });
        }
        let cat = cx.graph.concat_channels(&parts)?;
        let f2 = self.fuse.forward(cx, cat)?;

        let offsets = self.predict_offsets(cx, f1)?;
        if let Some(o) = offsets {
            cx.tap(OFFSET_TAP, o);
        }
        let f3 = match (&self.align, offsets) {
            (_, Some(o)) => cx.graph.warp(f2, o)?,
            (Aligner::ConvAlign { conv1, conv2 }, None) => {
                let cat = cx.graph.concat_channels(&[f1, f2])?;
                let c = conv1.forward(cx, cat)?;
                let c = cx.graph.gelu(c);
                let c = conv2.forward(cx, c)?;
                cx.graph.add(f2, c)?
            }
            _ => f2,
        };
        let aligned = cx.graph.add(f1, f3)?;
        let output = self.tail.forward(cx, aligned)?;
        Ok(Forward { output, shallow: f1, decoded: f2, offsets, aligned })
    }

    /// Inference on a batch tensor, without gradient bookkeeping beyond the graph.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::new(store, Routing::Eval);
        let x = cx.constant(input.clone());
        let out = self.forward(&mut cx, x)?.output;
        Ok(cx.graph.value(out).clone())
    }

    /// FLOP breakdown for one `h × w` input image.
    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let levels = self.cfg.levels;
        let mut parts = vec![self.shallow.cost("shallow", h, w)];
        for l in 0..levels - 1 {
            let (hh, ww) = (h >> l, w >> l);
            parts.push(self.encoder[l].cost(&format!("enc{}", l + 1), hh, ww));
            parts.push(self.down[l].cost(&format!("down{}", l + 1), hh, ww));
        }
        parts.push(self.bottleneck.cost(&format!("mid{levels}"), h >> (levels - 1), w >> (levels - 1)));
        for (i, l) in (0..levels - 1).rev().enumerate() {
            let (hh, ww) = (h >> l, w >> l);
            parts.push(self.up[i].cost(&format!("up{}", l + 1), hh, ww));
            parts.push(self.skip_reduce[i].cost(&format!("skip{}", l + 1), hh, ww));
            parts.push(self.decoder[i].cost(&format!("dec{}", l + 1), hh, ww));
        }
        parts.push(self.fuse.cost("fuse", h, w));
        match &self.align {
            Aligner::Learned { conv1, conv2 } => {
                parts.push(Cost::node("offsets", vec![conv1.cost("conv1", h, w), conv2.cost("conv2", h, w)]))
            }
            Aligner::ConvAlign { conv1, conv2 } => {
                parts.push(Cost::node("conv_align", vec![conv1.cost("conv1", h, w), conv2.cost("conv2", h, w)]))
            }
            _ => {}
        }
        parts.push(self.tail.cost("tail", h, w));
        Cost::node("fadpnet", parts)
    }
}

/// Analytic FLOPs of the network described by `cfg` on an `h × w` input.
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<Cost> {
    let m = cfg.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(shape_err!("input size {h}x{w} must be a multiple of {m}"));
    }
    let mut rng = Counter(0);
    let mut store = ParamStore::<f32>::new();
    let net = Fadpnet::new(cfg, &mut store, &mut rng)?;
    Ok(net.cost(h, w))
}

/// Deterministic filler stream; only shapes matter when estimating FLOPs.
struct Counter(u64);

impl RngCore for Counter {
    fn next_u32(&mut self) -> u32 {
        self.next_u64() as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        self.0
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for b in dst {
            *b = self.next_u64() as u8;
        }
    }
}

/// Tap name of the displacement field that drives the warp.
pub const OFFSET_TAP: &str = "offsets";

/// Tap names recorded for the low- and high-frequency stacks of a stage.
pub fn stage_taps(stage: &str) -> (String, String) {
    (format!("{stage}.lfeb"), format!("{stage}.hfeb"))
}
