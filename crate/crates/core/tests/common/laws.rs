//! Exact identities and permutation laws with their input strategies, shared
//! by the property tests and the acceptance run.

use fadpnet_core::freqsep::{split_frequency, LowPassSpec};
use fadpnet_core::hfeb::{channel_shuffle, Hfeb, HfebConfig, Hfr, ResidualBlock};
use fadpnet_core::lfeb::{sgn_fold, sgn_unfold, Lfeb, LfebConfig, PromptConfig, SemanticPermutation};
use fadpnet_core::nn::{Ctx, Init, ParamStore, Routing};
use fadpnet_core::{Graph, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

type Law = std::result::Result<(), TestCaseError>;

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// `(shape, data)` with every entry drawn from `[-4, 4)`.
pub fn feature_map(n: std::ops::Range<usize>, c: std::ops::Range<usize>, hw: std::ops::Range<usize>) -> impl Strategy<Value = Tensor<f32>> {
    (n, c, hw.clone(), hw).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-4.0f32..4.0, n * c * h * w).prop_map(move |d| Tensor::from_vec(&[n, c, h, w], d).unwrap())
    })
}

pub fn fold_input() -> impl Strategy<Value = (Tensor<f32>, Vec<Vec<u32>>)> {
    feature_map(1..3, 1..5, 1..6).prop_flat_map(|x| {
        let [n, _, h, w] = x.dims4().unwrap();
        (Just(x), prop::collection::vec(prop::collection::vec(0u32..5, h * w), n))
    })
}

pub fn fold_inverts_unfold(x: Tensor<f32>, keys: Vec<Vec<u32>>) -> Law {
    let store = ParamStore::<f32>::new();
    let mut cx = Ctx::new(&store, Routing::Eval);
    let perms: Vec<SemanticPermutation> = keys.iter().map(|k| SemanticPermutation::from_keys(k)).collect();
    let v = cx.constant(x.clone());
    let seq = sgn_unfold(&mut cx, v, &perms).unwrap();
    let back = sgn_fold(&mut cx, seq, &perms).unwrap();
    prop_assert_eq!(bits(cx.value(back)), bits(&x));
    // Scan order is a stable sort by key.
    let [n, c, h, w] = x.dims4().unwrap();
    let l = h * w;
    for b in 0..n {
        let order = &perms[b].forward;
        for i in 1..l {
            let (p, q) = (order[i - 1] as usize, order[i] as usize);
            prop_assert!(keys[b][p] < keys[b][q] || (keys[b][p] == keys[b][q] && p < q));
        }
        for ch in 0..c {
            for i in 0..l {
                let got = cx.value(seq).data()[(b * c + ch) * l + i];
                prop_assert_eq!(got.to_bits(), x.data()[(b * c + ch) * l + order[i] as usize].to_bits());
            }
        }
    }
    Ok(())
}

pub fn shuffle_input() -> impl Strategy<Value = ((usize, usize), usize, usize, u64)> {
    ((1usize..5, 1usize..5), 1usize..3, 1usize..4, any::<u64>())
}

pub fn shuffle_then_inverse_shuffle_is_identity((g1, g2): (usize, usize), n: usize, hw: usize, seed: u64) -> Law {
    let c = g1 * g2;
    let mut r = super::rng(seed);
    let x = super::uniform(&[n, c, hw, hw], &mut r, -1.0, 1.0).cast::<f32>();
    let store = ParamStore::<f32>::new();
    let mut cx = Ctx::new(&store, Routing::Eval);
    let v = cx.constant(x.clone());
    let s = channel_shuffle(&mut cx, v, g1).unwrap();
    let back = channel_shuffle(&mut cx, s, g2).unwrap();
    prop_assert_eq!(bits(cx.value(back)), bits(&x));
    // Channel i of the output is input channel (i % g1)·g2 + i / g1.
    for i in 0..c {
        let src = (i % g1) * g2 + i / g1;
        let plane = hw * hw;
        prop_assert_eq!(&cx.value(s).data()[i * plane..(i + 1) * plane], &x.data()[src * plane..(src + 1) * plane]);
    }
    Ok(())
}

pub fn warp_by_zero_offsets_is_identity(x: Tensor<f32>) -> Law {
    let [n, _, h, w] = x.dims4().unwrap();
    let mut g = Graph::<f32>::new();
    let v = g.constant(x.clone());
    let o = g.constant(Tensor::zeros(&[n, 2, h, w]));
    let y = g.warp(v, o).unwrap();
    prop_assert_eq!(bits(g.value(y)), bits(&x));
    Ok(())
}

pub fn residual_block_with_zero_branch_is_identity(x: Tensor<f32>, seed: u64) -> Law {
    let c = x.shape()[1];
    let mut store = ParamStore::<f32>::new();
    let rb = ResidualBlock::new(&mut Init::new(&mut store, &mut super::rng(seed)), c);
    prop_assert_eq!(store.zero_prefix("conv2."), 2);
    let mut cx = Ctx::new(&store, Routing::Eval);
    let v = cx.constant(x.clone());
    let y = rb.forward(&mut cx, v).unwrap();
    prop_assert_eq!(bits(cx.value(y)), bits(&x));
    Ok(())
}

pub fn low_frequency_block_with_zero_scales_and_head_is_identity(x: Tensor<f32>, seed: u64) -> Law {
    let mut store = ParamStore::<f32>::new();
    let cfg = LfebConfig { prompt: PromptConfig { prompts: 4, rank: 1, state_dim: 4 }, ..LfebConfig::default() };
    let block = {
        let mut r = super::rng(seed);
        let mut init = Init::new(&mut store, &mut r);
        let basis = init.uniform("prompt_basis", &[4, 1], 1.0);
        Lfeb::new(&mut init, 8, &cfg, Some(basis)).unwrap()
    };
    for prefix in ["s1", "s2", "ffn_out."] {
        prop_assert!(store.zero_prefix(prefix) > 0);
    }
    let mut cx = Ctx::new(&store, Routing::Eval);
    let v = cx.constant(x.clone());
    let y = block.forward(&mut cx, v).unwrap();
    prop_assert_eq!(bits(cx.value(y)), bits(&x));
    Ok(())
}

pub fn high_frequency_block_with_zero_expansion_is_identity(x: Tensor<f32>, seed: u64) -> Law {
    let mut store = ParamStore::<f32>::new();
    let cfg = HfebConfig { temp_hidden: 4, wide_blocks: 1, ..HfebConfig::default() };
    let block = Hfeb::new(&mut Init::new(&mut store, &mut super::rng(seed)), 4, &cfg).unwrap();
    prop_assert_eq!(store.zero_prefix("expand."), 2);
    let mut cx = Ctx::new(&store, Routing::Eval);
    let v = cx.constant(x.clone());
    let y = block.forward(&mut cx, v).unwrap();
    prop_assert_eq!(bits(cx.value(y)), bits(&x));
    Ok(())
}

pub fn refinement_cycles_compose(x: Tensor<f32>, seed: u64) -> Law {
    let mut store = ParamStore::<f32>::new();
    let cfg = HfebConfig { hfr_cycles: 3, ..HfebConfig::default() };
    let hfr = Hfr::new(&mut Init::new(&mut store, &mut super::rng(seed)), 4, &cfg).unwrap().unwrap();
    let mut cx = Ctx::new(&store, Routing::Eval);
    let v = cx.constant(x);
    let whole = hfr.forward(&mut cx, v).unwrap();
    let mut y = v;
    for _ in 0..3 {
        y = hfr.step(&mut cx, y).unwrap();
    }
    prop_assert_eq!(bits(cx.value(whole)), bits(cx.value(y)));
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SplitInput {
    pub spec: LowPassSpec,
    pub shape: [usize; 4],
    pub alpha: f64,
    pub seed: u64,
}

pub fn split_input() -> impl Strategy<Value = SplitInput> {
    (
        prop::sample::select(vec![3usize, 5]),
        any::<bool>(),
        0.5f64..2.0,
        (1usize..3, 1usize..4, 5usize..9, 5usize..9),
        -3.0f64..3.0,
        any::<u64>(),
    )
        .prop_map(|(k, gaussian, sigma, (n, c, h, w), alpha, seed)| SplitInput {
            spec: if gaussian { LowPassSpec::gaussian(k, sigma) } else { LowPassSpec::box_blur(k) },
            shape: [n, c, h, w],
            alpha,
            seed,
        })
}

pub fn frequency_split_is_additive_and_linear(input: SplitInput) -> Law {
    let SplitInput { spec, shape, alpha, seed } = input;
    let mut r = super::rng(seed);
    let a = super::uniform(&shape, &mut r, -1.0, 1.0);
    let b = super::uniform(&shape, &mut r, -1.0, 1.0);
    let split = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let (lo, hi) = split_frequency(&mut g, v, &spec).unwrap();
        (g.value(lo).clone(), g.value(hi).clone())
    };
    let (lo, hi) = split(&a);
    for i in 0..a.len() {
        prop_assert!((lo.data()[i] + hi.data()[i] - a.data()[i]).abs() <= 1e-15);
    }
    let mix = a.zip_map(&b, |x, y| alpha * x + y).unwrap();
    let (lm, hm) = split(&mix);
    let (lb, hb) = split(&b);
    for i in 0..a.len() {
        prop_assert!((lm.data()[i] - (alpha * lo.data()[i] + lb.data()[i])).abs() <= 1e-12);
        prop_assert!((hm.data()[i] - (alpha * hi.data()[i] + hb.data()[i])).abs() <= 1e-12);
    }
    // A constant map is entirely low frequency.
    let flat = Tensor::full(&shape, 0.37);
    let (lf, hf) = split(&flat);
    prop_assert!(lf.data().iter().all(|v| (v - 0.37).abs() < 1e-14));
    prop_assert!(hf.data().iter().all(|v| v.abs() < 1e-14));
    Ok(())
}

fn run<S: Strategy>(cases: u32, strategy: S, law: impl Fn(S::Value) -> Law) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, law).map_err(|e| e.to_string())
}

/// Runs every law over `cases` fresh random inputs. Returns `(name, outcome)`
/// per law.
pub fn check_all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("fold_inverts_unfold", run(cases, fold_input(), |(x, k)| fold_inverts_unfold(x, k))),
        ("channel_shuffle", run(cases, shuffle_input(), |(g, n, hw, s)| shuffle_then_inverse_shuffle_is_identity(g, n, hw, s))),
        ("zero_offset_warp", run(cases, feature_map(1..3, 1..4, 1..7), warp_by_zero_offsets_is_identity)),
        (
            "residual_block_zero_init",
            run(cases, (feature_map(1..3, 2..5, 1..6), any::<u64>()), |(x, s)| residual_block_with_zero_branch_is_identity(x, s)),
        ),
        (
            "lfeb_zero_init",
            run(cases, (feature_map(1..2, 8..9, 2..5), any::<u64>()), |(x, s)| {
                low_frequency_block_with_zero_scales_and_head_is_identity(x, s)
            }),
        ),
        (
            "hfeb_zero_init",
            run(cases, (feature_map(1..2, 4..5, 1..6), any::<u64>()), |(x, s)| {
                high_frequency_block_with_zero_expansion_is_identity(x, s)
            }),
        ),
        ("hfr_cycles", run(cases, (feature_map(1..3, 4..5, 1..7), any::<u64>()), |(x, s)| refinement_cycles_compose(x, s))),
        ("split_frequency", run(cases, split_input(), frequency_split_is_additive_and_linear)),
    ]
}
