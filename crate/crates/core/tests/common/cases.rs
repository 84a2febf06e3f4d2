//! Gradient-check cases shared by the per-block tests and the acceptance run.

use super::{grad_check, jitter, rng, uniform, GradReport};
use fadpnet_core::hfeb::{Dpa, Hfeb, HfebConfig, Hfr, ResidualBlock};
use fadpnet_core::lfeb::{Lfeb, LfebConfig, PositionalGate, PromptConfig, PromptRouter, ScanParams, Seb};
use fadpnet_core::net::{Fadpnet, ModelConfig};
use fadpnet_core::nn::{Conv2d, Init, LayerNorm2d, ParamStore, Routing};
use fadpnet_core::{Graph, Tensor};

/// Relative error bound for every case.
pub const TOL: f64 = 1e-4;

const SMALL_PROMPT: PromptConfig = PromptConfig { prompts: 4, rank: 1, state_dim: 4 };

fn small_hfeb() -> HfebConfig {
    HfebConfig { temp_hidden: 4, wide_blocks: 1, ..HfebConfig::default() }
}

pub fn positional_gate() -> GradReport {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let gate = PositionalGate::new(&mut Init::new(&mut store, &mut r), 4);
    let x = store.add("input", uniform(&[2, 4, 5, 6], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Eval, 40, 11, |cx| {
        let x = cx.param(x);
        gate.forward(cx, x)
    })
}

pub fn routed_prompts_soft_path() -> GradReport {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let router = {
        let mut init = Init::new(&mut store, &mut r);
        let basis = init.uniform("prompt_basis", &[SMALL_PROMPT.prompts, SMALL_PROMPT.rank], 1.0);
        PromptRouter::new(&mut init, 6, SMALL_PROMPT, Some(basis))
    };
    let x = store.add("input", uniform(&[1, 6, 4, 5], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Soft, 40, 12, |cx| {
        let x = cx.param(x);
        let (pm, p) = router.route(cx, x)?;
        // Both outputs feed the loss.
        let pm2 = cx.graph.slice_channels(pm, 0, SMALL_PROMPT.state_dim)?;
        cx.graph.add(p, pm2)
    })
}

pub fn straight_through_passes_the_soft_gradient() -> GradReport {
    let mut r = rng(3);
    let logits = uniform(&[2, 5, 3, 3], &mut r, -2.0, 2.0);
    let noise = uniform(&[2, 5, 3, 3], &mut r, -0.5, 0.5);
    let seed = uniform(&[2, 5, 3, 3], &mut r, -1.0, 1.0);
    let grad_of = |hard: bool| {
        let mut store = ParamStore::new();
        let id = store.add("logits", logits.clone());
        let mut g = Graph::new();
        let l = g.param(&store, id);
        let y = g.gumbel_softmax(l, Some(&noise), 0.7, hard).unwrap();
        let rows = g.value(y).clone();
        (g.backward_with(y, seed.clone()).param(id).unwrap().clone(), rows)
    };
    let (hard, one_hot) = grad_of(true);
    let (soft, _) = grad_of(false);
    // Identical gradients, and a one-hot forward value per token.
    let mut report = GradReport { worst: 0.0, worst_at: String::new(), checked: 0, skipped: 0 };
    for (k, (a, s)) in hard.data().iter().zip(soft.data()).enumerate() {
        report.checked += 1;
        let err = (a - s).abs() / a.abs().max(s.abs()).max(1e-6);
        if err > report.worst {
            report.worst = err;
            report.worst_at = format!("logits[{k}] hard {a:.6e} soft {s:.6e}");
        }
    }
    for t in 0..2 * 9 {
        let (n, p) = (t / 9, t % 9);
        let col: Vec<f64> = (0..5).map(|k| one_hot.data()[n * 45 + k * 9 + p]).collect();
        let ones = col.iter().filter(|&&v| v == 1.0).count();
        let zeros = col.iter().filter(|&&v| v == 0.0).count();
        if (ones, zeros) != (1, 4) {
            report.worst = f64::INFINITY;
            report.worst_at = format!("token {t} is not one-hot: {col:?}");
        }
    }
    report
}

pub fn selective_scan_with_prompts() -> GradReport {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let scan = ScanParams::new(&mut Init::new(&mut store, &mut r), 3, 4);
    jitter(&mut store, &mut r, 0.2);
    let x = store.add("input", uniform(&[2, 3, 1, 7], &mut r, -1.0, 1.0));
    let p = store.add("prompts", uniform(&[2, 4, 1, 7], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Eval, 40, 13, |cx| {
        let (x, p) = (cx.param(x), cx.param(p));
        scan.forward(cx, x, Some(p))
    })
}

pub fn squeeze_excitation() -> GradReport {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let seb = Seb::new(&mut Init::new(&mut store, &mut r), 8, 4).unwrap();
    let x = store.add("input", uniform(&[2, 8, 3, 4], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Eval, 40, 14, |cx| {
        let x = cx.param(x);
        seb.forward(cx, x)
    })
}

pub fn low_frequency_block() -> GradReport {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let cfg = LfebConfig { prompt: SMALL_PROMPT, ..LfebConfig::default() };
    let block = {
        let mut init = Init::new(&mut store, &mut r);
        let basis = init.uniform("prompt_basis", &[SMALL_PROMPT.prompts, SMALL_PROMPT.rank], 1.0);
        Lfeb::new(&mut init, 8, &cfg, Some(basis)).unwrap()
    };
    jitter(&mut store, &mut r, 0.1);
    let x = store.add("input", uniform(&[1, 8, 4, 4], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Soft, 12, 15, |cx| {
        let x = cx.param(x);
        block.forward(cx, x)
    })
}

pub fn layer_norm() -> GradReport {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let ln = LayerNorm2d::new(&mut Init::new(&mut store, &mut r), "ln", 5);
    jitter(&mut store, &mut r, 0.3);
    let x = store.add("input", uniform(&[2, 5, 3, 3], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Eval, 40, 16, |cx| {
        let x = cx.param(x);
        ln.forward(cx, x)
    })
}

pub fn refinement_path() -> GradReport {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let hfr = Hfr::new(&mut Init::new(&mut store, &mut r), 4, &HfebConfig::default()).unwrap().unwrap();
    let x = store.add("input", uniform(&[1, 4, 8, 8], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Eval, 30, 17, |cx| {
        let x = cx.param(x);
        hfr.forward(cx, x)
    })
}

pub fn position_aware_attention() -> GradReport {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let dpa = Dpa::new(&mut Init::new(&mut store, &mut r), 4, &small_hfeb()).unwrap();
    let x = store.add("input", uniform(&[2, 4, 4, 5], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Eval, 30, 18, |cx| {
        let x = cx.param(x);
        dpa.forward(cx, x)
    })
}

pub fn residual_block() -> GradReport {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let rb = ResidualBlock::new(&mut Init::new(&mut store, &mut r), 4);
    let x = store.add("input", uniform(&[2, 4, 5, 5], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Eval, 30, 19, |cx| {
        let x = cx.param(x);
        rb.forward(cx, x)
    })
}

pub fn high_frequency_block() -> GradReport {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let block = Hfeb::new(&mut Init::new(&mut store, &mut r), 8, &small_hfeb()).unwrap();
    let x = store.add("input", uniform(&[1, 8, 6, 6], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Eval, 12, 20, |cx| {
        let x = cx.param(x);
        block.forward(cx, x)
    })
}

pub fn strided_and_grouped_convolution() -> GradReport {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let (down, dw) = {
        let mut init = Init::new(&mut store, &mut r);
        (Conv2d::strided(&mut init, "down", 4, 6, 3, 2), Conv2d::build(&mut init, "grouped", 6, 4, 3, 1, 2, true, false))
    };
    let x = store.add("input", uniform(&[2, 4, 7, 6], &mut r, -1.0, 1.0));
    grad_check(&store, Routing::Eval, 40, 21, |cx| {
        let x = cx.param(x);
        let y = down.forward(cx, x)?;
        dw.forward(cx, y)
    })
}

pub fn offset_warp() -> GradReport {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let net = Fadpnet::new(&ModelConfig::toy(), &mut store, &mut r).unwrap();
    // The offset head starts at zero, where bilinear sampling has a kink;
    // move it off the grid.
    jitter(&mut store, &mut r, 0.05);
    let f1 = store.add("shallow", uniform(&[1, 16, 6, 6], &mut r, -1.0, 1.0));
    let f2 = store.add("decoded", uniform(&[1, 16, 6, 6], &mut r, -1.0, 1.0));
    let report = grad_check(&store, Routing::Eval, 20, 22, |cx| {
        let (f1, f2) = (cx.param(f1), cx.param(f2));
        let o = net.predict_offsets(cx, f1)?.expect("learned offsets");
        cx.graph.warp(f2, o)
    });
    report
}

pub fn warp_at_fractional_offsets() -> GradReport {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let x = store.add("input", uniform(&[2, 3, 5, 6], &mut r, -1.0, 1.0));
    // Offsets well inside (k + 0.1, k + 0.9) so no sample sits on a kink.
    let off = Tensor::from_fn(&[2, 2, 5, 6], |i| {
        let k = (i % 5) as f64 - 2.0;
        k + 0.1 + 0.8 * ((i * 37 % 11) as f64 / 11.0)
    });
    let o = store.add("offsets", off);
    grad_check(&store, Routing::Eval, 60, 23, |cx| {
        let (x, o) = (cx.param(x), cx.param(o));
        cx.graph.warp(x, o)
    })
}

pub fn full_network_on_toy_input() -> GradReport {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let net = Fadpnet::new(&ModelConfig::toy(), &mut store, &mut r).unwrap();
    jitter(&mut store, &mut r, 0.02);
    let x = store.add("input", uniform(&[1, 3, 16, 16], &mut r, 0.0, 1.0));
    grad_check(&store, Routing::Soft, 2, 24, |cx| {
        let x = cx.param(x);
        Ok(net.forward(cx, x)?.output)
    })
}

pub fn frequency_split_and_pad() -> GradReport {
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let x = store.add("input", uniform(&[1, 2, 6, 7], &mut r, -1.0, 1.0));
    let spec = fadpnet_core::freqsep::LowPassSpec::gaussian(5, 1.2);
    grad_check(&store, Routing::Eval, 84, 25, |cx| {
        let x = cx.param(x);
        let (lo, hi) = fadpnet_core::freqsep::split_frequency(&mut cx.graph, x, &spec)?;
        let hi = cx.graph.scale(hi, 3.0);
        cx.graph.add(lo, hi)
    })
}

pub const ALL: &[(&str, fn() -> GradReport)] = &[
    ("positional_gate", positional_gate),
    ("routed_prompts_soft_path", routed_prompts_soft_path),
    ("straight_through_passes_the_soft_gradient", straight_through_passes_the_soft_gradient),
    ("selective_scan_with_prompts", selective_scan_with_prompts),
    ("squeeze_excitation", squeeze_excitation),
    ("low_frequency_block", low_frequency_block),
    ("layer_norm", layer_norm),
    ("refinement_path", refinement_path),
    ("position_aware_attention", position_aware_attention),
    ("residual_block", residual_block),
    ("high_frequency_block", high_frequency_block),
    ("strided_and_grouped_convolution", strided_and_grouped_convolution),
    ("offset_warp", offset_warp),
    ("warp_at_fractional_offsets", warp_at_fractional_offsets),
    ("full_network_on_toy_input", full_network_on_toy_input),
    ("frequency_split_and_pad", frequency_split_and_pad),
];

/// `None` when the report passes, otherwise the reason.
pub fn verdict(r: &GradReport) -> Option<String> {
    if r.checked == 0 {
        Some("nothing checked".into())
    } else if r.skipped * 20 > r.checked {
        Some(format!("{} of {} entries sit on piece boundaries", r.skipped, r.checked))
    } else if !(r.worst < TOL) {
        Some(format!("relative error {:.3e} at {}", r.worst, r.worst_at))
    } else {
        None
    }
}
