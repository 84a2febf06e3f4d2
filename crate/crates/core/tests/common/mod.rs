#![allow(dead_code)]

pub mod cases;
pub mod laws;
pub mod reference;

use fadpnet_core::lfeb::ROUTING_TAP;
use fadpnet_core::net::OFFSET_TAP;
use fadpnet_core::nn::{Ctx, ParamId, ParamStore, Routing};
use fadpnet_core::{Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Adds `U(−amp, amp)` to every parameter so zero-initialized layers carry
/// signal too.
pub fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amp: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

#[derive(Debug)]
pub struct GradReport {
    pub worst: f64,
    pub worst_at: String,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares backprop gradients of `Σ out ⊙ R` (fixed random `R`) against
/// fourth-order central differences for up to `coords` entries of every
/// parameter (inputs are registered as parameters too).
///
/// The network is only piecewise smooth: token reordering follows the
/// routing argmax and bilinear warping changes formula at grid lines. When a
/// perturbed evaluation lands in a different piece (a routing decision or a
/// sample's grid cell changed) the step is shrunk tenfold and the entry
/// retried; entries still crossing at the smallest step count as `skipped`.
pub fn grad_check(
    store: &ParamStore<f64>,
    routing: Routing,
    coords: usize,
    seed: u64,
    f: impl Fn(&mut Ctx<'_, f64>) -> Result<Var>,
) -> GradReport {
    const STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
    let mut r = rng(seed);
    let out_shape = {
        let mut cx = Ctx::new(store, routing);
        let out = f(&mut cx).expect("forward");
        cx.graph.shape(out).to_vec()
    };
    let weights = uniform(&out_shape, &mut r, -1.0, 1.0);
    let eval = |s: &ParamStore<f64>| -> (f64, Vec<usize>) {
        let mut cx = Ctx::new(s, routing).with_taps();
        let out = f(&mut cx).expect("forward");
        let loss = cx.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let mut decisions = Vec::new();
        for (name, v) in cx.taps() {
            if name == ROUTING_TAP {
                decisions.extend(argmax_channels(cx.value(*v)));
            } else if name == OFFSET_TAP {
                // Bilinear sampling is smooth inside a grid cell only.
                decisions.extend(cx.value(*v).data().iter().map(|o| o.floor() as i64 as usize));
            }
        }
        (loss, decisions)
    };
    let grads = {
        let mut cx = Ctx::new(store, routing);
        let out = f(&mut cx).expect("forward");
        let w = cx.constant(weights.clone());
        let p = cx.graph.mul(out, w).unwrap();
        let n = weights.len() as f64;
        let l = cx.graph.mean_all(p);
        let l = cx.graph.scale(l, n);
        cx.graph.backward(l).unwrap()
    };
    let (_, base_decisions) = eval(store);
    let mut work = store.clone();
    let mut report = GradReport { worst: 0.0, worst_at: String::new(), checked: 0, skipped: 0 };
    for id in store.ids() {
        let len = store.value(id).len();
        let analytic = grads.param(id);
        let picks: Vec<usize> = if len <= coords { (0..len).collect() } else { (0..coords).map(|_| r.random_range(0..len)).collect() };
        for k in picks {
            let orig = store.value(id).data()[k];
            let mut numeric = None;
            for eps in STEPS {
                let mut crossed = false;
                let mut at = |delta: f64| {
                    work.value_mut(id).data_mut()[k] = orig + delta;
                    let (l, d) = eval(&work);
                    crossed |= d != base_decisions;
                    l
                };
                let (p1, m1, p2, m2) = (at(eps), at(-eps), at(2.0 * eps), at(-2.0 * eps));
                if !crossed {
                    numeric = Some((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps));
                    break;
                }
            }
            work.value_mut(id).data_mut()[k] = orig;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic.map_or(0.0, |g| g.data()[k]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if err > report.worst {
                report.worst = err;
                report.worst_at = format!("{}[{k}] analytic {a:.6e} numeric {numeric:.6e}", store.name(id));
            }
        }
    }
    report
}

/// Per-token argmax over the channel axis of an `n × c × h × w` map.
fn argmax_channels(t: &Tensor<f64>) -> Vec<usize> {
    let [n, c, h, w] = t.dims4().expect("rank-4 routing map");
    let plane = h * w;
    let d = t.data();
    (0..n * plane)
        .map(|i| {
            let (b, p) = (i / plane, i % plane);
            (0..c).max_by(|&x, &y| d[(b * c + x) * plane + p].total_cmp(&d[(b * c + y) * plane + p])).unwrap_or(0)
        })
        .collect()
}
