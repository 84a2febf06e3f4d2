//! Independent reference implementations: direct convolution, windowed
//! SSIM, layer-by-layer parameter arithmetic and FLOPs rebuilt from weights.

use fadpnet_core::net::{Fadpnet, ModelConfig};
use fadpnet_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Seven nested loops, zero padding.
pub fn conv_loops(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize, g: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.dims4().unwrap();
    let [co, cig, k, _] = w.dims4().unwrap();
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (wd + 2 * p - k) / s + 1;
    let cog = co / g;
    assert_eq!(cig * g, ci);
    let mut out = vec![0.0; n * co * ho * wo];
    for b_ in 0..n {
        for o in 0..co {
            let grp = o / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cig {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b_ * ci + grp * cig + c) * h + iy as usize) * wd + ix as usize;
                                acc += w.data()[((o * cig + c) * k + ky) * k + kx] * x.data()[xi];
                            }
                        }
                    }
                    out[((b_ * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, ho, wo], out).unwrap()
}

/// SSIM from explicit 11×11 gaussian windows (no separable filtering), on
/// BT.601 luma, averaged over every fully contained window.
pub fn ssim_windows(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let luma = |t: &Tensor<f64>, y: usize, x: usize| {
        let d = t.data();
        let l = h * w;
        0.299 * d[y * w + x] + 0.587 * d[l + y * w + x] + 0.114 * d[2 * l + y * w + x]
    };
    let sigma: f64 = 1.5;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = win[i][j] / total;
                    let (va, vb) = (luma(a, y0 + i, x0 + j), luma(b, y0 + i, x0 + j));
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    // Smooth ramp plus noise so windows carry structure, not only variance.
    let (fy, fx, phase) = (r.random_range(0.05..0.4), r.random_range(0.05..0.4), r.random_range(0.0..6.0));
    let noise = r.random_range(0.02..0.3);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let base = 0.5 + 0.35 * ((fy * y as f64 + fx * x as f64 + phase + c as f64).sin());
        (base + r.random_range(-noise..noise)).clamp(0.0, 1.0)
    })
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn dw(c: usize, k: usize) -> usize {
    c * k * k + c
}

/// Layer-by-layer parameter arithmetic for the default (non-ablated) layout.
pub fn closed_form_params(cfg: &ModelConfig) -> usize {
    let (t, rk, d) = (cfg.prompt.prompts, cfg.prompt.rank, cfg.prompt.state_dim);
    let lfeb = |c: usize| {
        let norms = 2 * 2 * c;
        let gate = conv(c, c, 1) + dw(c, 3);
        let route = conv(c, t, 1) + rk * d;
        let scan = conv(c, c, 1) + 2 * c * d + c * d + c;
        let out = conv(c, c, 1);
        let s = c / cfg.seb_reduction;
        let seb = conv(c, s, 1) + conv(s, c, 1);
        let e = c * cfg.ffn_expansion;
        norms + gate + route + scan + out + seb + 2 + conv(c, e, 1) + conv(e, c, 1)
    };
    let hfeb = |c: usize| {
        let r = c / 2;
        let wide = cfg.hfeb_wide_blocks * 2 * conv(c, c, 3);
        let rbs = 2 * 2 * conv(r, r, 3);
        let th = cfg.temp_hidden;
        let dpa = conv(r, 3 * r, 1) + dw(3 * r, 3) + conv(r, th, 1) + conv(th, cfg.dpa_heads, 1) + 3 * conv(r, r, 1);
        let hfr = dw(r, 7) + dw(r, 5) + conv(2 * r, 4 * r, 1) + conv(4 * r, r, 1);
        wide + conv(c, r, 1) + rbs + dpa + hfr + conv(r, c, 1)
    };
    let stage = |l: usize| {
        let c = cfg.width(l);
        cfg.lfeb_per_level[l] * lfeb(c) + cfg.hfeb_per_level[l] * hfeb(c) + conv(c, c, 1)
    };
    let c = cfg.base_channels;
    let levels = cfg.levels;
    let mut total = conv(3, c, 3) + t * rk;
    for l in 0..levels - 1 {
        let (w, w2) = (cfg.width(l), cfg.width(l + 1));
        total += 2 * stage(l); // encoder and decoder
        total += conv(w, w2, 3); // down
        total += conv(w2, w, 3) + conv(2 * w, w, 1); // up, skip
    }
    total += stage(levels - 1);
    let fused: usize = (0..levels).map(|l| cfg.width(l)).sum();
    total + conv(fused, c, 1) + conv(c, c, 3) + conv(c, 2, 3) + conv(c, 3, 3)
}

/// FLOPs rebuilt from the parameter store: each convolution weight of shape
/// `cout × cin/g × k × k` costs `2·|W|` per output pixel; the scan, prompt and
/// attention products are added from their closed forms.
pub fn flops_from_weights(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let (_, store) = Fadpnet::init::<f32>(cfg, &mut super::rng(0)).unwrap();
    let pixels = |level: usize| ((h >> level) * (w >> level)) as u64;
    let level_of = |top: &str| -> usize {
        let digits: String = top.chars().filter(char::is_ascii_digit).collect();
        let n: usize = digits.parse().unwrap_or(0);
        match top.trim_end_matches(|c: char| c.is_ascii_digit()) {
            "enc" | "dec" | "mid" | "up" | "skip" => n - 1,
            "down" => n,
            _ => 0,
        }
    };
    let (t, rk, d) = (cfg.prompt.prompts as u64, cfg.prompt.rank as u64, cfg.prompt.state_dim as u64);
    let mut total = 0u64;
    for (_, name, value) in store.iter() {
        let top = name.split('.').next().unwrap();
        let hw = pixels(level_of(top));
        if value.shape().len() == 4 && name.ends_with(".weight") {
            let per_pixel = 2 * value.len() as u64;
            let pooled = name.contains(".seb.") || name.contains(".temp_w");
            let repeats = if name.contains(".hfr.") { cfg.hfr_cycles as u64 } else { 1 };
            total += per_pixel * if pooled { 1 } else { hw } * repeats;
        }
        if name.ends_with(".assb.a_log") {
            let c = value.shape()[0] as u64;
            total += 4 * c * d * hw + 2 * t * d * hw + 2 * t * rk * d;
        }
        if name.ends_with(".dpa.proj.weight") {
            let r = value.shape()[0] as u64;
            let m = r / cfg.dpa_heads as u64;
            total += 4 * m * m * hw * cfg.dpa_heads as u64;
        }
    }
    total
}
