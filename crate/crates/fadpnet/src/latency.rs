//! Forward-pass timing and the flat profile report.

use std::fmt::Write as _;
use std::time::Instant;

use fadpnet_core::net::{estimate_flops, Fadpnet};
use fadpnet_core::nn::ParamStore;
use fadpnet_core::profile::count_params;
use fadpnet_core::{Scalar, Tensor};

use crate::error::{HarnessError, Result};

/// Wall-clock seconds of each of `n_runs` calls to `forward`. No warmup
/// call is made; anything the caller prepares beforehand is not timed.
pub fn time_runs(n_runs: usize, mut forward: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    if n_runs < 1 {
        return Err(HarnessError::Config("latency needs at least one run".into()));
    }
    let mut out = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t = Instant::now();
        forward()?;
        out.push(t.elapsed().as_secs_f64());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub params: usize,
    pub flops: u64,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub precision: &'static str,
    pub n_runs: usize,
    pub latency_ms_mean: f64,
    pub latency_ms_min: f64,
    pub latency_ms_max: f64,
    pub notes: String,
}

impl ProfileReport {
    pub fn from_runs(params: usize, flops: u64, hw: (usize, usize), batch: usize, precision: &'static str, runs: &[f64]) -> Self {
        let ms: Vec<f64> = runs.iter().map(|s| s * 1e3).collect();
        let mean = ms.iter().sum::<f64>() / ms.len().max(1) as f64;
        Self {
            params,
            flops,
            height: hw.0,
            width: hw.1,
            batch,
            precision,
            n_runs: ms.len(),
            latency_ms_mean: mean,
            latency_ms_min: ms.iter().copied().fold(f64::INFINITY, f64::min),
            latency_ms_max: ms.iter().copied().fold(0.0, f64::max),
            notes: "forward pass only, no warmup, single thread; run without concurrent load".into(),
        }
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "params = {}", self.params);
        let _ = writeln!(s, "flops = {}", self.flops);
        let _ = writeln!(s, "gflops = {:.3}", self.flops as f64 / 1e9);
        let _ = writeln!(s, "input = {}x{}", self.height, self.width);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "n_runs = {}", self.n_runs);
        let _ = writeln!(s, "latency_ms_mean = {:.3}", self.latency_ms_mean);
        let _ = writeln!(s, "latency_ms_min = {:.3}", self.latency_ms_min);
        let _ = writeln!(s, "latency_ms_max = {:.3}", self.latency_ms_max);
        let _ = writeln!(s, "notes = {}", self.notes);
        s
    }
}

/// Parameters, analytic FLOPs and mean forward latency of `net` on
/// pre-generated `batch × 3 × h × w` inputs.
pub fn measure_latency<T: Scalar>(
    net: &Fadpnet,
    store: &ParamStore<T>,
    n_runs: usize,
    batch: usize,
    hw: (usize, usize),
) -> Result<ProfileReport> {
    if batch < 1 {
        return Err(HarnessError::Config("latency batch must be at least 1".into()));
    }
    let input = Tensor::<T>::from_fn(&[batch, 3, hw.0, hw.1], |i| T::from_f64(((i * 7919) % 1000) as f64 / 1000.0));
    net.check_input(input.shape())?;
    let runs = time_runs(n_runs, || {
        net.predict(store, &input)?;
        Ok(())
    })?;
    let flops = estimate_flops(&net.cfg, hw.0, hw.1)?.total() * batch as u64;
    Ok(ProfileReport::from_runs(count_params(store), flops, hw, batch, T::PRECISION, &runs))
}
