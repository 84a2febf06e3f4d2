//! Band-wise spectral energy of feature maps.

use std::io::Write;

use fadpnet_core::{Scalar, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Radial band edges in cycles per sample (Nyquist is 0.5).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    pub cut_low: f64,
    pub cut_mid: f64,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self { cut_low: 1.0 / 6.0, cut_mid: 1.0 / 3.0 }
    }
}

impl BandSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.cut_low && self.cut_low < self.cut_mid && self.cut_mid <= 0.5) {
            return Err(HarnessError::Config(format!(
                "band cuts must satisfy 0 < low < mid <= 0.5, got ({}, {})",
                self.cut_low, self.cut_mid
            )));
        }
        Ok(())
    }

    /// Band index of a radial frequency: 0 low, 1 mid, 2 high.
    pub fn band(&self, radius: f64) -> usize {
        if radius < self.cut_low {
            0
        } else if radius < self.cut_mid {
            1
        } else {
            2
        }
    }
}

/// Signed frequency of DFT bin `k` out of `n`, in cycles per sample.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

/// Low, mid and high energy shares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRatios {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

impl BandRatios {
    pub fn as_array(&self) -> [f64; 3] {
        [self.low, self.mid, self.high]
    }

    /// Component-wise mean.
    pub fn mean(items: &[BandRatios]) -> Option<BandRatios> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 3];
        for r in items {
            for (a, v) in acc.iter_mut().zip(r.as_array()) {
                *a += v;
            }
        }
        Some(BandRatios { low: acc[0] / n, mid: acc[1] / n, high: acc[2] / n })
    }
}

/// Energy shares of an `n × c × h × w` map. Each channel's 2-D power
/// spectrum, without the DC bin, is split into radial bands; shares are
/// computed per channel and averaged over batch and channel. Channels with
/// no energy outside DC are skipped; if every channel is like that the
/// input is rejected.
pub fn band_energy_ratios<T: Scalar>(map: &Tensor<T>, bands: &BandSpec) -> Result<BandRatios> {
    bands.validate()?;
    let [n, c, h, w] = map.dims4().map_err(HarnessError::from)?;
    if h < 4 || w < 4 {
        return Err(HarnessError::Model(fadpnet_core::Error::Degenerate(format!(
            "band analysis needs at least 4x4 maps, got {h}x{w}"
        ))));
    }
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let band_of: Vec<usize> = (0..h * w)
        .map(|i| {
            let (fy, fx) = (bin_frequency(i / w, h), bin_frequency(i % w, w));
            bands.band((fx * fx + fy * fy).sqrt())
        })
        .collect();
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    let mut shares = Vec::with_capacity(n * c);
    for plane in map.data().chunks_exact(h * w) {
        for (b, &v) in buf.iter_mut().zip(plane) {
            *b = Complex::new(v.as_f64(), 0.0);
        }
        for row in buf.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        let mut e = [0.0f64; 3];
        for (i, z) in buf.iter().enumerate().skip(1) {
            e[band_of[i]] += z.norm_sqr();
        }
        let total: f64 = e.iter().sum();
        // Rounding leaves a tiny non-DC residue on constant planes.
        let dc = buf[0].norm_sqr();
        if total <= 1e-24 * dc.max(1.0) {
            continue;
        }
        shares.push(BandRatios { low: e[0] / total, mid: e[1] / total, high: e[2] / total });
    }
    BandRatios::mean(&shares).ok_or_else(|| {
        HarnessError::Model(fadpnet_core::Error::Degenerate(
            "no spectral energy outside the DC bin".into(),
        ))
    })
}

/// One CSV row per source: `source,band_low,band_mid,band_high`.
pub fn write_band_csv(mut out: impl Write, rows: &[(String, BandRatios)]) -> std::io::Result<()> {
    writeln!(out, "source,band_low,band_mid,band_high")?;
    for (src, r) in rows {
        writeln!(out, "{},{:.6},{:.6},{:.6}", src, r.low, r.mid, r.high)?;
    }
    Ok(())
}
