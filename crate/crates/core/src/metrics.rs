//! Reconstruction loss and fidelity metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Result, Scalar, Tensor};
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("metric operands differ in shape: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(s / a.len() as f64)
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(range² / MSE)`; `+∞` when the inputs are identical.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(data_range * data_range / mse)
    }
}

/// BT.601 luma of a `3 × h × w` image (single-channel inputs pass through).
pub fn luminance<T: Scalar>(img: &Tensor<T>) -> Result<Vec<f64>> {
    match img.shape() {
        &[3, h, w] => {
            let d = img.data();
            let l = h * w;
            Ok((0..l).map(|p| 0.299 * d[p].as_f64() + 0.587 * d[l + p].as_f64() + 0.114 * d[2 * l + p].as_f64()).collect())
        }
        &[1, _, _] => Ok(img.data().iter().map(|v| v.as_f64()).collect()),
        s => Err(shape_err!("expected a 3 x h x w or 1 x h x w image, got {:?}", s)),
    }
}

/// PSNR on the luma channel.
pub fn psnr_luma<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (ya, yb) = (luminance(a)?, luminance(b)?);
    let m = ya.iter().zip(&yb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ya.len() as f64;
    Ok(psnr_from_mse(m, 1.0))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1-D gaussian window taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| libm::exp(-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma))).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = g.iter().enumerate().map(|(i, &gi)| gi * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = g.iter().enumerate().map(|(i, &gi)| gi * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Structural similarity of two single-channel `h × w` planes in `[0, 1]`,
/// gaussian window 11×11, σ = 1.5, mean over all valid window positions.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(shape_err!("ssim planes must be {h}x{w}"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!("ssim needs at least {0}x{0} pixels, got {h}x{w}", SSIM_WINDOW));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = ((K1 * 1.0f64).powi(2), (K2 * 1.0f64).powi(2));
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&sq(a), h, w, &g);
    let e_bb = filter_valid(&sq(b), h, w, &g);
    let e_ab = filter_valid(&prod, h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// SSIM on the BT.601 luma of two `3 × h × w` images.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    ssim_plane(&luminance(a)?, &luminance(b)?, h, w)
}
