//! Low-pass / residual split of feature maps into complementary frequency parts.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err};
use crate::tape::ConvGeom;
use crate::{Graph, Result, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LowPassKind {
    BoxBlur,
    GaussianBlur,
}

/// Fixed separable blur used as the low-pass operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowPassSpec {
    pub kind: LowPassKind,
    pub kernel_size: usize,
    #[serde(default = "LowPassSpec::default_sigma")]
    pub sigma: f64,
}

impl Default for LowPassSpec {
    fn default() -> Self {
        Self::box_blur(3)
    }
}

impl LowPassSpec {
    fn default_sigma() -> f64 {
        1.0
    }

    pub fn box_blur(kernel_size: usize) -> Self {
        Self { kind: LowPassKind::BoxBlur, kernel_size, sigma: 1.0 }
    }

    pub fn gaussian(kernel_size: usize, sigma: f64) -> Self {
        Self { kind: LowPassKind::GaussianBlur, kernel_size, sigma }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(config_err!("low-pass kernel size must be odd and >= 3, got {}", self.kernel_size));
        }
        if self.kind == LowPassKind::GaussianBlur && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(config_err!("gaussian sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }

    /// Normalized 1-D taps; the 2-D kernel is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let k = self.kernel_size;
        let raw: Vec<f64> = match self.kind {
            LowPassKind::BoxBlur => (0..k).map(|_| 1.0).collect(),
            LowPassKind::GaussianBlur => {
                let c = (k / 2) as f64;
                (0..k).map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * self.sigma * self.sigma))).collect()
            }
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    /// Depthwise weight tensor `c × 1 × k × k`.
    pub fn kernel<T: Scalar>(&self, c: usize) -> Tensor<T> {
        let t = self.taps();
        let k = self.kernel_size;
        Tensor::from_fn(&[c, 1, k, k], |i| {
            let (y, x) = ((i / k) % k, i % k);
            T::from_f64(t[y] * t[x])
        })
    }
}

/// Splits `x` into `(low, high)` with `low = blur(x)` under reflect padding and
/// `high = x − low`.
pub fn split_frequency<T: Scalar>(g: &mut Graph<T>, x: Var, spec: &LowPassSpec) -> Result<(Var, Var)> {
    spec.validate()?;
    let [_, c, h, w] = g.value(x).dims4()?;
    let k = spec.kernel_size;
    if h < k || w < k {
        return Err(shape_err!("frequency split needs spatial size >= {k}, got {h}x{w}"));
    }
    let padded = g.pad_reflect(x, k / 2)?;
    let kernel = g.constant(spec.kernel(c));
    let low = g.conv2d(padded, kernel, None, ConvGeom { stride: 1, pad: 0, groups: c })?;
    let high = g.sub(x, low)?;
    Ok((low, high))
}

/// Tensor-level convenience wrapper around [`split_frequency`].
pub fn split_tensor<T: Scalar>(x: &Tensor<T>, spec: &LowPassSpec) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let (lo, hi) = split_frequency(&mut g, v, spec)?;
    Ok((g.value(lo).clone(), g.value(hi).clone()))
}
