//! Bicubic resampling, the ×k degradation pipeline and paired augmentation.
//!
//! Images are `c × h × w` tensors with values in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::shape_err;
use crate::{Error, Result, Scalar, Tensor};

/// Cubic convolution kernel with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Taps `(source index, weight)` for every output sample along one axis.
/// Downscaling widens the kernel by the inverse scale (antialiasing); borders
/// mirror the source.
pub fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = dst as f64 / src as f64;
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / stretch;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = libm::floor(center - support) as isize;
            let hi = libm::ceil(center + support) as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let wgt = cubic((center - i as f64) * stretch);
                if wgt != 0.0 {
                    let s = mirror(i, src);
                    match taps.iter_mut().find(|(j, _)| *j == s) {
                        Some((_, acc)) => *acc += wgt,
                        None => taps.push((s, wgt)),
                    }
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

fn apply_axis(line: &[f64], taps: &[(usize, f64)]) -> f64 {
    // Expressed relative to the first tap so that constant lines map to
    // exactly the same constant.
    let base = line[taps[0].0];
    base + taps.iter().map(|&(i, w)| w * (line[i] - base)).sum::<f64>()
}

/// Bicubic resize of a `c × h × w` image to `c × out_h × out_w`.
pub fn resize_bicubic<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = img.shape() else {
        return Err(shape_err!("resize expects a c x h x w image, got {:?}", img.shape()));
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(shape_err!("resize between empty sizes {h}x{w} -> {out_h}x{out_w}"));
    }
    let wx = axis_weights(w, out_w);
    let wy = axis_weights(h, out_h);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut rows = vec![0.0f64; h * out_w];
    let mut col = vec![0.0f64; h];
    let mut line = vec![0.0f64; w];
    for ch in 0..c {
        for y in 0..h {
            for (x, l) in line.iter_mut().enumerate() {
                *l = src[(ch * h + y) * w + x].as_f64();
            }
            for (ox, taps) in wx.iter().enumerate() {
                rows[y * out_w + ox] = apply_axis(&line, taps);
            }
        }
        let mut plane = vec![T::zero(); out_h * out_w];
        for ox in 0..out_w {
            for (y, v) in col.iter_mut().enumerate() {
                *v = rows[y * out_w + ox];
            }
            for (oy, taps) in wy.iter().enumerate() {
                plane[oy * out_w + ox] = T::from_f64(apply_axis(&col, taps));
            }
        }
        out.extend(plane);
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

pub fn clamp_unit<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| v.max(T::zero()).min(T::one()))
}

/// Largest centered square of a `c × h × w` image.
pub fn center_crop_square<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, h, w] = img.shape() else {
        return Err(shape_err!("crop expects a c x h x w image, got {:?}", img.shape()));
    };
    let s = h.min(w);
    crop(img, (h - s) / 2, (w - s) / 2, s, s)
}

/// Rectangular crop starting at `(top, left)`.
pub fn crop<T: Scalar>(img: &Tensor<T>, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = img.shape() else {
        return Err(shape_err!("crop expects a c x h x w image, got {:?}", img.shape()));
    };
    if top + ch > h || left + cw > w {
        return Err(shape_err!("crop {ch}x{cw} at ({top},{left}) exceeds {h}x{w}"));
    }
    let d = img.data();
    Ok(Tensor::from_fn(&[c, ch, cw], |i| {
        let (k, y, x) = (i / (ch * cw), (i / cw) % ch, i % cw);
        d[(k * h + top + y) * w + left + x]
    }))
}

pub fn flip_horizontal<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, h, w] = img.shape() else {
        return Err(shape_err!("flip expects a c x h x w image, got {:?}", img.shape()));
    };
    let d = img.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (row, x) = (i / w, i % w);
        d[row * w + (w - 1 - x)]
    }))
}

/// High-resolution target and its degraded, re-upsampled input.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub hr: Tensor<T>,
    pub lr_up: Tensor<T>,
}

/// Center crop, resize to `size`, then bicubic down by `scale` and back up.
pub fn prepare_pair<T: Scalar>(img: &Tensor<T>, size: usize, scale: usize) -> Result<Pair<T>> {
    let &[c, h, w] = img.shape() else {
        return Err(shape_err!("expected a c x h x w image, got {:?}", img.shape()));
    };
    if c != 3 {
        return Err(shape_err!("expected an RGB image, got {c} channels"));
    }
    if h.min(w) < size {
        return Err(Error::Degenerate(alloc::format!("image {h}x{w} smaller than the {size}px target")));
    }
    if scale == 0 || size % scale != 0 {
        return Err(shape_err!("target size {size} not divisible by scale {scale}"));
    }
    let sq = center_crop_square(img)?;
    let hr = clamp_unit(&resize_bicubic(&sq, size, size)?);
    let lr_up = degrade(&hr, scale)?;
    Ok(Pair { hr, lr_up })
}

/// Bicubic `↓scale` then `↑scale`, clamped to `[0, 1]`.
pub fn degrade<T: Scalar>(hr: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let &[_, h, w] = hr.shape() else {
        return Err(shape_err!("expected a c x h x w image, got {:?}", hr.shape()));
    };
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(shape_err!("image {h}x{w} not divisible by scale {scale}"));
    }
    let lr = resize_bicubic(hr, h / scale, w / scale)?;
    Ok(clamp_unit(&resize_bicubic(&lr, h, w)?))
}

/// Parameters of one paired augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip: bool,
    /// Zoom factor in `[1, 1.3]`.
    pub scale: f64,
}

impl Augment {
    pub const IDENTITY: Augment = Augment { flip: false, scale: 1.0 };

    pub fn sample(rng: &mut dyn RngCore) -> Self {
        let flip = rng.random_bool(0.5);
        let scale = rng.random_range(1.0..=1.3);
        Self { flip, scale }
    }

    /// Applies the same flip and zoom-then-center-crop to both members.
    pub fn apply<T: Scalar>(&self, pair: &Pair<T>) -> Result<Pair<T>> {
        Ok(Pair { hr: self.apply_one(&pair.hr)?, lr_up: self.apply_one(&pair.lr_up)? })
    }

    pub fn apply_one<T: Scalar>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let &[_, h, w] = img.shape() else {
            return Err(shape_err!("expected a c x h x w image, got {:?}", img.shape()));
        };
        let mut out = if self.flip { flip_horizontal(img)? } else { img.clone() };
        let (zh, zw) = (libm::round(h as f64 * self.scale) as usize, libm::round(w as f64 * self.scale) as usize);
        if zh != h || zw != w {
            let zoomed = clamp_unit(&resize_bicubic(&out, zh, zw)?);
            out = crop(&zoomed, (zh - h) / 2, (zw - w) / 2, h, w)?;
        }
        Ok(out)
    }
}
