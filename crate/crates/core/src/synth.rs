//! Procedural face-like images for tests and desk-scale experiments.
//!
//! Each image is a soft-edged head ellipse on a gradient background with
//! hair, eyes, brows, a nose shadow and a mouth, plus a little band-limited
//! texture. Everything is drawn from the supplied rng so a seed fixes the
//! whole set.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::Tensor;

#[derive(Clone, Copy)]
struct Rgb([f64; 3]);

impl Rgb {
    fn sample(rng: &mut dyn RngCore, lo: [f64; 3], hi: [f64; 3]) -> Self {
        Rgb([0, 1, 2].map(|i| rng.random_range(lo[i]..=hi[i])))
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Coverage of an axis-aligned ellipse with a soft rim of `soft` (in
/// normalized radius units).
fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64, soft: f64) -> f64 {
    let d = libm::sqrt(((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2));
    1.0 - smoothstep(1.0 - soft, 1.0 + soft, d)
}

fn blend(dst: &mut [f64; 3], c: Rgb, a: f64) {
    for i in 0..3 {
        dst[i] = dst[i] * (1.0 - a) + c.0[i] * a;
    }
}

/// One `3 × size × size` face image with values in `[0, 1]`.
pub fn face(size: usize, rng: &mut dyn RngCore) -> Tensor<f64> {
    let bg_top = Rgb::sample(rng, [0.1, 0.1, 0.1], [0.9, 0.9, 0.9]);
    let bg_bot = Rgb::sample(rng, [0.1, 0.1, 0.1], [0.9, 0.9, 0.9]);
    let skin = Rgb::sample(rng, [0.45, 0.3, 0.2], [0.95, 0.8, 0.7]);
    let hair = Rgb::sample(rng, [0.02, 0.02, 0.02], [0.6, 0.45, 0.3]);
    let iris = Rgb::sample(rng, [0.05, 0.05, 0.05], [0.4, 0.5, 0.6]);
    let lips = Rgb::sample(rng, [0.5, 0.15, 0.15], [0.85, 0.45, 0.45]);
    let cx = rng.random_range(0.46..0.54);
    let cy = rng.random_range(0.5..0.56);
    let rx = rng.random_range(0.27..0.33);
    let ry = rng.random_range(0.34..0.4);
    let hair_drop = rng.random_range(0.25..0.45);
    let eye_dx = rng.random_range(0.1..0.14);
    let eye_y = cy - rng.random_range(0.05..0.1);
    let eye_r = rng.random_range(0.025..0.04);
    let mouth_y = cy + rng.random_range(0.17..0.23);
    let mouth_w = rng.random_range(0.07..0.12);
    let light = rng.random_range(-0.25..0.25);
    let tex: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(4.0..18.0),
                rng.random_range(0.0..core::f64::consts::TAU),
                rng.random_range(0.0..core::f64::consts::TAU),
                rng.random_range(0.005..0.02),
            )
        })
        .collect();
    let mut out = vec![0.0; 3 * size * size];
    let plane = size * size;
    for py in 0..size {
        for px in 0..size {
            let (x, y) = ((px as f64 + 0.5) / size as f64, (py as f64 + 0.5) / size as f64);
            let mut c = [0.0; 3];
            for i in 0..3 {
                c[i] = bg_top.0[i] * (1.0 - y) + bg_bot.0[i] * y;
            }
            // Hair mass behind the head, then the head.
            blend(&mut c, hair, ellipse(x, y, cx, cy - 0.06, rx * 1.15, ry * 1.08, 0.04));
            let head = ellipse(x, y, cx, cy, rx, ry, 0.03);
            let shade = 1.0 + light * (x - cx) / rx;
            let lit = Rgb(skin.0.map(|v| (v * shade).clamp(0.0, 1.0)));
            blend(&mut c, lit, head);
            // Fringe over the forehead.
            let fringe = head * (1.0 - smoothstep(cy - ry + hair_drop * ry * 0.6, cy - ry + hair_drop * ry, y));
            blend(&mut c, hair, fringe);
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                blend(&mut c, Rgb([0.95, 0.95, 0.93]), ellipse(x, y, ex, eye_y, eye_r * 1.8, eye_r, 0.15));
                blend(&mut c, iris, ellipse(x, y, ex, eye_y, eye_r * 0.75, eye_r * 0.75, 0.2));
                blend(&mut c, Rgb([0.02, 0.02, 0.02]), ellipse(x, y, ex, eye_y, eye_r * 0.3, eye_r * 0.3, 0.3));
                blend(&mut c, hair, ellipse(x, y, ex, eye_y - 2.2 * eye_r, eye_r * 2.0, eye_r * 0.45, 0.3));
            }
            let nose = Rgb(skin.0.map(|v| v * 0.75));
            blend(&mut c, nose, 0.6 * ellipse(x, y, cx + 0.01, cy + 0.08, 0.02, 0.05, 0.5));
            blend(&mut c, lips, ellipse(x, y, cx, mouth_y, mouth_w, 0.022, 0.3));
            let mut t = 0.0;
            for &(f, ph, dir, amp) in &tex {
                t += amp * libm::sin(f * (x * libm::cos(dir) + y * libm::sin(dir)) * core::f64::consts::TAU + ph);
            }
            for i in 0..3 {
                out[i * plane + py * size + px] = (c[i] + t).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[3, size, size], out).expect("sized above")
}

/// `count` faces from one rng stream.
pub fn faces(count: usize, size: usize, rng: &mut dyn RngCore) -> Vec<Tensor<f64>> {
    (0..count).map(|_| face(size, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_and_in_range() {
        let a = face(24, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let b = face(24, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
