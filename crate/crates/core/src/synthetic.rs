//! Procedural stand-ins for fundus photographs and their vessel masks, plus a
//! bright-disk segmentation task. Used by tests, benchmarks and the `synth`
//! command; every output is a pure function of its seed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::LabeledSource;
use crate::error::Result;
use crate::image::{FundusImage, CHANNELS};
use crate::rng::Stream;
use crate::tensor::Tensor;

const FUNDUS_LABEL: u64 = 0x4655_4e44;
const DISK_LABEL: u64 = 0x4449_534b;

/// Fraction of the shorter side covered by the field-of-view radius.
pub const FOV_RADIUS_FRAC: f64 = 0.45;

/// A synthetic fundus image and its binary vessel mask (`1 x H x W`).
pub fn synthetic_fundus(height: usize, width: usize, seed: u64) -> Result<(FundusImage, Tensor<f32>)> {
    let mut s = Stream::derived(seed, &[FUNDUS_LABEL]);
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let radius = FOV_RADIUS_FRAC * height.min(width) as f64;
    let tint = [s.uniform(0.65, 0.85), s.uniform(0.3, 0.42), s.uniform(0.12, 0.22)];
    let side = if s.bernoulli(0.5) { 1.0 } else { -1.0 };
    let disc = [cy + s.uniform(-0.1, 0.1) * radius, cx + side * s.uniform(0.25, 0.4) * radius];
    let disc_r = s.uniform(0.1, 0.14) * radius;
    let wave = [s.uniform(0.0, 6.3), s.uniform(0.0, 6.3), s.uniform(1.0, 3.0)];

    let mut vessel = vec![0.0f32; height * width];
    let thickness = (height.min(width) as f64 / 64.0).max(0.7);
    let branches = 5 + s.index(4);
    for b in 0..branches {
        let mut angle = 2.0 * core::f64::consts::PI * (b as f64 + s.uniform(0.0, 0.8)) / branches as f64;
        let (mut y, mut x) = (disc[0], disc[1]);
        let step = 0.5;
        let length = s.uniform(0.9, 1.6) * radius;
        let mut travelled = 0.0;
        let mut width_px = thickness * s.uniform(0.9, 1.4);
        while travelled < length {
            angle += s.uniform(-0.12, 0.12);
            y += step * libm::sin(angle);
            x += step * libm::cos(angle);
            travelled += step;
            width_px = (width_px * 0.998).max(0.6);
            stamp(&mut vessel, height, width, y, x, width_px);
        }
    }

    let mut pixels = Vec::with_capacity(height * width * CHANNELS);
    let mut mask = vec![0.0f32; height * width];
    for r in 0..height {
        for c in 0..width {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            let d = libm::sqrt(dy * dy + dx * dx) / radius;
            if d > 1.0 {
                pixels.extend_from_slice(&[0.0; CHANNELS]);
                continue;
            }
            let shade = (1.0 - 0.35 * d * d)
                * (1.0 + 0.05 * libm::sin(wave[2] * dy / radius + wave[0]) * libm::cos(wave[2] * dx / radius + wave[1]));
            let (ddy, ddx) = (r as f64 - disc[0], c as f64 - disc[1]);
            let od = libm::exp(-(ddy * ddy + ddx * ddx) / (2.0 * disc_r * disc_r));
            let v = f64::from(vessel[r * width + c]);
            mask[r * width + c] = if v > 0.5 { 1.0 } else { 0.0 };
            for ch in 0..CHANNELS {
                let base = tint[ch] * shade;
                let bright = base + od * (0.95 - base) * [0.9, 0.85, 0.7][ch];
                let dark = bright * (1.0 - v * [0.35, 0.55, 0.5][ch]);
                pixels.push(crate::image::clip01(dark) as f32);
            }
        }
    }
    let img = FundusImage::new(height, width, pixels)?;
    Ok((img, Tensor::from_vec(&[1, height, width], mask)))
}

fn stamp(buf: &mut [f32], h: usize, w: usize, y: f64, x: f64, width_px: f64) {
    let rad = width_px / 2.0;
    let r0 = libm::floor(y - rad - 1.0).max(0.0) as usize;
    let c0 = libm::floor(x - rad - 1.0).max(0.0) as usize;
    let r1 = (libm::ceil(y + rad + 1.0).max(0.0) as usize).min(h);
    let c1 = (libm::ceil(x + rad + 1.0).max(0.0) as usize).min(w);
    for r in r0..r1 {
        for c in c0..c1 {
            let (dy, dx) = (r as f64 + 0.5 - y, c as f64 + 0.5 - x);
            let d = libm::sqrt(dy * dy + dx * dx);
            let cover = (rad + 0.5 - d).clamp(0.0, 1.0) as f32;
            let v = &mut buf[r * w + c];
            *v = v.max(cover);
        }
    }
}

/// A textured image with one bright disk and its mask (`1 x H x W`).
pub fn disk_task(height: usize, width: usize, seed: u64) -> Result<(FundusImage, Tensor<f32>)> {
    let mut s = Stream::derived(seed, &[DISK_LABEL]);
    let side = height.min(width) as f64;
    let r = s.uniform(0.15, 0.3) * side;
    let cy = s.uniform(r, height as f64 - r);
    let cx = s.uniform(r, width as f64 - r);
    let bg = [s.uniform(0.1, 0.35), s.uniform(0.1, 0.35), s.uniform(0.1, 0.35)];
    let fg = [s.uniform(0.6, 0.9), s.uniform(0.6, 0.9), s.uniform(0.6, 0.9)];
    let mut pixels = Vec::with_capacity(height * width * CHANNELS);
    let mut mask = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let (dy, dx) = (row as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
            let inside = dy * dy + dx * dx <= r * r;
            mask.push(if inside { 1.0 } else { 0.0 });
            let base = if inside { fg } else { bg };
            for b in base {
                pixels.push(crate::image::clip01(b + 0.05 * s.normal()) as f32);
            }
        }
    }
    let img = FundusImage::new(height, width, pixels)?;
    Ok((img, Tensor::from_vec(&[1, height, width], mask)))
}

/// `n` labeled synthetic fundus records with vessel masks, ids `synth-000`...
pub fn toy_labeled(n: usize, side: usize, seed: u64) -> Result<Vec<LabeledSource>> {
    (0..n)
        .map(|i| {
            let (high, mask) = synthetic_fundus(side, side, crate::rng::derive_seed(seed, &[i as u64]))?;
            Ok(LabeledSource {
                id: format!("synth-{i:03}"),
                high,
                masks: Some(vec![mask]),
                low: None,
            })
        })
        .collect()
}
