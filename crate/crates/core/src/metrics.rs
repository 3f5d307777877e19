//! Full-reference quality metrics: PSNR and single-scale SSIM over RGB.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::image::{FundusImage, Mask, CHANNELS};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &FundusImage, b: &FundusImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(param_err!(
            "shape mismatch: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP)
    }
}

pub fn mse(a: &FundusImage, b: &FundusImage) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// `10 log10(1 / MSE)` over all pixels and channels, capped at 100 dB.
pub fn psnr(a: &FundusImage, b: &FundusImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR restricted to pixels inside `mask`.
pub fn psnr_masked(a: &FundusImage, b: &FundusImage, mask: &Mask) -> Result<f64> {
    check_shapes(a, b)?;
    if mask.height() != a.height() || mask.width() != a.width() {
        return Err(param_err!("mask shape does not match the images"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (pa, pb)) in a
        .pixels()
        .chunks_exact(CHANNELS)
        .zip(b.pixels().chunks_exact(CHANNELS))
        .enumerate()
    {
        if mask.as_slice()[i] {
            for (&x, &y) in pa.iter().zip(pb) {
                let d = f64::from(x) - f64::from(y);
                sum += d * d;
            }
            n += CHANNELS;
        }
    }
    if n == 0 {
        return Err(param_err!("mask selects no pixels"));
    }
    Ok(psnr_from_mse(sum / n as f64))
}

fn ssim_window_1d() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(t, kv)| kv * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(t, kv)| kv * tmp[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Per-channel SSIM maps over valid window positions, each `(h-10) x (w-10)`.
fn ssim_maps(a: &FundusImage, b: &FundusImage) -> Result<Vec<Vec<f64>>> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(param_err!("images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    let k = ssim_window_1d();
    let mut maps = Vec::with_capacity(CHANNELS);
    for ch in 0..CHANNELS {
        let plane = |img: &FundusImage| -> Vec<f64> {
            img.pixels()
                .iter()
                .skip(ch)
                .step_by(CHANNELS)
                .map(|&v| f64::from(v))
                .collect()
        };
        let x = plane(a);
        let y = plane(b);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let map = (0..mx.len())
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
            })
            .collect();
        maps.push(map);
    }
    Ok(maps)
}

/// Mean SSIM over channels and valid 11x11 window positions (Gaussian window,
/// sigma 1.5, dynamic range 1).
pub fn ssim(a: &FundusImage, b: &FundusImage) -> Result<f64> {
    let maps = ssim_maps(a, b)?;
    let total: f64 = maps
        .iter()
        .map(|m| m.iter().sum::<f64>() / m.len() as f64)
        .sum();
    Ok(total / CHANNELS as f64)
}

/// SSIM averaged only over windows whose center lies inside `mask`.
pub fn ssim_masked(a: &FundusImage, b: &FundusImage, mask: &Mask) -> Result<f64> {
    let maps = ssim_maps(a, b)?;
    let (h, w) = (a.height(), a.width());
    if mask.height() != h || mask.width() != w {
        return Err(param_err!("mask shape does not match the images"));
    }
    let r = SSIM_WINDOW / 2;
    let ow = w - SSIM_WINDOW + 1;
    let mut sum = 0.0;
    let mut n = 0usize;
    for map in &maps {
        for (i, v) in map.iter().enumerate() {
            if mask.get(i / ow + r, i % ow + r) {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(param_err!("mask selects no window centers"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub fov_only: bool,
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// One `(enhanced, ground_truth, id)` entry of a report.
pub struct EvalPair<'a> {
    pub enhanced: &'a FundusImage,
    pub ground_truth: &'a FundusImage,
    pub id: &'a str,
}

/// Rows in input order plus arithmetic means. With `fov_only` the metrics are
/// restricted to the ground truth's fov mask (images without one are scored
/// over the full frame).
pub fn build_report(dataset: &str, pairs: &[EvalPair<'_>], fov_only: bool) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(param_err!("cannot build a report from an empty list"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mask = p.ground_truth.fov_mask().filter(|_| fov_only);
        let (ps, ss) = match mask {
            Some(m) => (
                psnr_masked(p.enhanced, p.ground_truth, m)?,
                ssim_masked(p.enhanced, p.ground_truth, m)?,
            ),
            None => (psnr(p.enhanced, p.ground_truth)?, ssim(p.enhanced, p.ground_truth)?),
        };
        rows.push(MetricRow {
            id: String::from(p.id),
            psnr: ps,
            ssim: ss,
        });
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(MetricReport {
        dataset: String::from(dataset),
        fov_only,
        rows,
        mean_psnr,
        mean_ssim,
    })
}
