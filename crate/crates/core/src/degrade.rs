//! Three-factor fundus degradation: light transmission disturbance, image
//! blurring and retinal artifacts.
//!
//! A [`DegradationRecord`] holds every sampled parameter, so replaying a record
//! on the same clean image reproduces the degraded image bit for bit. The blur
//! noise is drawn from a stream derived from the record seed; nothing else in
//! the pipeline is random once the record exists.
//!
//! All convolutions use reflect-101 borders (`dcb|abcd|cba`). Gaussian
//! kernels are truncated at their stated radius and renormalized to sum one;
//! they are applied as two 1-D passes, which equals the renormalized 2-D
//! kernel because both the kernel and its normalizer factorize.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::image::{FundusImage, Mask, CHANNELS};
use crate::rng::Stream;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

const SAMPLE_LABEL: u64 = 0x5341_4d50;
const NOISE_LABEL: u64 = 0x4e4f_4953;

/// A square, sum-normalized Gaussian kernel of side `2 * radius + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel2d {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weight at offset `(di, dj)` from the center, both in `-radius..=radius`.
    pub fn at(&self, di: isize, dj: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((di + r) as usize) * self.side() + (dj + r) as usize]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn check_kernel_args(radius: usize, sigma: f64) -> Result<()> {
    if radius < 1 {
        return Err(param_err!("kernel radius must be at least 1, got {radius}"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(param_err!("kernel sigma must be positive and finite, got {sigma}"));
    }
    Ok(())
}

pub fn gaussian_kernel(radius: usize, sigma: f64) -> Result<Kernel2d> {
    check_kernel_args(radius, sigma)?;
    let r = radius as isize;
    let side = 2 * radius + 1;
    let mut weights = Vec::with_capacity(side * side);
    for di in -r..=r {
        for dj in -r..=r {
            let d2 = (di * di + dj * dj) as f64;
            weights.push(libm::exp(-d2 / (2.0 * sigma * sigma)));
        }
    }
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    Ok(Kernel2d { radius, weights })
}

/// The normalized 1-D factor of [`gaussian_kernel`].
pub fn gaussian_kernel_1d(radius: usize, sigma: f64) -> Result<Vec<f64>> {
    check_kernel_args(radius, sigma)?;
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    Ok(k)
}

/// Reflect-101 border index for any offset, folding repeatedly when the
/// offset is more than one image length outside.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable convolution of `channels` interleaved planes.
fn convolve_separable(
    src: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let radius = kernel.len() / 2;
    let r = radius as isize;
    let taps = kernel.len();
    let col_idx: Vec<usize> = (0..width as isize)
        .flat_map(|x| (-r..=r).map(move |t| reflect_index(x + t, width)))
        .collect();
    let row_idx: Vec<usize> = (0..height as isize)
        .flat_map(|y| (-r..=r).map(move |t| reflect_index(y + t, height)))
        .collect();

    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width * channels..(y + 1) * width * channels];
        for x in 0..width {
            let idx = &col_idx[x * taps..(x + 1) * taps];
            for ch in 0..channels {
                let mut acc = 0.0;
                for (k, &sx) in kernel.iter().zip(idx) {
                    acc += k * row[sx * channels + ch];
                }
                tmp[(y * width + x) * channels + ch] = acc;
            }
        }
    }

    let mut out = vec![0.0; src.len()];
    let stride = width * channels;
    for y in 0..height {
        let idx = &row_idx[y * taps..(y + 1) * taps];
        let dst = &mut out[y * stride..(y + 1) * stride];
        for (k, &sy) in kernel.iter().zip(idx) {
            let srow = &tmp[sy * stride..(sy + 1) * stride];
            for (d, s) in dst.iter_mut().zip(srow) {
                *d += k * s;
            }
        }
    }
    out
}

/// Pixel radius actually used for a kernel whose nominal radius is `r`:
/// rounded, and never below one (small images sample sub-pixel blur radii).
pub fn kernel_radius(r: f64) -> usize {
    (libm::round(r) as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightMode {
    Leak,
    UnevenExposure,
}

/// Parameters of the light transmission disturbance.
///
/// `center` is `(a, b)`: `a` indexes rows and `b` columns, matching the disk
/// test `(i - a)^2 + (j - b)^2 < r_l^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightParams {
    pub alpha: f64,
    pub beta: f64,
    pub saturation: f64,
    pub n_l: f64,
    pub center: [f64; 2],
    pub r_l: f64,
    pub sigma_l: f64,
    pub mode: LightMode,
    /// Use `alpha` itself as the contrast multiplier instead of `1 + alpha`.
    #[serde(default)]
    pub literal_alpha: bool,
}

impl LightParams {
    /// Parameters that leave any image unchanged.
    pub fn neutral(height: usize, width: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            saturation: 0.0,
            n_l: 0.0,
            center: [height as f64 / 2.0, width as f64 / 2.0],
            r_l: 1.0,
            sigma_l: 1.0,
            mode: LightMode::UnevenExposure,
            literal_alpha: false,
        }
    }

    pub fn contrast_multiplier(&self) -> f64 {
        if self.literal_alpha {
            self.alpha
        } else {
            1.0 + self.alpha
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        let vals = [self.alpha, self.beta, self.saturation, self.n_l, self.r_l, self.sigma_l];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(param_err!("light parameters must be finite"));
        }
        if self.r_l <= 0.0 || self.sigma_l <= 0.0 {
            return Err(param_err!("r_l and sigma_l must be positive"));
        }
        check_center(self.center, height, width)
    }
}

fn check_center(center: [f64; 2], height: usize, width: usize) -> Result<()> {
    let [a, b] = center;
    if !(a >= 0.0 && a < height as f64 && b >= 0.0 && b < width as f64) {
        return Err(param_err!(
            "center ({a}, {b}) lies outside the {height}x{width} image"
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub r_b: f64,
    pub sigma_b: f64,
    pub noise_std: f64,
}

impl BlurParams {
    fn validate(&self) -> Result<()> {
        if !(self.r_b > 0.0) || !self.r_b.is_finite() {
            return Err(param_err!("blur radius must be positive, got {}", self.r_b));
        }
        if !(self.sigma_b > 0.0) || !self.sigma_b.is_finite() {
            return Err(param_err!("blur sigma must be positive, got {}", self.sigma_b));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(param_err!("noise std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// One dust/grain spot. `center` is `(u, v)` = `(column, row)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactObject {
    pub radius: f64,
    pub center: [f64; 2],
}

impl ArtifactObject {
    pub fn sigma(&self) -> f64 {
        artifact_sigma(self.radius)
    }

    pub fn amplitude(&self) -> f64 {
        artifact_amplitude(self.radius)
    }
}

/// `sigma_k = 5 + 0.8 r_k`.
pub fn artifact_sigma(r_k: f64) -> f64 {
    5.0 + 0.8 * r_k
}

/// `o_k = 1 - exp(-(0.5 + 0.04 r_k)(0.012 r_k))`.
pub fn artifact_amplitude(r_k: f64) -> f64 {
    1.0 - libm::exp(-(0.5 + 0.04 * r_k) * (0.012 * r_k))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactParams {
    pub objects: Vec<ArtifactObject>,
}

impl ArtifactParams {
    fn validate(&self, img: Option<&FundusImage>, height: usize, width: usize) -> Result<()> {
        for (k, obj) in self.objects.iter().enumerate() {
            if !(obj.radius > 0.0) || !obj.radius.is_finite() {
                return Err(param_err!("artifact {k} has non-positive radius {}", obj.radius));
            }
            let [u, v] = obj.center;
            check_center([v, u], height, width)
                .map_err(|_| param_err!("artifact {k} center ({u}, {v}) is outside the image"))?;
            if let Some(mask) = img.and_then(FundusImage::fov_mask) {
                if !mask.get(v as usize, u as usize) {
                    return Err(param_err!("artifact {k} center ({u}, {v}) is outside the fov"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorFlags {
    pub light: bool,
    pub blur: bool,
    pub artifacts: bool,
}

impl FactorFlags {
    pub fn any(&self) -> bool {
        self.light || self.blur || self.artifacts
    }
}

/// Every sampled parameter of one degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub schema_version: u32,
    pub seed: u64,
    /// `(height, width)` of the image the record was sampled for.
    pub image_size: [usize; 2],
    pub enabled: FactorFlags,
    pub light: Option<LightParams>,
    pub blur: Option<BlurParams>,
    pub artifacts: Option<ArtifactParams>,
    pub order: String,
}

pub const FACTOR_ORDER: &str = "light,blur,artifacts";

impl DegradationRecord {
    /// Builds and validates a record. Enabled flags follow the supplied
    /// factors; at least one factor is required.
    pub fn new(
        seed: u64,
        image_size: [usize; 2],
        light: Option<LightParams>,
        blur: Option<BlurParams>,
        artifacts: Option<ArtifactParams>,
    ) -> Result<Self> {
        let rec = Self {
            schema_version: RECORD_SCHEMA_VERSION,
            seed,
            image_size,
            enabled: FactorFlags {
                light: light.is_some(),
                blur: blur.is_some(),
                artifacts: artifacts.is_some(),
            },
            light,
            blur,
            artifacts,
            order: String::from(FACTOR_ORDER),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RECORD_SCHEMA_VERSION {
            return Err(param_err!(
                "unsupported record schema version {}",
                self.schema_version
            ));
        }
        if self.order != FACTOR_ORDER {
            return Err(param_err!("unsupported factor order {:?}", self.order));
        }
        if !self.enabled.any() {
            return Err(param_err!("a degradation record needs at least one factor"));
        }
        if self.enabled.light != self.light.is_some()
            || self.enabled.blur != self.blur.is_some()
            || self.enabled.artifacts != self.artifacts.is_some()
        {
            return Err(param_err!("enabled flags disagree with the stored parameters"));
        }
        let [h, w] = self.image_size;
        if let Some(p) = &self.light {
            p.validate(h, w)?;
        }
        if let Some(p) = &self.blur {
            p.validate()?;
        }
        if let Some(p) = &self.artifacts {
            p.validate(None, h, w)?;
        }
        Ok(())
    }
}

/// Sampling ranges. Every `[lo, hi]` pair is drawn uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub saturation: [f64; 2],
    pub n_l: [f64; 2],
    /// Light center coordinates as fractions of the image size.
    pub center_frac: [f64; 2],
    pub leak_radius_frac: [f64; 2],
    pub uneven_radius_frac: [f64; 2],
    /// `sigma_l / r_l`, shared by both light modes.
    pub sigma_l_ratio: [f64; 2],
    pub blur_sigma_frac: f64,
    pub blur_radius_frac: [f64; 2],
    pub blur_noise_std: f64,
    pub artifact_count: [u32; 2],
    pub artifact_radius_frac: [f64; 2],
    pub p_light: f64,
    pub p_blur: f64,
    pub p_artifacts: f64,
    pub literal_alpha: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            alpha: [-0.5, 0.5],
            beta: [-0.5, 0.5],
            saturation: [-0.5, 0.5],
            n_l: [-0.25, 0.25],
            center_frac: [0.375, 0.625],
            leak_radius_frac: [0.75, 1.0],
            uneven_radius_frac: [0.3, 0.5],
            sigma_l_ratio: [0.55, 0.75],
            blur_sigma_frac: 0.03,
            blur_radius_frac: [0.01, 0.015],
            blur_noise_std: 0.01,
            artifact_count: [10, 30],
            artifact_radius_frac: [0.025, 0.05],
            p_light: 0.5,
            p_blur: 0.5,
            p_artifacts: 0.5,
            literal_alpha: false,
        }
    }
}

impl SamplerConfig {
    /// A sampler whose every record is a zero-strength light disturbance, so
    /// degraded images equal their inputs.
    pub fn neutral() -> Self {
        Self {
            alpha: [0.0, 0.0],
            beta: [0.0, 0.0],
            saturation: [0.0, 0.0],
            n_l: [0.0, 0.0],
            p_light: 1.0,
            p_blur: 0.0,
            p_artifacts: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("saturation", self.saturation),
            ("n_l", self.n_l),
            ("center_frac", self.center_frac),
            ("leak_radius_frac", self.leak_radius_frac),
            ("uneven_radius_frac", self.uneven_radius_frac),
            ("sigma_l_ratio", self.sigma_l_ratio),
            ("blur_radius_frac", self.blur_radius_frac),
            ("artifact_radius_frac", self.artifact_radius_frac),
        ];
        for (name, [lo, hi]) in ranges {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(param_err!("range {name} = [{lo}, {hi}] is empty or not finite"));
            }
        }
        let positive = [
            ("leak_radius_frac", self.leak_radius_frac[0]),
            ("uneven_radius_frac", self.uneven_radius_frac[0]),
            ("sigma_l_ratio", self.sigma_l_ratio[0]),
            ("artifact_radius_frac", self.artifact_radius_frac[0]),
            ("blur_sigma_frac", self.blur_sigma_frac),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(param_err!("{name} must be positive, got {v}"));
            }
        }
        if !(self.blur_radius_frac[0] >= 0.0) {
            return Err(param_err!("blur_radius_frac must be non-negative"));
        }
        if !(self.blur_noise_std >= 0.0) || !self.blur_noise_std.is_finite() {
            return Err(param_err!("blur_noise_std must be non-negative"));
        }
        if self.artifact_count[0] > self.artifact_count[1] {
            return Err(param_err!(
                "artifact_count [{}, {}] is empty",
                self.artifact_count[0],
                self.artifact_count[1]
            ));
        }
        for (name, p) in [
            ("p_light", self.p_light),
            ("p_blur", self.p_blur),
            ("p_artifacts", self.p_artifacts),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(param_err!("{name} = {p} is not a probability"));
            }
        }
        Ok(())
    }
}

fn draw(s: &mut Stream, [lo, hi]: [f64; 2]) -> f64 {
    s.uniform(lo, hi)
}

/// Samples a degradation for an image of `height x width`.
///
/// The record is a pure function of `(seed, cfg, height, width, fov)`. Draws
/// come from `Stream::derived(seed, [SAMPLE_LABEL])` in this order:
///
/// 1. three enable draws (light, blur, artifacts), each `uniform01 < p`;
/// 2. if all three are off, `index(3)` forces one on;
/// 3. light: mode `index(2)` (0 = leak), alpha, beta, saturation, n_l,
///    center fraction a, center fraction b, radius fraction, sigma ratio;
/// 4. blur: radius fraction;
/// 5. artifacts: count `K`, then per object its radius fraction followed by
///    `index(n)` over the `n` candidate pixels (fov pixels in raster order,
///    or every pixel when there is no usable mask).
///
/// `w` is the shorter image side.
pub fn sample_degradation(
    seed: u64,
    cfg: &SamplerConfig,
    height: usize,
    width: usize,
    fov: Option<&Mask>,
) -> Result<DegradationRecord> {
    cfg.validate()?;
    if height < crate::image::MIN_SIDE || width < crate::image::MIN_SIDE {
        return Err(param_err!("image size {height}x{width} is below 16"));
    }
    if let Some(m) = fov {
        if m.height() != height || m.width() != width {
            return Err(param_err!("fov mask shape does not match the image"));
        }
    }
    let w = height.min(width) as f64;
    let mut s = Stream::derived(seed, &[SAMPLE_LABEL]);

    let mut flags = FactorFlags {
        light: s.bernoulli(cfg.p_light),
        blur: s.bernoulli(cfg.p_blur),
        artifacts: s.bernoulli(cfg.p_artifacts),
    };
    if !flags.any() {
        match s.index(3) {
            0 => flags.light = true,
            1 => flags.blur = true,
            _ => flags.artifacts = true,
        }
    }

    let light = flags.light.then(|| {
        let mode = if s.index(2) == 0 {
            LightMode::Leak
        } else {
            LightMode::UnevenExposure
        };
        let alpha = draw(&mut s, cfg.alpha);
        let beta = draw(&mut s, cfg.beta);
        let saturation = draw(&mut s, cfg.saturation);
        let n_l = draw(&mut s, cfg.n_l);
        let a = draw(&mut s, cfg.center_frac) * w;
        let b = draw(&mut s, cfg.center_frac) * w;
        let radius_range = match mode {
            LightMode::Leak => cfg.leak_radius_frac,
            LightMode::UnevenExposure => cfg.uneven_radius_frac,
        };
        let r_l = draw(&mut s, radius_range) * w;
        let sigma_l = draw(&mut s, cfg.sigma_l_ratio) * r_l;
        LightParams {
            alpha,
            beta,
            saturation,
            n_l,
            center: [a.min(height as f64 - 1.0), b.min(width as f64 - 1.0)],
            r_l,
            sigma_l,
            mode,
            literal_alpha: cfg.literal_alpha,
        }
    });

    let blur = flags.blur.then(|| BlurParams {
        r_b: draw(&mut s, cfg.blur_radius_frac) * w,
        sigma_b: cfg.blur_sigma_frac * w,
        noise_std: cfg.blur_noise_std,
    });

    let artifacts = flags.artifacts.then(|| {
        let candidates: Option<Vec<usize>> = fov.filter(|m| m.count() > 0).map(|m| {
            m.as_slice()
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect()
        });
        let k = s.int_inclusive(cfg.artifact_count[0], cfg.artifact_count[1]);
        let objects = (0..k)
            .map(|_| {
                let radius = draw(&mut s, cfg.artifact_radius_frac) * w;
                let pixel = match &candidates {
                    Some(c) => c[s.index(c.len())],
                    None => s.index(height * width),
                };
                ArtifactObject {
                    radius,
                    center: [(pixel % width) as f64, (pixel / width) as f64],
                }
            })
            .collect();
        ArtifactParams { objects }
    });

    DegradationRecord::new(seed, [height, width], light, blur, artifacts)
}

/// `J_ij = n_l` strictly inside the disk of radius `r_l` around `center`.
pub fn make_illumination_bias(
    height: usize,
    width: usize,
    center: [f64; 2],
    r_l: f64,
    n_l: f64,
) -> Result<Vec<f64>> {
    if !(r_l > 0.0) {
        return Err(param_err!("bias radius must be positive, got {r_l}"));
    }
    check_center(center, height, width)?;
    let [a, b] = center;
    let r2 = r_l * r_l;
    let mut out = vec![0.0; height * width];
    for i in 0..height {
        let di = i as f64 - a;
        for j in 0..width {
            let dj = j as f64 - b;
            if di * di + dj * dj < r2 {
                out[i * width + j] = n_l;
            }
        }
    }
    Ok(out)
}

/// Scales HSV saturation by `k` keeping hue and value, then leaves clipping to
/// the caller. Pixels with non-positive value or zero chroma are untouched.
fn scale_saturation(px: &mut [f64], k: f64) {
    let v = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mn = px.iter().copied().fold(f64::INFINITY, f64::min);
    let chroma = v - mn;
    if v <= 0.0 || chroma <= 0.0 {
        return;
    }
    let sat = chroma / v;
    let target = (sat * k).clamp(0.0, 1.0);
    let ratio = target / sat;
    for c in px.iter_mut() {
        *c = v - (v - *c) * ratio;
    }
}

pub fn apply_light_disturbance(img: &FundusImage, p: &LightParams) -> Result<FundusImage> {
    let (h, w) = (img.height(), img.width());
    p.validate(h, w)?;
    let bias = make_illumination_bias(h, w, p.center, p.r_l, p.n_l)?;
    let smoothed = if p.n_l == 0.0 {
        bias
    } else {
        let k = gaussian_kernel_1d(kernel_radius(p.r_l), p.sigma_l)?;
        convolve_separable(&bias, h, w, 1, &k)
    };
    let mult = p.contrast_multiplier();
    let mut vals = img.to_f64();
    for (px, &j) in vals.chunks_exact_mut(CHANNELS).zip(&smoothed) {
        for c in px.iter_mut() {
            *c = mult * (*c + j) + p.beta;
        }
        if p.saturation != 0.0 {
            scale_saturation(px, 1.0 + p.saturation);
        }
    }
    Ok(img.replaced(&vals))
}

pub fn apply_blur(img: &FundusImage, p: &BlurParams, rng: &mut Stream) -> Result<FundusImage> {
    p.validate()?;
    let k = gaussian_kernel_1d(kernel_radius(p.r_b), p.sigma_b)?;
    let mut vals = convolve_separable(&img.to_f64(), img.height(), img.width(), CHANNELS, &k);
    if p.noise_std > 0.0 {
        for v in vals.iter_mut() {
            *v += p.noise_std * rng.normal();
        }
    }
    Ok(img.replaced(&vals))
}

pub fn apply_artifacts(img: &FundusImage, p: &ArtifactParams) -> Result<FundusImage> {
    let (h, w) = (img.height(), img.width());
    p.validate(Some(img), h, w)?;
    let mut vals = img.to_f64();
    for obj in &p.objects {
        let sigma = obj.sigma();
        let amp = obj.amplitude();
        let patch = obj.radius / 4.0;
        let [u, v] = obj.center;
        let r0 = libm::floor(v - patch).max(0.0) as usize;
        let r1 = (libm::ceil(v + patch) as usize).min(h - 1);
        let c0 = libm::floor(u - patch).max(0.0) as usize;
        let c1 = (libm::ceil(u + patch) as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (dr, dc) = (r as f64 - v, c as f64 - u);
                let d2 = dr * dr + dc * dc;
                if d2 > patch * patch {
                    continue;
                }
                let add = amp * libm::exp(-d2 / (2.0 * sigma * sigma));
                for ch in 0..CHANNELS {
                    vals[(r * w + c) * CHANNELS + ch] += add;
                }
            }
        }
    }
    Ok(img.replaced(&vals))
}

/// Applies the enabled factors of `rec` in the order light, blur, artifacts.
pub fn degrade(img: &FundusImage, rec: &DegradationRecord) -> Result<FundusImage> {
    rec.validate()?;
    if rec.image_size != [img.height(), img.width()] {
        return Err(param_err!(
            "record was sampled for {:?} but the image is {}x{}",
            rec.image_size,
            img.height(),
            img.width()
        ));
    }
    let mut out = img.clone();
    if let Some(p) = &rec.light {
        out = apply_light_disturbance(&out, p)?;
    }
    if let Some(p) = &rec.blur {
        let mut noise = Stream::derived(rec.seed, &[NOISE_LABEL]);
        out = apply_blur(&out, p, &mut noise)?;
    }
    if let Some(p) = &rec.artifacts {
        out = apply_artifacts(&out, p)?;
    }
    Ok(out)
}
