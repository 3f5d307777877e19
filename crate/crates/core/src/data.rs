//! Training data: field-of-view masks, resampling, mask pyramids, on-the-fly
//! pair synthesis and the labeled/unlabeled batch schedule.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::degrade::{degrade, sample_degradation, DegradationRecord, SamplerConfig};
use crate::error::{param_err, Error, Result};
use crate::image::{FundusImage, Mask, CHANNELS};
use crate::magenet::{RSP_SCALES, SIDE_MULTIPLE};
use crate::rng::{derive_seed, hash_str, Stream};
use crate::tensor::Tensor;

/// Mean-intensity threshold of [`fov_mask`].
pub const FOV_THRESHOLD: f32 = 0.02;

const LABELED_LABEL: u64 = 0x4c41_4245;
const UNLABELED_LABEL: u64 = 0x554e_4c41;
const PAIR_LABEL: u64 = 0x5041_4952;

/// Bright region of the frame: pixels whose channel mean exceeds
/// [`FOV_THRESHOLD`], reduced to the largest 4-connected component with
/// interior holes filled. An all-dark image yields an empty mask.
pub fn fov_mask(img: &FundusImage) -> Mask {
    let (h, w) = (img.height(), img.width());
    let bright: Vec<bool> = img
        .pixels()
        .chunks_exact(CHANNELS)
        .map(|px| px.iter().sum::<f32>() / CHANNELS as f32 > FOV_THRESHOLD)
        .collect();

    let mut label = vec![0u32; h * w];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !bright[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours4(i, h, w).into_iter().flatten() {
                if bright[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    if best.1 == 0 {
        return Mask::filled(h, w, false);
    }
    let keep: Vec<bool> = label.iter().map(|&l| l == best.0).collect();

    // Background reachable from the border stays outside; everything else is
    // a hole and is filled.
    let mut outside = vec![false; h * w];
    for i in 0..h * w {
        let (r, c) = (i / w, i % w);
        if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !keep[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours4(i, h, w).into_iter().flatten() {
            if !keep[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    let data = outside.iter().map(|&o| !o).collect();
    Mask::new(h, w, data).expect("mask dimensions are consistent")
}

fn neighbours4(i: usize, h: usize, w: usize) -> [Option<usize>; 4] {
    let (r, c) = (i / w, i % w);
    [
        (r > 0).then(|| i - w),
        (r + 1 < h).then(|| i + w),
        (c > 0).then(|| i - 1),
        (c + 1 < w).then(|| i + 1),
    ]
}

/// Half-pixel-center source taps `(i0, i1, frac)` along one axis.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling to `height x width`; the fov mask, if any, follows by
/// nearest neighbour.
pub fn resize_to(img: &FundusImage, height: usize, width: usize) -> Result<FundusImage> {
    if (height, width) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let ty = taps(h, height);
    let tx = taps(w, width);
    let src = img.pixels();
    let at = |r: usize, c: usize, ch: usize| f64::from(src[(r * w + c) * CHANNELS + ch]);
    let mut out = Vec::with_capacity(height * width * CHANNELS);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            for ch in 0..CHANNELS {
                let top = (1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x1, ch);
                let bot = (1.0 - fx) * at(y1, x0, ch) + fx * at(y1, x1, ch);
                out.push((1.0 - fy) * top + fy * bot);
            }
        }
    }
    let mask = img.fov_mask().map(|m| resize_mask(m, height, width));
    FundusImage::from_clipped(height, width, &out)?.with_mask(mask)
}

/// Square resize to `side x side`; `side` must be a multiple of 16.
pub fn resize(img: &FundusImage, side: usize) -> Result<FundusImage> {
    if side == 0 || side % SIDE_MULTIPLE != 0 {
        return Err(param_err!("resize side {side} is not a multiple of {SIDE_MULTIPLE}"));
    }
    resize_to(img, side, side)
}

/// Nearest-neighbour mask resampling with half-pixel centers.
pub fn resize_mask(m: &Mask, height: usize, width: usize) -> Mask {
    let near = |o: usize, input: usize, output: usize| {
        (((o as f64 + 0.5) * input as f64 / output as f64) as usize).min(input - 1)
    };
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let sr = near(r, m.height(), height);
        for c in 0..width {
            data.push(m.get(sr, near(c, m.width(), width)));
        }
    }
    Mask::new(height, width, data).expect("mask dimensions are consistent")
}

/// Bilinear resampling of a `C x H x W` soft mask, clipped to `[0, 1]`.
pub fn resize_soft_mask(m: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let (c, h, w) = m.chw();
    if (h, w) == (height, width) {
        return m.clone();
    }
    let ty = taps(h, height);
    let tx = taps(w, width);
    let mut out = Vec::with_capacity(c * height * width);
    for plane in m.data().chunks_exact(h * w) {
        let at = |r: usize, col: usize| f64::from(plane[r * w + col]);
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                let bot = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                out.push(crate::image::clip01((1.0 - fy) * top + fy * bot) as f32);
            }
        }
    }
    Tensor::from_vec(&[c, height, width], out)
}

/// 2x2 area average of a `C x H x W` map with even sides.
pub fn downsample_area(m: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = m.chw();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(param_err!("cannot halve a {h}x{w} mask"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in m.data().chunks_exact(h * w) {
        for r in 0..oh {
            for col in 0..ow {
                let i = 2 * r * w + 2 * col;
                let s = f64::from(plane[i])
                    + f64::from(plane[i + 1])
                    + f64::from(plane[i + w])
                    + f64::from(plane[i + w + 1]);
                out.push((s / 4.0) as f32);
            }
        }
    }
    Ok(Tensor::from_vec(&[c, oh, ow], out))
}

/// Full-resolution mask followed by three successive area halvings.
pub fn mask_pyramid(full: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    check_mask_values(full)?;
    let mut out = Vec::with_capacity(RSP_SCALES);
    out.push(full.clone());
    for _ in 1..RSP_SCALES {
        let next = downsample_area(out.last().expect("pyramid is non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

fn check_mask_values(m: &Tensor<f32>) -> Result<()> {
    if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(param_err!("mask values must lie in [0, 1]"));
    }
    Ok(())
}

/// Accepts either one full-resolution mask (expanded into a pyramid) or one
/// mask per scale, checking every scale's shape against the image.
pub fn normalize_masks(masks: &[Tensor<f32>], height: usize, width: usize) -> Result<Vec<Tensor<f32>>> {
    match masks.len() {
        1 => {
            let (_, h, w) = masks[0].chw();
            if (h, w) != (height, width) {
                return Err(param_err!("mask is {h}x{w}, image is {height}x{width}"));
            }
            mask_pyramid(&masks[0])
        }
        RSP_SCALES => {
            for (v, m) in masks.iter().enumerate() {
                let (_, h, w) = m.chw();
                if (h, w) != (height >> v, width >> v) {
                    return Err(param_err!(
                        "mask at scale {v} is {h}x{w}, expected {}x{}",
                        height >> v,
                        width >> v
                    ));
                }
                check_mask_values(m)?;
            }
            Ok(masks.to_vec())
        }
        n => Err(param_err!("expected 1 or {RSP_SCALES} masks, got {n}")),
    }
}

/// One synthesized training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub low: FundusImage,
    pub high: FundusImage,
    /// Mask pyramid at `H / 2^v`, when the record carries masks.
    pub masks: Option<Vec<Tensor<f32>>>,
    pub record: Option<DegradationRecord>,
}

/// Samples a degradation with `seed`, applies it to `high`, and expands the
/// masks into their pyramid.
pub fn build_pair(
    high: &FundusImage,
    masks: Option<&[Tensor<f32>]>,
    seed: u64,
    sampler: &SamplerConfig,
) -> Result<SamplePair> {
    let fov = high.fov_mask().cloned().unwrap_or_else(|| fov_mask(high));
    let record = sample_degradation(seed, sampler, high.height(), high.width(), Some(&fov))?;
    let low = degrade(high, &record)?;
    let masks = masks
        .map(|m| normalize_masks(m, high.height(), high.width()))
        .transpose()?;
    Ok(SamplePair {
        low,
        high: high.clone(),
        masks,
        record: Some(record),
    })
}

/// Seed of the pair built for record `id` in `epoch`.
pub fn pair_seed(global: u64, epoch: u64, id: &str) -> u64 {
    derive_seed(global, &[PAIR_LABEL, epoch, hash_str(id)])
}

/// When labeled pairs are degraded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeSchedule {
    /// A fresh degradation every epoch.
    #[default]
    PerEpoch,
    /// One degradation per record for the whole run.
    Fixed,
}

/// Which records make up the batch at a given step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub step: u64,
    pub epoch: u64,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Deterministic, random-access batch schedule: each epoch is a fresh
/// permutation of the labeled records cut into `m_b`-sized batches (a
/// remainder is dropped); unlabeled records follow their own per-epoch
/// permutation, cycled as needed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    n_labeled: usize,
    n_unlabeled: usize,
    m_b: usize,
    n_b: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(n_labeled: usize, n_unlabeled: usize, m_b: usize, n_b: usize, seed: u64) -> Result<Self> {
        if m_b == 0 {
            return Err(Error::Config("labeled_per_batch must be at least 1".into()));
        }
        if n_labeled < m_b {
            return Err(Error::Config(alloc::format!(
                "batches need {m_b} labeled records but only {n_labeled} are available (short by {})",
                m_b - n_labeled
            )));
        }
        if n_unlabeled < n_b {
            return Err(Error::Config(alloc::format!(
                "batches need {n_b} unlabeled records but only {n_unlabeled} are available (short by {})",
                n_b - n_unlabeled
            )));
        }
        Ok(Self {
            n_labeled,
            n_unlabeled,
            m_b,
            n_b,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_labeled / self.m_b
    }

    fn permutation(&self, label: u64, epoch: u64, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        Stream::derived(self.seed, &[label, epoch]).shuffle(&mut p);
        p
    }

    pub fn batch(&self, step: u64) -> BatchIndices {
        let bpe = self.batches_per_epoch() as u64;
        let (epoch, idx) = (step / bpe, (step % bpe) as usize);
        let lab = self.permutation(LABELED_LABEL, epoch, self.n_labeled);
        let labeled = lab[idx * self.m_b..(idx + 1) * self.m_b].to_vec();
        let unlabeled = if self.n_b == 0 {
            Vec::new()
        } else {
            let perm = self.permutation(UNLABELED_LABEL, epoch, self.n_unlabeled);
            (0..self.n_b)
                .map(|j| perm[(idx * self.n_b + j) % self.n_unlabeled])
                .collect()
        };
        BatchIndices {
            step,
            epoch,
            labeled,
            unlabeled,
        }
    }
}

/// A labeled record: clean image, optional masks, and optionally a stored
/// degraded counterpart that replaces on-the-fly synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSource {
    pub id: String,
    pub high: FundusImage,
    pub masks: Option<Vec<Tensor<f32>>>,
    pub low: Option<FundusImage>,
}

/// A fully materialised batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: BatchIndices,
    pub labeled: Vec<SamplePair>,
    pub unlabeled: Vec<FundusImage>,
}

/// Batch source over in-memory records.
#[derive(Clone, Debug)]
pub struct BatchSource<'a> {
    labeled: &'a [LabeledSource],
    unlabeled: &'a [FundusImage],
    plan: BatchPlan,
    sampler: SamplerConfig,
    schedule: DegradeSchedule,
    seed: u64,
}

impl<'a> BatchSource<'a> {
    pub fn new(
        labeled: &'a [LabeledSource],
        unlabeled: &'a [FundusImage],
        m_b: usize,
        n_b: usize,
        sampler: SamplerConfig,
        schedule: DegradeSchedule,
        seed: u64,
    ) -> Result<Self> {
        sampler.validate()?;
        Ok(Self {
            labeled,
            unlabeled,
            plan: BatchPlan::new(labeled.len(), unlabeled.len(), m_b, n_b, seed)?,
            sampler,
            schedule,
            seed,
        })
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn pair(&self, index: usize, epoch: u64) -> Result<SamplePair> {
        let src = &self.labeled[index];
        if let Some(low) = &src.low {
            if !low.same_shape(&src.high) {
                return Err(param_err!("stored degraded image for {} has the wrong shape", src.id));
            }
            let masks = src
                .masks
                .as_deref()
                .map(|m| normalize_masks(m, src.high.height(), src.high.width()))
                .transpose()?;
            return Ok(SamplePair {
                low: low.clone(),
                high: src.high.clone(),
                masks,
                record: None,
            });
        }
        let e = match self.schedule {
            DegradeSchedule::PerEpoch => epoch,
            DegradeSchedule::Fixed => 0,
        };
        build_pair(
            &src.high,
            src.masks.as_deref(),
            pair_seed(self.seed, e, &src.id),
            &self.sampler,
        )
    }

    /// The batch used at training step `step`.
    pub fn batch(&self, step: u64) -> Result<Batch> {
        let indices = self.plan.batch(step);
        let labeled = indices
            .labeled
            .iter()
            .map(|&i| self.pair(i, indices.epoch))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = indices.unlabeled.iter().map(|&i| self.unlabeled[i].clone()).collect();
        Ok(Batch {
            indices,
            labeled,
            unlabeled,
        })
    }

    /// Batches from `start` onward.
    pub fn iter_from(&self, start: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        (start..).map(move |s| self.batch(s))
    }
}
