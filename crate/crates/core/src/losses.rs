//! Charbonnier, edge, multi-scale segmentation and consistency losses, the
//! supervised and total objectives, and the Gaussian consistency ramp.
//!
//! Every loss exists twice: as a plain function over tensors returning `f64`,
//! and as a graph builder for training. Both share the same accumulation code
//! in [`crate::autodiff`], so their values agree exactly.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    abs_error_value, charbonnier_value, laplacian_planes, squared_error_value, Graph, Reduce, Var,
};
use crate::error::{contract_err, param_err, Result};
use crate::magenet::{ForwardVars, ModelOutput, RSP_SCALES};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Per-element means.
    #[default]
    Mean,
    /// Global norms: `sqrt(sum d^2 + eps^2)`, root-sum-square, and L1 sums.
    GlobalNorm,
}

impl Reduction {
    fn op(self) -> Reduce {
        match self {
            Self::Mean => Reduce::Mean,
            Self::GlobalNorm => Reduce::Global,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub mu_max: f64,
    pub rampup_steps: u64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            lambda: 0.5,
            mu_max: 1.0,
            rampup_steps: 4000,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(param_err!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(param_err!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.mu_max >= 0.0 && self.mu_max.is_finite()) {
            return Err(param_err!("mu_max must be non-negative, got {}", self.mu_max));
        }
        if self.rampup_steps == 0 {
            return Err(param_err!("rampup_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Every loss term of one sample or one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub char: [f64; 2],
    pub edge: [f64; 2],
    pub seg: [f64; RSP_SCALES],
    pub cons_enh: [f64; 2],
    pub cons_seg: [f64; RSP_SCALES],
    pub mu: f64,
    pub supervised_total: f64,
    pub consistency_total: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        self.char
            .iter()
            .chain(&self.edge)
            .chain(&self.seg)
            .chain(&self.cons_enh)
            .chain(&self.cons_seg)
            .chain([&self.mu, &self.supervised_total, &self.consistency_total, &self.total])
            .all(|v| v.is_finite())
    }

    /// Field-wise sum of the loss terms; `mu` is taken from `other`.
    pub fn accumulate(&mut self, other: &Self) {
        fn add<const N: usize>(a: &mut [f64; N], b: &[f64; N]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        add(&mut self.char, &other.char);
        add(&mut self.edge, &other.edge);
        add(&mut self.seg, &other.seg);
        add(&mut self.cons_enh, &other.cons_enh);
        add(&mut self.cons_seg, &other.cons_seg);
        self.mu = other.mu;
        self.supervised_total += other.supervised_total;
        self.consistency_total += other.consistency_total;
        self.total += other.total;
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(param_err!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean of `sqrt((pred - target)^2 + eps^2)`.
pub fn charbonnier<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64> {
    charbonnier_with(pred, target, eps, Reduction::Mean)
}

pub fn charbonnier_with<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    eps: f64,
    reduction: Reduction,
) -> Result<f64> {
    same_shape(pred, target, "charbonnier")?;
    Ok(charbonnier_value(pred.data(), target.data(), eps, reduction.op()))
}

/// Per-channel 5-point Laplacian with reflect-101 borders (`C x H x W`).
pub fn laplacian<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = img.chw();
    Tensor::from_vec(img.shape(), laplacian_planes(img.data(), c, h, w))
}

/// Charbonnier of the Laplacians.
pub fn edge_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64> {
    edge_loss_with(pred, target, eps, Reduction::Mean)
}

pub fn edge_loss_with<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    eps: f64,
    reduction: Reduction,
) -> Result<f64> {
    same_shape(pred, target, "edge loss")?;
    charbonnier_with(&laplacian(pred), &laplacian(target), eps, reduction)
}

/// Per-scale mean squared error between native-scale maps and mask pyramid.
pub fn seg_loss<T: Real>(pred_maps: &[Tensor<T>], gt_masks: &[Tensor<T>]) -> Result<Vec<f64>> {
    seg_loss_with(pred_maps, gt_masks, Reduction::Mean)
}

pub fn seg_loss_with<T: Real>(
    pred_maps: &[Tensor<T>],
    gt_masks: &[Tensor<T>],
    reduction: Reduction,
) -> Result<Vec<f64>> {
    if pred_maps.len() != gt_masks.len() {
        return Err(param_err!(
            "{} seg maps for {} masks",
            pred_maps.len(),
            gt_masks.len()
        ));
    }
    pred_maps
        .iter()
        .zip(gt_masks)
        .map(|(p, m)| {
            same_shape(p, m, "seg loss")?;
            Ok(squared_error_value(p.data(), m.data(), reduction.op()))
        })
        .collect()
}

/// `sum_s (char_s + edge_s) + lambda * sum_v seg_v` for one labeled sample.
///
/// `None` masks skip the segmentation term. Without a second stage only the
/// first stage is counted.
pub fn supervised_loss<T: Real>(
    out: &ModelOutput<T>,
    target: &Tensor<T>,
    masks: Option<&[Tensor<T>]>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if !(1..=2).contains(&out.stages) {
        return Err(contract_err!("model output has {} stages", out.stages));
    }
    let mut b = LossBreakdown::default();
    for s in 0..out.stages {
        b.char[s] = charbonnier_with(&out.enhanced[s], target, cfg.epsilon, cfg.reduction)?;
        b.edge[s] = edge_loss_with(&out.enhanced[s], target, cfg.epsilon, cfg.reduction)?;
    }
    if let Some(m) = masks {
        if !out.seg_native.is_empty() {
            let seg = seg_loss_with(&out.seg_native, m, cfg.reduction)?;
            if seg.len() != RSP_SCALES {
                return Err(contract_err!("expected {RSP_SCALES} seg scales, got {}", seg.len()));
            }
            b.seg.copy_from_slice(&seg);
        }
    }
    b.supervised_total = b.char.iter().chain(&b.edge).sum::<f64>() + cfg.lambda * b.seg.iter().sum::<f64>();
    b.total = b.supervised_total;
    Ok(b)
}

/// Mean absolute differences between student and teacher outputs.
pub fn consistency_loss<T: Real>(
    student: &ModelOutput<T>,
    teacher: &ModelOutput<T>,
    reduction: Reduction,
) -> Result<LossBreakdown> {
    if student.seg_maps.len() != teacher.seg_maps.len() {
        return Err(contract_err!(
            "student has {} seg maps, teacher {}",
            student.seg_maps.len(),
            teacher.seg_maps.len()
        ));
    }
    if student.stages != teacher.stages {
        return Err(contract_err!("student has {} stages, teacher {}", student.stages, teacher.stages));
    }
    let mut b = LossBreakdown::default();
    for s in 0..student.stages {
        let (x, y) = (&student.enhanced[s], &teacher.enhanced[s]);
        if x.shape() != y.shape() {
            return Err(contract_err!("enhanced shapes {:?} vs {:?}", x.shape(), y.shape()));
        }
        b.cons_enh[s] = abs_error_value(x.data(), y.data(), reduction.op());
    }
    for (v, (x, y)) in student.seg_maps.iter().zip(&teacher.seg_maps).enumerate() {
        if x.shape() != y.shape() {
            return Err(contract_err!("seg shapes {:?} vs {:?}", x.shape(), y.shape()));
        }
        b.cons_seg[v] = abs_error_value(x.data(), y.data(), reduction.op());
    }
    b.consistency_total = b.cons_enh.iter().chain(&b.cons_seg).sum();
    Ok(b)
}

/// Gaussian warm-up `mu_max * exp(-5 (1 - min(step, T) / T)^2)`.
pub fn rampup_mu(step: u64, rampup_steps: u64, mu_max: f64) -> f64 {
    let t = rampup_steps.max(1);
    let phase = 1.0 - step.min(t) as f64 / t as f64;
    mu_max * libm::exp(-5.0 * phase * phase)
}

/// Merges supervised and consistency parts: `total = sup + mu * cons`.
pub fn total_loss(sup: &LossBreakdown, cons: &LossBreakdown, mu: f64) -> LossBreakdown {
    LossBreakdown {
        char: sup.char,
        edge: sup.edge,
        seg: sup.seg,
        cons_enh: cons.cons_enh,
        cons_seg: cons.cons_seg,
        mu,
        supervised_total: sup.supervised_total,
        consistency_total: cons.consistency_total,
        total: sup.supervised_total + mu * cons.consistency_total,
    }
}

/// Graph handles of a supervised objective.
#[derive(Clone, Debug)]
pub struct SupervisedVars {
    pub char: Vec<Var>,
    pub edge: Vec<Var>,
    pub seg: Vec<Var>,
    pub total: Var,
}

impl SupervisedVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, lambda: f64) -> LossBreakdown {
        let val = |v: &Var| g.value(*v).item().as_f64();
        let mut b = LossBreakdown::default();
        for (i, v) in self.char.iter().enumerate() {
            b.char[i] = val(v);
        }
        for (i, v) in self.edge.iter().enumerate() {
            b.edge[i] = val(v);
        }
        for (i, v) in self.seg.iter().enumerate() {
            b.seg[i] = val(v);
        }
        b.supervised_total =
            b.char.iter().chain(&b.edge).sum::<f64>() + lambda * b.seg.iter().sum::<f64>();
        b.total = b.supervised_total;
        b
    }
}

/// Differentiable supervised objective for one labeled sample.
pub fn supervised_graph<T: Real>(
    g: &mut Graph<T>,
    out: &ForwardVars,
    target: Var,
    masks: Option<&[Var]>,
    cfg: &LossConfig,
) -> Result<SupervisedVars> {
    let reduce = cfg.reduction.op();
    let stages = &out.enhanced[..out.stages];
    let lap_t = g.laplacian(target);
    let mut char = Vec::new();
    let mut edge = Vec::new();
    let mut terms = Vec::new();
    for &e in stages {
        if g.shape(e) != g.shape(target) {
            return Err(param_err!("enhanced {:?} vs target {:?}", g.shape(e), g.shape(target)));
        }
        let c = g.charbonnier(e, target, cfg.epsilon, reduce);
        let lap_e = g.laplacian(e);
        let d = g.charbonnier(lap_e, lap_t, cfg.epsilon, reduce);
        char.push(c);
        edge.push(d);
        terms.push(c);
        terms.push(d);
    }
    let mut seg = Vec::new();
    if let Some(m) = masks {
        if !out.seg_native.is_empty() {
            if m.len() != out.seg_native.len() {
                return Err(param_err!("{} masks for {} seg scales", m.len(), out.seg_native.len()));
            }
            for (&p, &t) in out.seg_native.iter().zip(m) {
                if g.shape(p) != g.shape(t) {
                    return Err(param_err!("seg map {:?} vs mask {:?}", g.shape(p), g.shape(t)));
                }
                seg.push(g.squared_error(p, t, reduce));
            }
            let seg_sum = g.sum(&seg);
            terms.push(g.scale(seg_sum, cfg.lambda));
        }
    }
    let total = g.sum(&terms);
    Ok(SupervisedVars {
        char,
        edge,
        seg,
        total,
    })
}

/// Segmentation-only objective `sum_v seg_v` used to pretrain the segmenter.
pub fn seg_graph<T: Real>(
    g: &mut Graph<T>,
    seg_native: &[Var],
    masks: &[Var],
    reduction: Reduction,
) -> Result<(Vec<Var>, Var)> {
    if seg_native.len() != masks.len() {
        return Err(param_err!("{} masks for {} seg scales", masks.len(), seg_native.len()));
    }
    let seg: Vec<Var> = seg_native
        .iter()
        .zip(masks)
        .map(|(&p, &t)| g.squared_error(p, t, reduction.op()))
        .collect();
    let total = g.sum(&seg);
    Ok((seg, total))
}

#[derive(Clone, Debug)]
pub struct ConsistencyVars {
    pub cons_enh: Vec<Var>,
    pub cons_seg: Vec<Var>,
    pub total: Var,
}

impl ConsistencyVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let val = |v: &Var| g.value(*v).item().as_f64();
        let mut b = LossBreakdown::default();
        for (i, v) in self.cons_enh.iter().enumerate() {
            b.cons_enh[i] = val(v);
        }
        for (i, v) in self.cons_seg.iter().enumerate() {
            b.cons_seg[i] = val(v);
        }
        b.consistency_total = b.cons_enh.iter().chain(&b.cons_seg).sum();
        b
    }
}

/// Differentiable consistency between a student forward and fixed teacher
/// outputs.
pub fn consistency_graph<T: Real>(
    g: &mut Graph<T>,
    student: &ForwardVars,
    teacher: &ModelOutput<T>,
    reduction: Reduction,
) -> Result<ConsistencyVars> {
    if student.seg_maps.len() != teacher.seg_maps.len() {
        return Err(contract_err!(
            "student has {} seg maps, teacher {}",
            student.seg_maps.len(),
            teacher.seg_maps.len()
        ));
    }
    let reduce = reduction.op();
    if student.stages != teacher.stages {
        return Err(contract_err!("student has {} stages, teacher {}", student.stages, teacher.stages));
    }
    let mut pairs: Vec<(Var, &Tensor<T>)> = student.enhanced[..student.stages]
        .iter()
        .copied()
        .zip(teacher.enhanced.iter())
        .collect();
    let n_enh = pairs.len();
    pairs.extend(student.seg_maps.iter().copied().zip(teacher.seg_maps.iter()));
    let mut terms = Vec::with_capacity(pairs.len());
    for (s, t) in pairs {
        if g.shape(s) != t.shape() {
            return Err(contract_err!("student {:?} vs teacher {:?}", g.shape(s), t.shape()));
        }
        let tv = g.input(t.clone());
        terms.push(g.abs_error(s, tv, reduce));
    }
    let total = g.sum(&terms);
    let cons_seg = terms.split_off(n_enh);
    Ok(ConsistencyVars {
        cons_enh: terms,
        cons_seg,
        total,
    })
}
