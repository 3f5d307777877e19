//! Mean-teacher training: Adam updates of the student on mixed labeled and
//! unlabeled batches, EMA updates of the teacher, input perturbation, the
//! cosine learning-rate schedule and segmenter pretraining.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::data::SamplePair;
use crate::error::{contract_err, param_err, Error, Result};
use crate::image::FundusImage;
use crate::losses::{
    consistency_graph, rampup_mu, seg_graph, supervised_graph, total_loss, LossBreakdown,
    LossConfig,
};
use crate::magenet::{
    forward_graph, forward_tensor, image_tensor, rsp_forward, Architecture, WeightSet,
};
use crate::rng::{Stream, StreamState};
use crate::tensor::{Real, Tensor};

const PERTURB_LABEL: u64 = 0x5045_5254;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub ema_alpha: f64,
    /// Use `min(alpha, 1 - 1/(n+1))` at step `n`.
    pub ema_ramp: bool,
    /// Blend the teacher with the student weights from before the Adam
    /// update instead of after it.
    pub ema_before_update: bool,
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: u64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub perturb_noise_std: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub checkpoint_every: u64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            ema_alpha: 0.999,
            ema_ramp: false,
            ema_before_update: false,
            lr_init: 2e-5,
            lr_final: 1e-7,
            total_steps: 1000,
            labeled_per_batch: 2,
            unlabeled_per_batch: 1,
            perturb_noise_std: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pretrain_steps: 0,
            pretrain_lr: 5e-4,
            checkpoint_every: 100,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(param_err!("ema_alpha must lie in [0, 1], got {}", self.ema_alpha));
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_init && self.lr_init.is_finite()) {
            return Err(param_err!(
                "learning rates must satisfy 0 <= lr_final <= lr_init, got {} and {}",
                self.lr_final,
                self.lr_init
            ));
        }
        if self.labeled_per_batch == 0 {
            return Err(param_err!("labeled_per_batch must be at least 1"));
        }
        if !(self.perturb_noise_std >= 0.0 && self.perturb_noise_std.is_finite()) {
            return Err(param_err!("perturb_noise_std must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(param_err!("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.pretrain_lr >= 0.0) {
            return Err(param_err!("adam_eps must be positive and pretrain_lr non-negative"));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_init` at step 0 to `lr_final` at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainerConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(param_err!("step {step} exceeds total_steps {}", cfg.total_steps));
    }
    if cfg.total_steps == 0 {
        return Ok(cfg.lr_init);
    }
    let t = step as f64 / cfg.total_steps as f64;
    let c = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t));
    Ok(cfg.lr_final + c * (cfg.lr_init - cfg.lr_final))
}

/// `alpha * teacher + (1 - alpha) * student`, tensor by tensor.
pub fn ema_update<T: Real>(
    teacher: &WeightSet<T>,
    student: &WeightSet<T>,
    alpha: f64,
) -> Result<WeightSet<T>> {
    if let Some(d) = teacher.fingerprint().diff(&student.fingerprint()) {
        return Err(contract_err!("teacher and student differ: {d}"));
    }
    let mut out = teacher.clone();
    for (t, s) in out.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = T::from_f64(alpha * a.as_f64() + (1.0 - alpha) * b.as_f64());
        }
    }
    Ok(out)
}

/// Adds independent `N(0, noise_std^2)` noise to every value and clips to
/// `[0, 1]`. Draws follow the interleaved pixel order.
pub fn perturb(img: &FundusImage, noise_std: f64, rng: &mut Stream) -> FundusImage {
    if noise_std == 0.0 {
        return img.clone();
    }
    let values: Vec<f64> = img
        .pixels()
        .iter()
        .map(|&v| f64::from(v) + noise_std * rng.normal())
        .collect();
    img.replaced(&values)
}

/// Adam moments for every tensor of a [`WeightSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: WeightSet<f32>,
    pub v: WeightSet<f32>,
}

impl Adam {
    pub fn new(like: &WeightSet<f32>) -> Self {
        let mut m = like.clone();
        m.tensors_mut().iter_mut().for_each(|t| t.fill(0.0));
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected Adam step on the tensors selected by `active`
    /// (all when `None`). Missing gradients count as zero.
    pub fn step(
        &mut self,
        weights: &mut WeightSet<f32>,
        grads: &[Option<Tensor<f32>>],
        lr: f64,
        cfg: &TrainerConfig,
        active: Option<&[usize]>,
    ) -> Result<()> {
        if let Some(d) = self.m.fingerprint().diff(&weights.fingerprint()) {
            return Err(contract_err!("optimizer state does not match the weights: {d}"));
        }
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - libm::pow(b1, self.t as f64);
        let c2 = 1.0 - libm::pow(b2, self.t as f64);
        let all: Vec<usize>;
        let indices = match active {
            Some(a) => a,
            None => {
                all = (0..weights.len()).collect();
                &all
            }
        };
        for &i in indices {
            let g = grads.get(i).and_then(Option::as_ref);
            let w = weights.tensors_mut()[i].data_mut();
            let m = self.m.tensors_mut()[i].data_mut();
            let v = self.v.tensors_mut()[i].data_mut();
            for j in 0..w.len() {
                let gj = g.map_or(0.0, |g| f64::from(g.data()[j]));
                let mj = b1 * f64::from(m[j]) + (1.0 - b1) * gj;
                let vj = b2 * f64::from(v[j]) + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / (libm::sqrt(vj / c2) + cfg.adam_eps);
                w[j] = (f64::from(w[j]) - update) as f32;
            }
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub pretrain_step: u64,
    pub student: WeightSet<f32>,
    pub teacher: WeightSet<f32>,
    pub adam: Adam,
    pub pretrain_adam: Adam,
    pub rng: StreamState,
}

impl TrainState {
    /// Teacher starts as a copy of the student.
    pub fn new(student: WeightSet<f32>, seed: u64) -> Self {
        Self {
            step: 0,
            pretrain_step: 0,
            teacher: student.clone(),
            adam: Adam::new(&student),
            pretrain_adam: Adam::new(&student),
            student,
            rng: Stream::derived(seed, &[PERTURB_LABEL]).state(),
        }
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        arch.check_weights(&self.student)?;
        if let Some(d) = self.student.fingerprint().diff(&self.teacher.fingerprint()) {
            return Err(contract_err!("teacher and student differ: {d}"));
        }
        Ok(())
    }
}

fn add_grads(acc: &mut [Option<Tensor<f32>>], params: &[Var], mut grads: Gradients<f32>) {
    for (slot, &p) in acc.iter_mut().zip(params) {
        if let Some(t) = grads.take(p) {
            match slot {
                Some(a) => a.add_assign(&t),
                None => *slot = Some(t),
            }
        }
    }
}

fn non_finite(step: u64, b: &LossBreakdown) -> Error {
    Error::NonFinite {
        step,
        detail: format!("{b:?}"),
    }
}

/// One training step. The batch total is
/// `sum_labeled L_mage + mu * sum_unlabeled L_cons`.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainerConfig,
    arch: &Architecture,
    labeled: &[SamplePair],
    unlabeled: &[FundusImage],
) -> Result<LossBreakdown> {
    if labeled.is_empty() {
        return Err(contract_err!("a training step needs at least one labeled pair"));
    }
    state.validate(arch)?;
    let lr = lr_schedule(state.step, cfg)?;
    let mu = rampup_mu(state.step, cfg.loss.rampup_steps, cfg.loss.mu_max);
    let mut grads: Vec<Option<Tensor<f32>>> = (0..state.student.len()).map(|_| None).collect();

    let mut sup = LossBreakdown::default();
    for pair in labeled {
        let mut g = Graph::new();
        let p = arch.bind(&mut g, &state.student, true)?;
        let x = g.input(image_tensor(&pair.low));
        let out = forward_graph(&mut g, arch, &p, x)?;
        let target = g.input(image_tensor(&pair.high));
        let masks: Option<Vec<Var>> = pair
            .masks
            .as_ref()
            .map(|m| m.iter().map(|t| g.input(t.clone())).collect());
        let vars = supervised_graph(&mut g, &out, target, masks.as_deref(), &cfg.loss)?;
        sup.accumulate(&vars.breakdown(&g, cfg.loss.lambda));
        let gr = g.backward(vars.total);
        add_grads(&mut grads, &p, gr);
    }

    let mut cons = LossBreakdown::default();
    let mut rng = Stream::from_state(state.rng);
    for img in unlabeled {
        let student_in = perturb(img, cfg.perturb_noise_std, &mut rng);
        let teacher_in = perturb(img, cfg.perturb_noise_std, &mut rng);
        let teacher_out = forward_tensor(&image_tensor(&teacher_in), &state.teacher, arch)?;
        let mut g = Graph::new();
        let p = arch.bind(&mut g, &state.student, true)?;
        let x = g.input(image_tensor(&student_in));
        let out = forward_graph(&mut g, arch, &p, x)?;
        let vars = consistency_graph(&mut g, &out, &teacher_out, cfg.loss.reduction)?;
        cons.accumulate(&vars.breakdown(&g));
        let scaled = g.scale(vars.total, mu);
        let gr = g.backward(scaled);
        add_grads(&mut grads, &p, gr);
    }

    let breakdown = total_loss(&sup, &cons, mu);
    if !breakdown.all_finite() || grads.iter().flatten().any(|t| !t.all_finite()) {
        return Err(non_finite(state.step, &breakdown));
    }

    let alpha = if cfg.ema_ramp {
        cfg.ema_alpha.min(1.0 - 1.0 / (state.step as f64 + 2.0))
    } else {
        cfg.ema_alpha
    };
    if cfg.ema_before_update {
        state.teacher = ema_update(&state.teacher, &state.student, alpha)?;
        state.adam.step(&mut state.student, &grads, lr, cfg, None)?;
    } else {
        state.adam.step(&mut state.student, &grads, lr, cfg, None)?;
        state.teacher = ema_update(&state.teacher, &state.student, alpha)?;
    }
    state.rng = rng.state();
    state.step += 1;
    Ok(breakdown)
}

/// One segmenter pretraining step on clean images with masks. Only `rsp.*`
/// tensors change; the teacher is synced by [`finish_pretrain`].
pub fn pretrain_rsp_step(
    state: &mut TrainState,
    cfg: &TrainerConfig,
    arch: &Architecture,
    labeled: &[SamplePair],
) -> Result<LossBreakdown> {
    let rsp = arch
        .rsp
        .as_ref()
        .ok_or_else(|| Error::Config("the model has no RSP module to pretrain".into()))?;
    if labeled.is_empty() {
        return Err(contract_err!("a pretraining step needs at least one labeled pair"));
    }
    let active = arch.rsp_param_indices();
    let mut grads: Vec<Option<Tensor<f32>>> = (0..state.student.len()).map(|_| None).collect();
    let mut b = LossBreakdown::default();
    for pair in labeled {
        let masks = pair
            .masks
            .as_ref()
            .ok_or_else(|| Error::Config("RSP pretraining needs masks on every labeled record".into()))?;
        let mut g = Graph::new();
        let p = arch.bind(&mut g, &state.student, true)?;
        let x = g.input(image_tensor(&pair.high));
        let out = rsp_forward(&mut g, &p, rsp, x)?;
        let mvars: Vec<Var> = masks.iter().map(|t| g.input(t.clone())).collect();
        let (seg, total) = seg_graph(&mut g, &out.seg_native, &mvars, cfg.loss.reduction)?;
        for (v, s) in seg.iter().enumerate() {
            b.seg[v] += g.value(*s).item().as_f64();
        }
        let gr = g.backward(total);
        add_grads(&mut grads, &p, gr);
    }
    b.supervised_total = b.seg.iter().sum();
    b.total = b.supervised_total;
    if !b.all_finite() {
        return Err(non_finite(state.pretrain_step, &b));
    }
    state
        .pretrain_adam
        .step(&mut state.student, &grads, cfg.pretrain_lr, cfg, Some(&active))?;
    state.pretrain_step += 1;
    Ok(b)
}

/// Copies the student into the teacher after pretraining.
pub fn finish_pretrain(state: &mut TrainState) {
    state.teacher = state.student.clone();
}

/// Runs `steps` pretraining steps, cycling through `labeled` in order
/// `batch` pairs at a time, then syncs the teacher.
pub fn pretrain_rsp(
    state: &mut TrainState,
    cfg: &TrainerConfig,
    arch: &Architecture,
    labeled: &[SamplePair],
    steps: u64,
    batch: usize,
) -> Result<Vec<LossBreakdown>> {
    if labeled.iter().any(|p| p.masks.is_none()) || labeled.is_empty() {
        return Err(Error::Config("RSP pretraining needs labeled records with masks".into()));
    }
    let batch = batch.clamp(1, labeled.len());
    let mut log = Vec::with_capacity(steps as usize);
    for s in 0..steps {
        let start = (s as usize * batch) % labeled.len();
        let chunk: Vec<SamplePair> = (0..batch)
            .map(|j| labeled[(start + j) % labeled.len()].clone())
            .collect();
        log.push(pretrain_rsp_step(state, cfg, arch, &chunk)?);
    }
    finish_pretrain(state);
    Ok(log)
}
