mod common;

use common::rel_err;
use tmage_core::data::{build_pair, SamplePair};
use tmage_core::degrade::SamplerConfig;
use tmage_core::losses::{consistency_loss, rampup_mu, supervised_loss, LossConfig};
use tmage_core::magenet::*;
use tmage_core::meanteacher::*;
use tmage_core::rng::Stream;
use tmage_core::synthetic::{disk_task, synthetic_fundus};
use tmage_core::tensor::Tensor;
use tmage_core::{Error, FundusImage};

fn scalar_set(v: f64) -> WeightSet<f64> {
    WeightSet::new(vec!["w".into()], vec![Tensor::from_vec(&[1], vec![v])]).unwrap()
}

#[test]
fn ema_edge_cases() {
    let mut s = Stream::new(1);
    let w = init_model(&ModelConfig::toy(), &mut s).unwrap();
    let v = init_model(&ModelConfig::toy(), &mut s).unwrap();
    assert_eq!(ema_update(&w, &v, 1.0).unwrap(), w);
    assert_eq!(ema_update(&w, &v, 0.0).unwrap(), v);

    let other = WeightSet::new(vec!["x".into()], vec![Tensor::from_vec(&[1], vec![0.0f32])]).unwrap();
    assert!(matches!(ema_update(&w, &other, 0.5), Err(Error::Contract(_))));
}

#[test]
fn ema_matches_closed_form() {
    let student = scalar_set(1.0);
    let mut teacher = scalar_set(0.0);
    teacher = ema_update(&teacher, &student, 0.99).unwrap();
    assert!((teacher.tensors()[0].data()[0] - 0.01).abs() < 1e-15);
    for n in 2..=200 {
        teacher = ema_update(&teacher, &student, 0.99).unwrap();
        let closed = 1.0 - 0.99f64.powi(n);
        assert!((teacher.tensors()[0].data()[0] - closed).abs() < 1e-12, "n = {n}");
    }
}

#[test]
fn perturb_properties() {
    let img = FundusImage::constant(100, 100, 0.5).unwrap();
    assert_eq!(perturb(&img, 0.0, &mut Stream::new(1)), img);

    let big = FundusImage::constant(578, 578, 0.5).unwrap();
    assert!(big.pixels().len() >= 1_000_000);
    let std = 0.05;
    let noisy = perturb(&big, std, &mut Stream::new(2));
    let mad = noisy.pixels().iter().map(|&v| (f64::from(v) - 0.5).abs()).sum::<f64>() / noisy.pixels().len() as f64;
    let expect = std * (2.0 / std::f64::consts::PI).sqrt();
    assert!(rel_err(mad, expect) < 0.01, "{mad} vs {expect}");
    assert!(noisy.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));

    let a = perturb(&img, std, &mut Stream::new(3));
    let b = perturb(&img, std, &mut Stream::new(4));
    assert_ne!(a, b);
    assert_eq!(a, perturb(&img, std, &mut Stream::new(3)));
}

#[test]
fn lr_schedule_endpoints() {
    let cfg = TrainerConfig {
        total_steps: 1000,
        ..TrainerConfig::default()
    };
    assert_eq!(lr_schedule(0, &cfg).unwrap(), 2e-5);
    assert_eq!(lr_schedule(1000, &cfg).unwrap(), 1e-7);
    let mid = lr_schedule(500, &cfg).unwrap();
    assert!((mid - (2e-5 + 1e-7) / 2.0).abs() < 1e-18);
    assert!(matches!(lr_schedule(1001, &cfg), Err(Error::Param(_))));
    let mut prev = f64::INFINITY;
    for s in 0..=1000 {
        let lr = lr_schedule(s, &cfg).unwrap();
        assert!(lr <= prev);
        prev = lr;
    }
}

fn setup(side: usize, n_labeled: usize, seed: u64) -> (Architecture, TrainState, Vec<SamplePair>, Vec<FundusImage>) {
    let cfg = ModelConfig::toy();
    let arch = Architecture::new(&cfg).unwrap();
    let w = init_model(&cfg, &mut Stream::new(seed)).unwrap();
    let state = TrainState::new(w, seed);
    let sampler = SamplerConfig::default();
    let labeled = (0..n_labeled)
        .map(|i| {
            let (high, mask) = synthetic_fundus(side, side, seed * 100 + i as u64).unwrap();
            build_pair(&high, Some(&[mask]), seed + i as u64, &sampler).unwrap()
        })
        .collect();
    let unlabeled = vec![synthetic_fundus(side, side, seed * 100 + 99).unwrap().0];
    (arch, state, labeled, unlabeled)
}

fn cfg(total: u64) -> TrainerConfig {
    TrainerConfig {
        total_steps: total,
        lr_init: 1e-3,
        lr_final: 1e-5,
        ema_alpha: 0.9,
        ..TrainerConfig::default()
    }
}

#[test]
fn supervised_only_batches_still_update_teacher() {
    let (arch, mut state, labeled, _) = setup(16, 2, 1);
    let before = state.teacher.content_hash();
    let b = train_step(&mut state, &cfg(10), &arch, &labeled, &[]).unwrap();
    assert_eq!(b.total, b.supervised_total);
    assert_eq!(b.consistency_total, 0.0);
    assert_ne!(state.teacher.content_hash(), before);
    assert_eq!(state.step, 1);
}

#[test]
fn identical_paths_give_zero_consistency() {
    let (arch, mut state, labeled, unlabeled) = setup(16, 1, 2);
    let c = TrainerConfig {
        perturb_noise_std: 0.0,
        ..cfg(10)
    };
    let b = train_step(&mut state, &c, &arch, &labeled, &unlabeled).unwrap();
    assert_eq!(b.consistency_total, 0.0);
    assert!(b.cons_enh.iter().chain(&b.cons_seg).all(|&v| v == 0.0));
}

/// Recomputes the batch objective from the pre-step state with the plain
/// (graph-free) loss functions.
#[test]
fn reported_loss_matches_replay() {
    let (arch, mut state, labeled, unlabeled) = setup(16, 2, 3);
    let c = TrainerConfig {
        loss: LossConfig {
            rampup_steps: 4,
            ..LossConfig::default()
        },
        ..cfg(10)
    };
    for _ in 0..3 {
        let snapshot = state.clone();
        let b = train_step(&mut state, &c, &arch, &labeled, &unlabeled).unwrap();

        let mut sup = 0.0;
        for p in &labeled {
            let out = forward_tensor(&image_tensor::<f32>(&p.low), &snapshot.student, &arch).unwrap();
            sup += supervised_loss(&out, &image_tensor::<f32>(&p.high), p.masks.as_deref(), &c.loss)
                .unwrap()
                .supervised_total;
        }
        let mut rng = Stream::from_state(snapshot.rng);
        let mut cons = 0.0;
        for img in &unlabeled {
            let s_in = perturb(img, c.perturb_noise_std, &mut rng);
            let t_in = perturb(img, c.perturb_noise_std, &mut rng);
            let so = forward_tensor(&image_tensor::<f32>(&s_in), &snapshot.student, &arch).unwrap();
            let to = forward_tensor(&image_tensor::<f32>(&t_in), &snapshot.teacher, &arch).unwrap();
            cons += consistency_loss(&so, &to, c.loss.reduction).unwrap().consistency_total;
        }
        let mu = rampup_mu(snapshot.step, c.loss.rampup_steps, c.loss.mu_max);
        assert!(rel_err(b.supervised_total, sup) < 1e-6);
        assert!(rel_err(b.consistency_total, cons) < 1e-6);
        assert!(rel_err(b.total, sup + mu * cons) < 1e-6);
        assert_eq!(b.mu, mu);
    }
}

#[test]
fn teacher_is_only_written_by_ema() {
    for seed in 0..3 {
        let (arch, mut state, labeled, unlabeled) = setup(16, 1, 10 + seed);
        let c = TrainerConfig {
            ema_alpha: 1.0,
            ..cfg(10)
        };
        let before = state.teacher.content_hash();
        let student_before = state.student.content_hash();
        for _ in 0..2 {
            train_step(&mut state, &c, &arch, &labeled, &unlabeled).unwrap();
        }
        assert_eq!(state.teacher.content_hash(), before);
        assert_ne!(state.student.content_hash(), student_before);
    }
}

#[test]
fn ema_ordering_flag_changes_teacher() {
    let (arch, state, labeled, _) = setup(16, 1, 4);
    let mut after = state.clone();
    let mut before = state.clone();
    train_step(&mut after, &cfg(10), &arch, &labeled, &[]).unwrap();
    let c = TrainerConfig {
        ema_before_update: true,
        ..cfg(10)
    };
    train_step(&mut before, &c, &arch, &labeled, &[]).unwrap();
    assert_eq!(after.student, before.student);
    assert_eq!(before.teacher, state.teacher);
    assert_ne!(after.teacher, before.teacher);
}

#[test]
fn train_step_is_deterministic() {
    let (arch, state, labeled, unlabeled) = setup(16, 2, 5);
    let mut a = state.clone();
    let mut b = state;
    for _ in 0..2 {
        let la = train_step(&mut a, &cfg(10), &arch, &labeled, &unlabeled).unwrap();
        let lb = train_step(&mut b, &cfg(10), &arch, &labeled, &unlabeled).unwrap();
        assert_eq!(la, lb);
    }
    assert_eq!(a, b);
}

#[test]
fn train_step_errors() {
    let (arch, mut state, labeled, unlabeled) = setup(16, 1, 6);
    assert!(matches!(
        train_step(&mut state, &cfg(10), &arch, &[], &unlabeled),
        Err(Error::Contract(_))
    ));
    state.student.tensors_mut()[0].data_mut()[0] = f32::NAN;
    assert!(matches!(
        train_step(&mut state, &cfg(10), &arch, &labeled, &unlabeled),
        Err(Error::NonFinite { step: 0, .. })
    ));
}

#[test]
fn pretrain_zero_steps_is_a_no_op() {
    let (arch, mut state, labeled, _) = setup(16, 2, 7);
    let before = state.clone();
    let log = pretrain_rsp(&mut state, &cfg(10), &arch, &labeled, 0, 2).unwrap();
    assert!(log.is_empty());
    assert_eq!(state, before);
}

#[test]
fn pretrain_requires_masks() {
    let (arch, mut state, mut labeled, _) = setup(16, 2, 8);
    labeled[1].masks = None;
    assert!(matches!(
        pretrain_rsp(&mut state, &cfg(10), &arch, &labeled, 1, 2),
        Err(Error::Config(_))
    ));
}

fn disk_pairs(n: usize, side: usize, seed: u64) -> Vec<SamplePair> {
    (0..n)
        .map(|i| {
            let (img, mask) = disk_task(side, side, seed + i as u64).unwrap();
            SamplePair {
                low: img.clone(),
                high: img,
                masks: Some(tmage_core::data::mask_pyramid(&mask).unwrap()),
                record: None,
            }
        })
        .collect()
}

#[test]
fn pretrain_learns_disks_and_freezes_the_rest() {
    let cfg_m = ModelConfig::toy();
    let arch = Architecture::new(&cfg_m).unwrap();
    let w = init_model(&cfg_m, &mut Stream::new(9)).unwrap();
    let mut state = TrainState::new(w, 9);
    let rsp = arch.rsp_param_indices();
    let frozen = |s: &WeightSet<f32>| -> Vec<Tensor<f32>> {
        (0..s.len()).filter(|i| !rsp.contains(i)).map(|i| s.tensors()[i].clone()).collect()
    };
    let before = frozen(&state.student);
    let rsp_before = state.student.content_hash();

    let train = disk_pairs(16, 32, 1000);
    let held_out = disk_pairs(8, 32, 5000);
    pretrain_rsp(&mut state, &cfg(10), &arch, &train, 300, 2).unwrap();

    assert_eq!(frozen(&state.student), before);
    assert_ne!(state.student.content_hash(), rsp_before);
    assert_eq!(state.teacher, state.student);
    assert_eq!(state.pretrain_step, 300);
    assert_eq!(state.step, 0);

    let (mut hits, mut total) = (0usize, 0usize);
    for p in &held_out {
        let out = forward(&p.high, &state.student, &cfg_m).unwrap();
        let mask = &p.masks.as_ref().unwrap()[0];
        for (pred, truth) in out.seg_native[0].data().iter().zip(mask.data()) {
            hits += usize::from((*pred > 0.5) == (*truth > 0.5));
            total += 1;
        }
    }
    let acc = hits as f64 / total as f64;
    assert!(acc > 0.9, "held-out accuracy {acc}");
}
