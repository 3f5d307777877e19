//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. An optional `AC<n>` argument runs a
//! single criterion.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use tempfile::tempdir;
use tmage::config::RunConfig;
use tmage::fit::{fit, read_log, Dataset, FitOptions, LOG_FILE};
use tmage_core::autodiff::{Graph, Reduce, Var};
use tmage_core::data::{build_pair, SamplePair};
use tmage_core::degrade::{
    apply_blur, apply_light_disturbance, artifact_amplitude, artifact_sigma, degrade, sample_degradation,
    ArtifactParams, BlurParams, DegradationRecord, LightMode, LightParams, SamplerConfig,
};
use tmage_core::losses::{
    consistency_graph, consistency_loss, edge_loss, rampup_mu, seg_graph, supervised_graph, supervised_loss,
    total_loss, LossConfig, Reduction,
};
use tmage_core::magenet::{
    forward_graph, forward_tensor, image_tensor, init_model, Architecture, ForwardVars, ModelConfig, ModelOutput,
    WeightSet, RSP_SCALES,
};
use tmage_core::meanteacher::{ema_update, train_step, TrainState, TrainerConfig};
use tmage_core::metrics::{psnr, ssim};
use tmage_core::rng::{derive_seed, Stream};
use tmage_core::synthetic::{synthetic_fundus, toy_labeled};
use tmage_core::tensor::Tensor;
use tmage_core::FundusImage;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, s: &mut Stream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| s.uniform(lo, hi)).collect())
}

fn random_image(h: usize, w: usize, seed: u64) -> FundusImage {
    let mut s = Stream::new(seed);
    FundusImage::from_fn(h, w, |_, _, _| s.uniform(0.15, 0.85) as f32).unwrap()
}

// ---------------------------------------------------------------- AC1

fn reflect(i: isize, n: isize) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn kernel_oracle(radius: isize, sigma: f64) -> Vec<Vec<f64>> {
    let mut k = vec![vec![0.0; (2 * radius + 1) as usize]; (2 * radius + 1) as usize];
    let mut total = 0.0;
    for di in -radius..=radius {
        for dj in -radius..=radius {
            let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            k[(di + radius) as usize][(dj + radius) as usize] = v;
            total += v;
        }
    }
    k.iter().map(|r| r.iter().map(|v| v / total).collect()).collect()
}

/// Direct 2-D summation over one plane with reflected borders.
fn conv_oracle(plane: &[f64], h: usize, w: usize, k: &[Vec<f64>]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let v = plane[reflect(y + di, h as isize) * w + reflect(x + dj, w as isize)];
                    acc += k[(di + r) as usize][(dj + r) as usize] * v;
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

fn channel(img: &FundusImage, ch: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(img.height() * img.width());
    for r in 0..img.height() {
        for c in 0..img.width() {
            v.push(f64::from(img.get(r, c, ch)));
        }
    }
    v
}

fn ac1() -> Outcome {
    let clock = Instant::now();
    let img = random_image(32, 32, 1);
    let neutral = ok(DegradationRecord::new(
        0,
        [32, 32],
        Some(LightParams::neutral(32, 32)),
        Some(BlurParams {
            r_b: 1.0,
            sigma_b: 1e-4,
            noise_std: 0.0,
        }),
        Some(ArtifactParams::default()),
    ))?;
    ensure!(ok(degrade(&img, &neutral))? == img, "neutral pipeline changed the image");

    for r in [0.5f64, 1.0, 3.3, 12.0, 25.0, 48.0] {
        ensure!((artifact_sigma(r) - (5.0 + 0.8 * r)).abs() < 1e-9, "sigma_k({r})");
        let o = 1.0 - (-(0.5 + 0.04 * r) * (0.012 * r)).exp();
        ensure!((artifact_amplitude(r) - o).abs() < 1e-9, "o_k({r})");
    }
    ensure!(artifact_sigma(25.0) == 25.0, "sigma_k(25) = {}", artifact_sigma(25.0));
    ensure!((artifact_amplitude(25.0) - 0.36237).abs() < 5e-6, "o_k(25) = {}", artifact_amplitude(25.0));

    let mut worst: f64 = 0.0;
    for (seed, r, sigma) in [(2u64, 2usize, 1.0f64), (3, 2, 0.7), (4, 1, 1.0)] {
        let img = random_image(16, 16, seed);
        let p = BlurParams {
            r_b: r as f64,
            sigma_b: sigma,
            noise_std: 0.0,
        };
        let out = ok(apply_blur(&img, &p, &mut Stream::new(0)))?;
        let k = kernel_oracle(r as isize, sigma);
        for ch in 0..3 {
            let o = conv_oracle(&channel(&img, ch), 16, 16, &k);
            for (a, b) in channel(&out, ch).iter().zip(&o) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let img = random_image(16, 16, 5);
    let p = LightParams {
        n_l: 0.2,
        r_l: 2.0,
        sigma_l: 0.9,
        center: [7.0, 8.0],
        ..LightParams::neutral(16, 16)
    };
    let out = ok(apply_light_disturbance(&img, &p))?;
    let mut bias = vec![0.0; 256];
    for i in 0..16 {
        for j in 0..16 {
            if (i as f64 - 7.0).powi(2) + (j as f64 - 8.0).powi(2) < 4.0 {
                bias[i * 16 + j] = 0.2;
            }
        }
    }
    let smooth = conv_oracle(&bias, 16, 16, &kernel_oracle(2, 0.9));
    for ch in 0..3 {
        for (i, (a, x)) in channel(&out, ch).iter().zip(channel(&img, ch)).enumerate() {
            worst = worst.max((a - (x + smooth[i]).clamp(0.0, 1.0)).abs());
        }
    }
    ensure!(worst < 1e-6, "convolution differs from direct summation by {worst:e}");

    let cfg = SamplerConfig {
        p_light: 1.0,
        p_blur: 1.0,
        p_artifacts: 1.0,
        ..SamplerConfig::default()
    };
    let inside = |v: f64, [lo, hi]: [f64; 2]| v >= lo && v <= hi;
    let w = 64.0;
    for seed in 0..10_000u64 {
        let rec = ok(sample_degradation(seed, &cfg, 64, 64, None))?;
        let l = rec.light.as_ref().unwrap();
        let rl = match l.mode {
            LightMode::Leak => [0.75, 1.0],
            LightMode::UnevenExposure => [0.3, 0.5],
        };
        let ok_light = inside(l.alpha, [-0.5, 0.5])
            && inside(l.beta, [-0.5, 0.5])
            && inside(l.saturation, [-0.5, 0.5])
            && inside(l.n_l, cfg.n_l)
            && inside(l.center[0] / w, [0.375, 0.625])
            && inside(l.center[1] / w, [0.375, 0.625])
            && inside(l.r_l / w, rl)
            && inside(l.sigma_l / l.r_l, [0.55 - 1e-12, 0.75 + 1e-12]);
        ensure!(ok_light, "seed {seed}: light parameters out of range: {l:?}");
        let b = rec.blur.as_ref().unwrap();
        ensure!(
            inside(b.r_b / w, [0.01, 0.015]) && (b.sigma_b - 0.03 * w).abs() < 1e-12,
            "seed {seed}: blur out of range: {b:?}"
        );
        let objs = &rec.artifacts.as_ref().unwrap().objects;
        ensure!((10..=30).contains(&objs.len()), "seed {seed}: K = {}", objs.len());
        for o in objs {
            ensure!(inside(o.radius / w, [0.025, 0.05]), "seed {seed}: r_k/w = {}", o.radius / w);
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!("max conv error {worst:.1e}, 10^4 draws in range, {secs:.1} s"))
}

// ---------------------------------------------------------------- AC2

fn hash_dir(dir: &Path) -> u64 {
    let mut files: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let mut h = DefaultHasher::new();
    for f in files.iter().filter(|p| p.is_file()) {
        f.file_name().hash(&mut h);
        fs::read(f).unwrap().hash(&mut h);
    }
    h.finish()
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tmage"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "tmage {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn toy_run_config(total: u64, pretrain: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::toy();
    cfg.trainer.total_steps = total;
    cfg.trainer.pretrain_steps = pretrain;
    cfg.trainer.checkpoint_every = 1;
    cfg.trainer.labeled_per_batch = 2;
    cfg.trainer.unlabeled_per_batch = 1;
    cfg.trainer.lr_init = 1e-3;
    cfg.trainer.lr_final = 1e-5;
    cfg.trainer.seed = 17;
    cfg
}

fn ac2() -> Outcome {
    let t = tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| t.path().join(s).to_string_lossy().into_owned();
    run_cli(&["synth", "--out", &p("syn"), "--count", "24", "--unlabeled", "0", "--side", "64"])?;
    run_cli(&["degrade", "--in", &p("syn/clean"), "--out", &p("a"), "--seed", "3", "--workers", "1"])?;
    run_cli(&["degrade", "--in", &p("syn/clean"), "--out", &p("b"), "--seed", "3"])?;
    let (ha, hb) = (hash_dir(&t.path().join("a")), hash_dir(&t.path().join("b")));
    ensure!(ha == hb, "degrade outputs differ: {ha:016x} vs {hb:016x}");
    let n = fs::read_dir(t.path().join("a")).unwrap().count();
    ensure!(n >= 2 * 20, "only {n} files written");

    let cfg = toy_run_config(6, 2);
    let data = Dataset {
        labeled: ok(toy_labeled(4, 32, 5))?,
        unlabeled: vec![ok(synthetic_fundus(32, 32, 99))?.0],
    };
    let full = t.path().join("full");
    let part = t.path().join("part");
    ok(fit(&cfg, &data, &FitOptions { out_dir: full.clone(), ..FitOptions::default() }))?;
    ok(fit(
        &cfg,
        &data,
        &FitOptions {
            out_dir: part.clone(),
            stop_at: Some(3),
            ..FitOptions::default()
        },
    ))?;
    let resumed = ok(fit(
        &cfg,
        &data,
        &FitOptions {
            out_dir: part.clone(),
            resume: Some(part.join("checkpoints/step-00000003")),
            ..FitOptions::default()
        },
    ))?;
    let lf = ok(read_log(&full.join(LOG_FILE)))?;
    let lp = ok(read_log(&part.join(LOG_FILE)))?;
    ensure!(lf.len() == 8 && lp.len() == lf.len(), "log lengths {} vs {}", lf.len(), lp.len());
    for (a, b) in lf.iter().zip(&lp) {
        ensure!(a.same_values(b), "log differs at {:?} step {}", a.phase, a.step);
    }
    let (_, saved) = ok(tmage::checkpoint::load_checkpoint(&full.join("checkpoints/step-00000006")))?;
    ensure!(saved == cfg, "stored configuration differs");
    let (final_full, _) = ok(tmage::checkpoint::load_checkpoint(&full.join("checkpoints/step-00000006")))?;
    ensure!(
        final_full.student == resumed.state.student && final_full.teacher == resumed.state.teacher,
        "resumed weights differ"
    );
    Ok(format!("{} files hash {ha:016x}; {} log lines identical after resume", n, lf.len()))
}

// ---------------------------------------------------------------- AC3

fn charb(a: &[f64], b: &[f64], eps: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y).powi(2) + eps * eps).sqrt()).sum::<f64>() / a.len() as f64
}

fn lap(x: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = x.chw();
    let mut out = vec![0.0; c * h * w];
    let at = |ch: usize, r: isize, col: isize| x.data()[(ch * h + reflect(r, h as isize)) * w + reflect(col, w as isize)];
    for ch in 0..c {
        for r in 0..h as isize {
            for col in 0..w as isize {
                out[(ch * h + r as usize) * w + col as usize] =
                    at(ch, r - 1, col) + at(ch, r + 1, col) + at(ch, r, col - 1) + at(ch, r, col + 1) - 4.0 * at(ch, r, col);
            }
        }
    }
    out
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn pyramid(side: usize, s: &mut Stream) -> Vec<Tensor<f64>> {
    (0..RSP_SCALES).map(|v| rand_tensor(&[1, side >> v, side >> v], 0.0, 1.0, s)).collect()
}

fn upsample_nearest(t: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let (_, sh, sw) = t.chw();
    Tensor::from_vec(
        &[1, h, w],
        (0..h * w).map(|i| t.data()[(i / w) * sh / h * sw + (i % w) * sw / w]).collect(),
    )
}

fn fake_output(s: &mut Stream, side: usize) -> ModelOutput<f64> {
    let seg_native = pyramid(side, s);
    let seg_maps = seg_native.iter().map(|t| upsample_nearest(t, side, side)).collect();
    ModelOutput {
        enhanced: [rand_tensor(&[3, side, side], 0.0, 1.0, s), rand_tensor(&[3, side, side], 0.0, 1.0, s)],
        stages: 2,
        seg_native,
        seg_maps,
        rsp_features: Vec::new(),
        sam_features: Tensor::zeros(&[1, side, side]),
    }
}

fn ac3() -> Outcome {
    let eps = 1e-3;
    let mut s = Stream::new(31);
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let side = [8usize, 16, 32][s.index(3)];
        let target = rand_tensor(&[3, side, side], 0.0, 1.0, &mut s);
        let masks = pyramid(side, &mut s);
        let student = fake_output(&mut s, side);
        let teacher = fake_output(&mut s, side);
        let cfg = LossConfig {
            lambda: s.uniform(0.1, 1.5),
            ..LossConfig::default()
        };
        let sup = ok(supervised_loss(&student, &target, Some(&masks), &cfg))?;
        let cons = ok(consistency_loss(&student, &teacher, Reduction::Mean))?;
        let mut o_sup = 0.0;
        for st in 0..2 {
            let c = charb(student.enhanced[st].data(), target.data(), eps);
            let e = charb(&lap(&student.enhanced[st]), &lap(&target), eps);
            worst = worst.max(rel_err(sup.char[st], c)).max(rel_err(sup.edge[st], e));
            o_sup += c + e;
        }
        for v in 0..RSP_SCALES {
            let m = mean_sq(student.seg_native[v].data(), masks[v].data());
            worst = worst.max(rel_err(sup.seg[v], m));
            o_sup += cfg.lambda * m;
        }
        worst = worst.max(rel_err(sup.supervised_total, o_sup));
        let mut o_cons = 0.0;
        for st in 0..2 {
            o_cons += mean_abs(student.enhanced[st].data(), teacher.enhanced[st].data());
        }
        for v in 0..RSP_SCALES {
            o_cons += mean_abs(student.seg_maps[v].data(), teacher.seg_maps[v].data());
        }
        worst = worst.max(rel_err(cons.consistency_total, o_cons));
        let mu = s.uniform(0.0, 1.0);
        let total = total_loss(&sup, &cons, mu);
        worst = worst.max(rel_err(total.total, o_sup + mu * o_cons));
        let e = ok(edge_loss(&student.enhanced[0], &target, eps))?;
        worst = worst.max(rel_err(e, charb(&lap(&student.enhanced[0]), &lap(&target), eps)));
    }
    ensure!(worst < 1e-6, "worst relative error {worst:e}");

    let mut s = Stream::new(32);
    let target = rand_tensor(&[3, 16, 16], 0.0, 1.0, &mut s);
    let zero = ok(tmage_core::losses::charbonnier(&target, &target, eps))?;
    ensure!(zero == eps, "charbonnier at zero difference = {zero}");
    let mut exact = fake_output(&mut s, 16);
    exact.enhanced = [target.clone(), target.clone()];
    let masks = exact.seg_native.clone();
    let floor = ok(supervised_loss(&exact, &target, Some(&masks), &LossConfig::default()))?;
    ensure!(floor.supervised_total == 0.004, "supervised floor = {}", floor.supervised_total);
    ensure!(floor.seg.iter().all(|&v| v == 0.0), "seg term not zero");
    Ok(format!("worst relative error {worst:.1e}; floors exact"))
}

// ---------------------------------------------------------------- AC4

fn fd_check(x: &Tensor<f64>, entries: &[usize], f: &dyn Fn(&Tensor<f64>) -> f64, analytic: &Tensor<f64>, h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in entries {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let numeric = (f(&p) - f(&m)) / (2.0 * h);
        let a = analytic.data()[i];
        let e = if (a - numeric).abs() < 1e-9 { 0.0 } else { rel_err(a, numeric) };
        worst = worst.max(e);
    }
    worst
}

fn loss_grad_check(x: &Tensor<f64>, build: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let p = g.param(x.clone());
    let l = build(&mut g, p);
    let analytic = g.backward(l).get(p).unwrap().clone();
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = g.param(t.clone());
        let l = build(&mut g, p);
        g.value(l).item()
    };
    let all: Vec<usize> = (0..x.numel()).collect();
    fd_check(x, &all, &eval, &analytic, 1e-6)
}

fn forward_vars_from(g: &mut Graph<f64>, out: &ModelOutput<f64>, enh0: Var) -> ForwardVars {
    ForwardVars {
        enhanced: [enh0, g.input(out.enhanced[1].clone())],
        stages: 2,
        seg_native: out.seg_native.iter().map(|t| g.input(t.clone())).collect(),
        seg_maps: out.seg_maps.iter().map(|t| g.input(t.clone())).collect(),
        rsp_features: Vec::new(),
        sam_features: g.input(Tensor::zeros(&[1, 1, 1])),
        encoder: Vec::new(),
        decoder: Vec::new(),
    }
}

fn ac4() -> Outcome {
    let clock = Instant::now();
    let mut s = Stream::new(41);
    let mut worst: f64 = 0.0;
    for side in [4usize, 8] {
        let pred = rand_tensor(&[3, side, side], 0.0, 1.0, &mut s);
        let target = rand_tensor(&[3, side, side], 0.0, 1.0, &mut s);
        let seg = rand_tensor(&[1, side, side], 0.05, 0.95, &mut s);
        let mask = rand_tensor(&[1, side, side], 0.0, 1.0, &mut s);
        let teacher = fake_output(&mut s, 8);
        let student = fake_output(&mut s, 8);
        let eps = 1e-3;
        worst = worst.max(loss_grad_check(&pred, &|g, p| {
            let t = g.input(target.clone());
            g.charbonnier(p, t, eps, Reduce::Mean)
        }));
        worst = worst.max(loss_grad_check(&pred, &|g, p| {
            let t = g.input(target.clone());
            let (lp, lt) = (g.laplacian(p), g.laplacian(t));
            g.charbonnier(lp, lt, eps, Reduce::Mean)
        }));
        worst = worst.max(loss_grad_check(&seg, &|g, p| {
            let t = g.input(mask.clone());
            seg_graph(g, &[p], &[t], Reduction::Mean).unwrap().1
        }));
        worst = worst.max(loss_grad_check(&student.enhanced[0], &|g, p| {
            let fv = forward_vars_from(g, &student, p);
            consistency_graph(g, &fv, &teacher, Reduction::Mean).unwrap().total
        }));
    }

    let cfg = ModelConfig::toy();
    let arch = ok(Architecture::new(&cfg))?;
    let weights = ok(init_model(&cfg, &mut Stream::new(42)))?.cast::<f64>();
    let teacher_w = ok(init_model(&cfg, &mut Stream::new(43)))?.cast::<f64>();
    let (img, mask) = ok(synthetic_fundus(32, 32, 44))?;
    let x = image_tensor::<f64>(&img);
    let target = image_tensor::<f64>(&random_image(32, 32, 45));
    let masks: Vec<Tensor<f64>> = ok(tmage_core::data::mask_pyramid(&mask))?.iter().map(|m| m.cast()).collect();
    let teacher_out = ok(forward_tensor(&x, &teacher_w, &arch))?;
    let loss_cfg = LossConfig::default();
    let build = |g: &mut Graph<f64>, w: &WeightSet<f64>| -> (Vec<Var>, Var) {
        let p = arch.bind(g, w, true).unwrap();
        let xi = g.input(x.clone());
        let out = forward_graph(g, &arch, &p, xi).unwrap();
        let t = g.input(target.clone());
        let m: Vec<Var> = masks.iter().map(|m| g.input(m.clone())).collect();
        let sup = supervised_graph(g, &out, t, Some(&m), &loss_cfg).unwrap().total;
        let cons = consistency_graph(g, &out, &teacher_out, Reduction::Mean).unwrap().total;
        let scaled = g.scale(cons, 0.5);
        (p, g.add(sup, scaled))
    };
    let mut g = Graph::new();
    let (p, l) = build(&mut g, &weights);
    let grads = g.backward(l);
    let names = [
        "stage1.shallow.weight",
        "stage1.enc2.0.body1.weight",
        "stage1.sam.attention.weight",
        "rsp.enc1.weight",
        "rsp.head0.weight",
        "stage2.patch.shallow.weight",
        "stage2.fab0.fuse.weight",
        "stage2.tail.weight",
    ];
    let mut e2e: f64 = 0.0;
    let mut checked = 0;
    for name in names {
        let Some(idx) = weights.names().iter().position(|n| n == name) else {
            continue;
        };
        checked += 1;
        let tensor = &weights.tensors()[idx];
        let entries: Vec<usize> = (0..3).map(|_| s.index(tensor.numel())).collect();
        let eval = |t: &Tensor<f64>| {
            let mut w = weights.clone();
            w.tensors_mut()[idx] = t.clone();
            let mut g = Graph::new();
            let (_, l) = build(&mut g, &w);
            g.value(l).item()
        };
        e2e = e2e.max(fd_check(tensor, &entries, &eval, grads.get(p[idx]).unwrap(), 1e-7));
    }
    ensure!(checked >= 6, "only {checked} probe tensors exist");
    let secs = clock.elapsed().as_secs_f64();
    ensure!(worst < 1e-3, "loss gradient relative error {worst:e}");
    ensure!(e2e < 1e-3, "end-to-end gradient relative error {e2e:e}");
    ensure!(secs < 300.0, "took {secs:.0} s");
    Ok(format!("losses {worst:.1e}, end-to-end {e2e:.1e} over {checked} tensors, {secs:.1} s"))
}

// ---------------------------------------------------------------- AC5

fn toy_pairs(n: usize, side: usize, seed: u64, sampler: &SamplerConfig) -> Result<Vec<SamplePair>, String> {
    ok(toy_labeled(n, side, seed))?
        .iter()
        .enumerate()
        .map(|(i, src)| ok(build_pair(&src.high, src.masks.as_deref(), derive_seed(seed, &[i as u64, 7]), sampler)))
        .collect()
}

fn ac5() -> Outcome {
    let one = |v: f64| WeightSet::new(vec!["w".into()], vec![Tensor::from_vec(&[1], vec![v])]).unwrap();
    let student = one(1.0);
    let mut teacher = one(0.0);
    let mut worst: f64 = 0.0;
    for n in 1..=200 {
        teacher = ok(ema_update(&teacher, &student, 0.99))?;
        worst = worst.max((teacher.tensors()[0].data()[0] - (1.0 - 0.99f64.powi(n))).abs());
    }
    ensure!(worst < 1e-9, "closed-form error {worst:e}");

    let cfg = ModelConfig::toy();
    let a = ok(init_model(&cfg, &mut Stream::new(51)))?;
    let b = ok(init_model(&cfg, &mut Stream::new(52)))?;
    ensure!(ok(ema_update(&a, &b, 1.0))? == a, "alpha = 1 moved the teacher");
    ensure!(ok(ema_update(&a, &b, 0.0))? == b, "alpha = 0 did not copy the student");

    let arch = ok(Architecture::new(&cfg))?;
    let pairs = toy_pairs(2, 32, 53, &SamplerConfig::default())?;
    let unlabeled = vec![ok(synthetic_fundus(32, 32, 54))?.0];
    let tcfg = TrainerConfig {
        ema_alpha: 1.0,
        lr_init: 1e-3,
        total_steps: 3,
        ..TrainerConfig::default()
    };
    let mut state = TrainState::new(a.clone(), 5);
    let before = state.teacher.content_hash();
    for _ in 0..3 {
        ok(train_step(&mut state, &tcfg, &arch, &pairs, &unlabeled))?;
    }
    ensure!(state.teacher.content_hash() == before, "teacher changed under gradient steps");
    ensure!(state.student.content_hash() != a.content_hash(), "student did not train");
    Ok(format!("closed form error {worst:.1e}; teacher hash {before:016x} unchanged over 3 steps"))
}

// ---------------------------------------------------------------- AC6

fn ac6() -> Outcome {
    let cfg = ModelConfig::toy();
    let arch = ok(Architecture::new(&cfg))?;
    let w = ok(init_model(&cfg, &mut Stream::new(61)))?;
    let pairs = toy_pairs(1, 32, 62, &SamplerConfig::default())?;
    let unlabeled = vec![ok(synthetic_fundus(32, 32, 63))?.0, ok(synthetic_fundus(32, 32, 64))?.0];
    let tcfg = TrainerConfig {
        perturb_noise_std: 0.0,
        total_steps: 1,
        ..TrainerConfig::default()
    };
    let mut state = TrainState::new(w, 6);
    let b = ok(train_step(&mut state, &tcfg, &arch, &pairs, &unlabeled))?;
    ensure!(b.consistency_total == 0.0, "consistency_total = {:e}", b.consistency_total);
    Ok("consistency_total == 0 at step 0".into())
}

// ---------------------------------------------------------------- AC7 / AC8

struct Bench {
    pairs: Vec<SamplePair>,
    unlabeled: Vec<FundusImage>,
}

fn overfit_bench() -> Result<Bench, String> {
    let pairs = toy_pairs(4, 64, 71, &SamplerConfig::default())?;
    let sampler = SamplerConfig::default();
    let unlabeled = (0..2u64)
        .map(|i| {
            let (img, _) = ok(synthetic_fundus(64, 64, 700 + i))?;
            let rec = ok(sample_degradation(800 + i, &sampler, 64, 64, None))?;
            ok(degrade(&img, &rec))
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(Bench { pairs, unlabeled })
}

fn overfit_trainer(steps: u64) -> TrainerConfig {
    TrainerConfig {
        ema_alpha: 0.99,
        lr_init: 2e-3,
        lr_final: 1e-5,
        total_steps: steps,
        labeled_per_batch: 4,
        unlabeled_per_batch: 2,
        ..TrainerConfig::default()
    }
}

struct RunResult {
    first: f64,
    last: f64,
    state: TrainState,
}

fn train(model: &ModelConfig, tcfg: &TrainerConfig, bench: &Bench, unlabeled: bool) -> Result<RunResult, String> {
    let arch = ok(Architecture::new(model))?;
    let w = ok(init_model(model, &mut Stream::new(72)))?;
    let mut state = TrainState::new(w, 73);
    let un: &[FundusImage] = if unlabeled { &bench.unlabeled } else { &[] };
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..tcfg.total_steps {
        let b = ok(train_step(&mut state, tcfg, &arch, &bench.pairs, un))?;
        if step == 0 {
            first = b.supervised_total;
        }
        last = b.supervised_total;
    }
    Ok(RunResult { first, last, state })
}

fn mean_metrics(bench: &Bench, model: &ModelConfig, w: Option<&WeightSet<f32>>) -> Result<(f64, f64), String> {
    let (mut p, mut s) = (0.0, 0.0);
    for pair in &bench.pairs {
        let img = match w {
            Some(w) => {
                let out = ok(tmage_core::magenet::forward(&pair.low, w, model))?;
                ok(tmage::io::tensor_image(&out.enhanced[1]))?
            }
            None => pair.low.clone(),
        };
        p += ok(psnr(&img, &pair.high))?;
        s += ok(ssim(&img, &pair.high))?;
    }
    let n = bench.pairs.len() as f64;
    Ok((p / n, s / n))
}

const OVERFIT_STEPS: u64 = 400;

fn ac7() -> Outcome {
    let clock = Instant::now();
    let bench = overfit_bench()?;
    let model = ModelConfig::toy();
    let r = train(&model, &overfit_trainer(OVERFIT_STEPS), &bench, true)?;
    let (p0, s0) = mean_metrics(&bench, &model, None)?;
    let (ps, ss) = mean_metrics(&bench, &model, Some(&r.state.student))?;
    let (pt, _) = mean_metrics(&bench, &model, Some(&r.state.teacher))?;
    let secs = clock.elapsed().as_secs_f64();
    let detail = format!(
        "input {p0:.2} dB / {s0:.4}, student {ps:.2} dB / {ss:.4}, teacher {pt:.2} dB, loss {:.4} -> {:.4}, {secs:.0} s",
        r.first, r.last
    );
    ensure!(ps >= p0 + 2.0, "PSNR gain below 2 dB: {detail}");
    ensure!(ss > s0, "SSIM did not improve: {detail}");
    ensure!(r.last < 0.5 * r.first, "supervised loss did not halve: {detail}");
    ensure!(pt > p0, "teacher does not beat the input: {detail}");
    ensure!(secs < 600.0, "over the 10 minute budget: {detail}");
    Ok(detail)
}

fn ac8() -> Outcome {
    let clock = Instant::now();
    let bench = overfit_bench()?;
    let tcfg = overfit_trainer(OVERFIT_STEPS);
    let variants = [
        ("S1", ModelConfig { use_stage2: false, use_rsp: false, ..ModelConfig::toy() }),
        ("S1+S2", ModelConfig { use_rsp: false, ..ModelConfig::toy() }),
        ("S1+S2+RSP", ModelConfig::toy()),
    ];
    let mut scores = Vec::new();
    for (name, model) in &variants {
        let r = train(model, &tcfg, &bench, false)?;
        scores.push((name, mean_metrics(&bench, model, Some(&r.state.student))?.0));
    }
    let detail = scores
        .iter()
        .map(|(n, p)| format!("{n} {p:.2} dB"))
        .collect::<Vec<_>>()
        .join(", ");
    let secs = clock.elapsed().as_secs_f64();
    ensure!(scores[0].1 <= scores[1].1 + 0.3, "S1 > S1+S2 beyond tolerance: {detail}");
    ensure!(scores[1].1 <= scores[2].1 + 0.3, "S1+S2 > full beyond tolerance: {detail}");
    Ok(format!("{detail}, {secs:.0} s"))
}

// ---------------------------------------------------------------- AC9

fn ssim_oracle(a: &FundusImage, b: &FundusImage) -> f64 {
    let k = kernel_oracle(5, 1.5);
    let (h, w) = (a.height(), a.width());
    let (mut acc, mut n) = (0.0, 0.0);
    for ch in 0..3 {
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in k.iter().enumerate() {
                    for (j, wt) in row.iter().enumerate() {
                        let p = f64::from(a.get(y + i, x + j, ch));
                        let q = f64::from(b.get(y + i, x + j, ch));
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                acc += ((2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
                n += 1.0;
            }
        }
    }
    acc / n
}

fn ac9() -> Outcome {
    let a = ok(FundusImage::constant(32, 32, 0.0))?;
    let b = ok(FundusImage::constant(32, 32, 0.1))?;
    let p = ok(psnr(&a, &b))?;
    ensure!((p - 20.0).abs() < 1e-6, "PSNR = {p}");
    let x = random_image(16, 16, 91);
    let self_sim = ok(ssim(&x, &x))?;
    ensure!((self_sim - 1.0).abs() < 1e-9, "self SSIM = {self_sim}");
    let inv: Vec<f64> = x.to_f64().iter().map(|v| 1.0 - v).collect();
    let y = ok(FundusImage::from_clipped(16, 16, &inv))?;
    let got = ok(ssim(&x, &y))?;
    let want = ssim_oracle(&x, &y);
    ensure!((got - want).abs() < 1e-6, "SSIM {got} vs oracle {want}");
    Ok(format!("PSNR {p:.7} dB, self SSIM {self_sim}, oracle gap {:.1e}", (got - want).abs()))
}

// ---------------------------------------------------------------- AC10

fn ac10() -> Outcome {
    let (t, mu_max) = (4000u64, 2.5);
    let m0 = rampup_mu(0, t, mu_max);
    ensure!((m0 - mu_max * (-5.0f64).exp()).abs() < 1e-9, "mu(0) = {m0}");
    ensure!(rampup_mu(t, t, mu_max) == mu_max, "mu(T) = {}", rampup_mu(t, t, mu_max));
    let mut s = Stream::new(101);
    let mut steps: Vec<u64> = (0..1000).map(|_| s.index(2 * t as usize) as u64).collect();
    steps.sort_unstable();
    for w in steps.windows(2) {
        ensure!(rampup_mu(w[0], t, mu_max) <= rampup_mu(w[1], t, mu_max), "not monotone at {w:?}");
    }
    Ok(format!("mu(0) = {m0:.9}, mu(T) = {mu_max}, monotone over 1000 steps"))
}

fn main() {
    let checks: [(&str, &str, fn() -> Outcome); 10] = [
        ("AC1", "degradation oracles", ac1),
        ("AC2", "determinism", ac2),
        ("AC3", "loss formula oracles", ac3),
        ("AC4", "gradient checks", ac4),
        ("AC5", "EMA algebra", ac5),
        ("AC6", "consistency null case", ac6),
        ("AC7", "overfit smoke test", ac7),
        ("AC8", "ablation ordering", ac8),
        ("AC9", "metric correctness", ac9),
        ("AC10", "mu ramp", ac10),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failed = 0;
    for (id, name, run) in checks {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let clock = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = clock.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("{id} {name}: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("{id} {name}: FAIL ({d}) [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
