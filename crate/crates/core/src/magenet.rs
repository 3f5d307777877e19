//! The enhancement network: a Stage-1 UNet of channel attention blocks (CABs)
//! ending in a supervised attention module (SAM), a full-resolution Stage-2
//! of fundus attention blocks (FABs), and the retinal structure preservation
//! (RSP) segmenter whose decoder features steer Stage 2.
//!
//! [`Architecture`] is derived once from a [`ModelConfig`]; it owns the
//! parameter table (names, shapes, fan-in) and the indices each layer reads.
//! Weights live in a [`WeightSet`] and are bound into an autodiff
//! [`Graph`](crate::autodiff::Graph) per forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{param_err, Result};
use crate::image::{FundusImage, CHANNELS};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

pub const ENCODER_LEVELS: usize = 4;
pub const RSP_SCALES: usize = 4;
/// Input sides must be multiples of this (three stride-2 steps, then halves).
pub const SIDE_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the full-resolution paths and of encoder level 0.
    pub base_channels: usize,
    /// Extra channels per encoder level: level `k` has `base + k * growth`.
    pub channel_growth: usize,
    pub encoder_levels: usize,
    pub cabs_per_level: usize,
    pub cabs_per_fab: usize,
    pub num_fabs: usize,
    /// Channel attention reduction ratio `r`.
    pub reduction: usize,
    pub seg_classes: usize,
    pub multi_patch_enabled: bool,
    /// Ablation switch: without Stage 2 the final output is `I_e^1`.
    pub use_stage2: bool,
    /// Ablation switch: without RSP there are no seg maps and FABs fuse only
    /// Stage-1 context.
    pub use_rsp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_growth: 8,
            encoder_levels: ENCODER_LEVELS,
            cabs_per_level: 2,
            cabs_per_fab: 2,
            num_fabs: 3,
            reduction: 8,
            seg_classes: 1,
            multi_patch_enabled: true,
            use_stage2: true,
            use_rsp: true,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by tests and the overfit benchmark.
    pub fn toy() -> Self {
        Self {
            base_channels: 8,
            channel_growth: 4,
            cabs_per_level: 1,
            cabs_per_fab: 1,
            reduction: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(param_err!("base_channels must be at least 4, got {}", self.base_channels));
        }
        if self.encoder_levels != ENCODER_LEVELS {
            return Err(param_err!(
                "encoder_levels must be {ENCODER_LEVELS}, got {}",
                self.encoder_levels
            ));
        }
        if self.num_fabs == 0 {
            return Err(param_err!("num_fabs must be at least 1"));
        }
        if self.cabs_per_level == 0 || self.cabs_per_fab == 0 {
            return Err(param_err!("CAB counts must be at least 1"));
        }
        if self.reduction == 0 {
            return Err(param_err!("channel attention reduction must be at least 1"));
        }
        if self.seg_classes == 0 {
            return Err(param_err!("seg_classes must be at least 1"));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels + level * self.channel_growth
    }

    /// Stage-1 / RSP level consumed by FAB `i`: coarsest to finest over the
    /// three finest levels.
    pub fn fab_level(&self, i: usize) -> usize {
        (self.num_fabs - 1 - i).min(2)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height % SIDE_MULTIPLE != 0 || width % SIDE_MULTIPLE != 0 || height == 0 || width == 0 {
            return Err(param_err!(
                "input is {height}x{width}, both sides must be positive multiples of {SIDE_MULTIPLE}"
            ));
        }
        Ok(())
    }
}

/// A convolution's parameter indices and geometry. Padding is `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Cab {
    pub body1: Conv,
    pub body2: Conv,
    pub squeeze: Conv,
    pub excite: Conv,
}

#[derive(Clone, Debug)]
pub struct Sam {
    pub residual: Conv,
    pub attention: Conv,
}

#[derive(Clone, Debug)]
pub struct Stage1 {
    pub shallow: Conv,
    pub shallow_cab: Cab,
    pub encoder: Vec<Vec<Cab>>,
    /// Stride-2 convs from level `k` to `k + 1`.
    pub down: Vec<Conv>,
    /// 1x1 convs from level `k + 1` to `k` after bilinear upsampling.
    pub up: Vec<Conv>,
    /// Decoder CABs for levels 0..3; level 3 reuses the encoder bottom.
    pub decoder: Vec<Vec<Cab>>,
    pub sam: Sam,
}

#[derive(Clone, Debug)]
pub struct Rsp {
    pub encoder: Vec<Conv>,
    /// Decoder convs for levels 0..3 over `concat(upsampled, skip)`.
    pub decoder: Vec<Conv>,
    pub heads: Vec<Conv>,
}

#[derive(Clone, Debug)]
pub struct Fab {
    pub level: usize,
    pub cabs: Vec<Cab>,
    pub enc_proj: Conv,
    pub dec_proj: Conv,
    pub fuse: Conv,
}

#[derive(Clone, Debug)]
pub struct Stage2 {
    pub shallow: Conv,
    pub shallow_cab: Cab,
    pub patch: Option<(Conv, Cab)>,
    pub merge: Conv,
    pub fabs: Vec<Fab>,
    pub tail: Conv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

/// Structural identity of a [`WeightSet`]: ordered names and shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint(pub Vec<(String, Vec<usize>)>);

impl Fingerprint {
    /// A human-readable description of the first differences, or `None`.
    pub fn diff(&self, other: &Self) -> Option<String> {
        if self == other {
            return None;
        }
        let mut lines = Vec::new();
        if self.0.len() != other.0.len() {
            lines.push(format!("{} tensors vs {}", self.0.len(), other.0.len()));
        }
        for (a, b) in self.0.iter().zip(&other.0) {
            if a != b {
                lines.push(format!("{} {:?} vs {} {:?}", a.0, a.1, b.0, b.1));
            }
            if lines.len() >= 8 {
                break;
            }
        }
        Some(lines.join("; "))
    }

    pub fn digest(&self) -> u64 {
        let mut h = crate::rng::hash_str("");
        for (name, shape) in &self.0 {
            h = crate::rng::derive_seed(h, &[crate::rng::hash_str(name)]);
            for &d in shape {
                h = crate::rng::derive_seed(h, &[d as u64]);
            }
        }
        h
    }
}

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> WeightSet<T> {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(param_err!("{} names for {} tensors", names.len(), tensors.len()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(param_err!("duplicate parameter name {n}"));
            }
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint(
            self.names
                .iter()
                .cloned()
                .zip(self.tensors.iter().map(|t| t.shape().to_vec()))
                .collect(),
        )
    }

    /// FNV-1a over the fingerprint and every value's bit pattern.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = self.fingerprint().digest();
        for t in &self.tensors {
            for v in t.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> WeightSet<U> {
        WeightSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

struct Registry {
    params: Vec<ParamSpec>,
}

impl Registry {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv {
        let fan_in = cin * kernel * kernel;
        let weight = self.params.len();
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, kernel, kernel],
            fan_in,
            is_bias: false,
        });
        self.params.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            fan_in,
            is_bias: true,
        });
        Conv {
            weight,
            bias: weight + 1,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    fn cab(&mut self, name: &str, c: usize, reduction: usize) -> Cab {
        let mid = (c / reduction).max(1);
        Cab {
            body1: self.conv(&format!("{name}.body1"), c, c, 3, 1),
            body2: self.conv(&format!("{name}.body2"), c, c, 3, 1),
            squeeze: self.conv(&format!("{name}.squeeze"), c, mid, 1, 1),
            excite: self.conv(&format!("{name}.excite"), mid, c, 1, 1),
        }
    }

    fn cabs(&mut self, name: &str, n: usize, c: usize, reduction: usize) -> Vec<Cab> {
        (0..n).map(|i| self.cab(&format!("{name}.{i}"), c, reduction)).collect()
    }
}

/// Layer layout and parameter table derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub params: Vec<ParamSpec>,
    pub stage1: Stage1,
    pub rsp: Option<Rsp>,
    pub stage2: Option<Stage2>,
}

impl Architecture {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registry { params: Vec::new() };
        let r = cfg.reduction;
        let c = |k: usize| cfg.level_channels(k);
        let c0 = c(0);

        let stage1 = Stage1 {
            shallow: reg.conv("stage1.shallow", CHANNELS, c0, 3, 1),
            shallow_cab: reg.cab("stage1.shallow_cab", c0, r),
            encoder: (0..ENCODER_LEVELS)
                .map(|k| reg.cabs(&format!("stage1.enc{k}"), cfg.cabs_per_level, c(k), r))
                .collect(),
            down: (0..ENCODER_LEVELS - 1)
                .map(|k| reg.conv(&format!("stage1.down{k}"), c(k), c(k + 1), 3, 2))
                .collect(),
            up: (0..ENCODER_LEVELS - 1)
                .map(|k| reg.conv(&format!("stage1.up{k}"), c(k + 1), c(k), 1, 1))
                .collect(),
            decoder: (0..ENCODER_LEVELS - 1)
                .map(|k| reg.cabs(&format!("stage1.dec{k}"), cfg.cabs_per_level, c(k), r))
                .collect(),
            sam: Sam {
                residual: reg.conv("stage1.sam.residual", c0, CHANNELS, 3, 1),
                attention: reg.conv("stage1.sam.attention", CHANNELS, c0, 3, 1),
            },
        };

        let rsp = cfg.use_rsp.then(|| Rsp {
            encoder: (0..ENCODER_LEVELS)
                .map(|k| {
                    let (cin, stride) = if k == 0 { (CHANNELS, 1) } else { (c(k - 1), 2) };
                    reg.conv(&format!("rsp.enc{k}"), cin, c(k), 3, stride)
                })
                .collect(),
            decoder: (0..ENCODER_LEVELS - 1)
                .map(|k| reg.conv(&format!("rsp.dec{k}"), c(k + 1) + c(k), c(k), 3, 1))
                .collect(),
            heads: (0..RSP_SCALES)
                .map(|k| reg.conv(&format!("rsp.head{k}"), c(k), cfg.seg_classes, 1, 1))
                .collect(),
        });

        let stage2 = cfg.use_stage2.then(|| {
            let shallow = reg.conv("stage2.shallow", CHANNELS, c0, 3, 1);
            let shallow_cab = reg.cab("stage2.shallow_cab", c0, r);
            let patch = cfg.multi_patch_enabled.then(|| {
                (
                    reg.conv("stage2.patch.shallow", CHANNELS, c0, 3, 1),
                    reg.cab("stage2.patch.cab", c0, r),
                )
            });
            let merge = reg.conv("stage2.merge", 2 * c0, c0, 1, 1);
            let fabs = (0..cfg.num_fabs)
                .map(|i| {
                    let level = cfg.fab_level(i);
                    let rsp_c = if cfg.use_rsp { c(level) } else { 0 };
                    Fab {
                        level,
                        cabs: reg.cabs(&format!("stage2.fab{i}.cab"), cfg.cabs_per_fab, c0, r),
                        enc_proj: reg.conv(&format!("stage2.fab{i}.enc_proj"), c(level), c0, 1, 1),
                        dec_proj: reg.conv(&format!("stage2.fab{i}.dec_proj"), c(level), c0, 1, 1),
                        fuse: reg.conv(&format!("stage2.fab{i}.fuse"), c0 + rsp_c, c0, 1, 1),
                    }
                })
                .collect();
            let tail = reg.conv("stage2.tail", c0, CHANNELS, 3, 1);
            Stage2 {
                shallow,
                shallow_cab,
                patch,
                merge,
                fabs,
                tail,
            }
        });

        Ok(Self {
            cfg: cfg.clone(),
            params: reg.params,
            stage1,
            rsp,
            stage2,
        })
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint(
            self.params
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone()))
                .collect(),
        )
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Indices of the RSP parameters.
    pub fn rsp_param_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with("rsp."))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check_weights<T: Real>(&self, weights: &WeightSet<T>) -> Result<()> {
        match self.fingerprint().diff(&weights.fingerprint()) {
            None => Ok(()),
            Some(d) => Err(param_err!("weights do not match the model configuration: {d}")),
        }
    }

    /// Binds every weight as a graph leaf; trainable leaves receive gradients.
    pub fn bind<T: Real>(
        &self,
        g: &mut Graph<T>,
        weights: &WeightSet<T>,
        trainable: bool,
    ) -> Result<Vec<Var>> {
        self.check_weights(weights)?;
        Ok(weights
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect())
    }
}

/// Fan-in scaled uniform initialisation. Weights of the plain ReLU segmenter
/// use the He bound `sqrt(6 / fan_in)`, the residual enhancement paths use
/// `1 / sqrt(fan_in)`. Biases start at zero.
pub fn init_model(cfg: &ModelConfig, rng: &mut Stream) -> Result<WeightSet<f32>> {
    let arch = Architecture::new(cfg)?;
    let mut names = Vec::with_capacity(arch.params.len());
    let mut tensors = Vec::with_capacity(arch.params.len());
    for p in &arch.params {
        let n: usize = p.shape.iter().product();
        let data = if p.is_bias {
            vec![0.0; n]
        } else {
            let bound = init_bound(p);
            (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect()
        };
        names.push(p.name.clone());
        tensors.push(Tensor::from_vec(&p.shape, data));
    }
    WeightSet::new(names, tensors)
}

pub fn init_bound(p: &ParamSpec) -> f64 {
    if p.name.starts_with("rsp.") {
        libm::sqrt(6.0 / p.fan_in as f64)
    } else {
        1.0 / libm::sqrt(p.fan_in as f64)
    }
}

/// Zeroes the two residual heads so both stages reproduce their input.
pub fn zero_residual<T: Real>(weights: &mut WeightSet<T>) {
    for name in [
        "stage1.sam.residual.weight",
        "stage1.sam.residual.bias",
        "stage2.tail.weight",
        "stage2.tail.bias",
    ] {
        if let Some(t) = weights.get_mut(name) {
            t.fill(T::zero());
        }
    }
}

pub fn conv_forward<T: Real>(g: &mut Graph<T>, p: &[Var], conv: &Conv, x: Var) -> Result<Var> {
    let c = g.shape(x)[0];
    if c != conv.cin {
        return Err(param_err!("conv expects {} channels, got {c}", conv.cin));
    }
    Ok(g.conv2d(x, p[conv.weight], Some(p[conv.bias]), conv.stride))
}

/// Residual conv block gated by squeeze-and-excite channel attention.
pub fn cab_forward<T: Real>(g: &mut Graph<T>, p: &[Var], cab: &Cab, x: Var) -> Result<Var> {
    let h = conv_forward(g, p, &cab.body1, x)?;
    let h = g.relu(h);
    let h = conv_forward(g, p, &cab.body2, h)?;
    let gate = cab_gate(g, p, cab, h)?;
    let scaled = g.scale_channels(h, gate);
    Ok(g.add(scaled, x))
}

/// The `C x 1 x 1` sigmoid channel gate computed from residual features.
pub fn cab_gate<T: Real>(g: &mut Graph<T>, p: &[Var], cab: &Cab, h: Var) -> Result<Var> {
    let s = g.global_avg_pool(h);
    let s = conv_forward(g, p, &cab.squeeze, s)?;
    let s = g.relu(s);
    let s = conv_forward(g, p, &cab.excite, s)?;
    Ok(g.sigmoid(s))
}

fn cab_stack<T: Real>(g: &mut Graph<T>, p: &[Var], cabs: &[Cab], mut x: Var) -> Result<Var> {
    for cab in cabs {
        x = cab_forward(g, p, cab, x)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct SamVars {
    pub enhanced: Var,
    pub attention: Var,
    pub gated: Var,
}

pub fn sam_forward<T: Real>(
    g: &mut Graph<T>,
    p: &[Var],
    sam: &Sam,
    feats: Var,
    img: Var,
) -> Result<SamVars> {
    if g.shape(feats)[1..] != g.shape(img)[1..] {
        return Err(param_err!("SAM features must be at image resolution"));
    }
    let residual = conv_forward(g, p, &sam.residual, feats)?;
    let enhanced = g.add(img, residual);
    let a = conv_forward(g, p, &sam.attention, enhanced)?;
    let attention = g.sigmoid(a);
    let weighted = g.mul(feats, attention);
    let gated = g.add(weighted, feats);
    Ok(SamVars {
        enhanced,
        attention,
        gated,
    })
}

#[derive(Clone, Debug)]
pub struct Stage1Vars {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub enhanced: Var,
    pub sam_features: Var,
}

pub fn stage1_forward<T: Real>(
    g: &mut Graph<T>,
    p: &[Var],
    s1: &Stage1,
    img: Var,
) -> Result<Stage1Vars> {
    let x = conv_forward(g, p, &s1.shallow, img)?;
    let mut x = cab_forward(g, p, &s1.shallow_cab, x)?;
    let mut encoder = Vec::with_capacity(ENCODER_LEVELS);
    for k in 0..ENCODER_LEVELS {
        if k > 0 {
            x = conv_forward(g, p, &s1.down[k - 1], x)?;
        }
        x = cab_stack(g, p, &s1.encoder[k], x)?;
        encoder.push(x);
    }
    let mut decoder = vec![encoder[ENCODER_LEVELS - 1]; ENCODER_LEVELS];
    for k in (0..ENCODER_LEVELS - 1).rev() {
        let (_, h, w) = g.value(encoder[k]).chw();
        let up = g.resize(decoder[k + 1], h, w);
        let up = conv_forward(g, p, &s1.up[k], up)?;
        let y = g.add(up, encoder[k]);
        decoder[k] = cab_stack(g, p, &s1.decoder[k], y)?;
    }
    let sam = sam_forward(g, p, &s1.sam, decoder[0], img)?;
    Ok(Stage1Vars {
        encoder,
        decoder,
        enhanced: sam.enhanced,
        sam_features: sam.gated,
    })
}

#[derive(Clone, Debug)]
pub struct RspVars {
    /// Sigmoid maps at native scale `H / 2^v` for `v = 0..4`.
    pub seg_native: Vec<Var>,
    pub features: Vec<Var>,
}

pub fn rsp_forward<T: Real>(g: &mut Graph<T>, p: &[Var], rsp: &Rsp, img: Var) -> Result<RspVars> {
    let mut enc = Vec::with_capacity(ENCODER_LEVELS);
    let mut x = img;
    for conv in &rsp.encoder {
        let y = conv_forward(g, p, conv, x)?;
        x = g.relu(y);
        enc.push(x);
    }
    let mut features = vec![enc[ENCODER_LEVELS - 1]; ENCODER_LEVELS];
    for k in (0..ENCODER_LEVELS - 1).rev() {
        let (_, h, w) = g.value(enc[k]).chw();
        let up = g.resize(features[k + 1], h, w);
        let cat = g.concat_channels(&[up, enc[k]]);
        let y = conv_forward(g, p, &rsp.decoder[k], cat)?;
        features[k] = g.relu(y);
    }
    let seg_native = features
        .iter()
        .zip(&rsp.heads)
        .map(|(&f, head)| {
            let s = conv_forward(g, p, head, f)?;
            Ok(g.sigmoid(s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RspVars {
        seg_native,
        features,
    })
}

/// CAB stack, plus projected Stage-1 context, plus a residual fusion with the
/// RSP feature: `out = h + relu(fuse(concat(h, rsp)))`.
pub fn fab_forward<T: Real>(
    g: &mut Graph<T>,
    p: &[Var],
    fab: &Fab,
    feats: Var,
    stage1_enc: Var,
    stage1_dec: Var,
    rsp_feature: Option<Var>,
) -> Result<Var> {
    let (_, h, w) = g.value(feats).chw();
    let mut x = cab_stack(g, p, &fab.cabs, feats)?;
    for (proj, src) in [(&fab.enc_proj, stage1_enc), (&fab.dec_proj, stage1_dec)] {
        let y = conv_forward(g, p, proj, src)?;
        let y = g.resize(y, h, w);
        x = g.add(x, y);
    }
    let fused_in = match rsp_feature {
        Some(r) => {
            let r = g.resize(r, h, w);
            g.concat_channels(&[x, r])
        }
        None => x,
    };
    let f = conv_forward(g, p, &fab.fuse, fused_in)?;
    let f = g.relu(f);
    Ok(g.add(x, f))
}

pub fn stage2_forward<T: Real>(
    g: &mut Graph<T>,
    p: &[Var],
    s2: &Stage2,
    img: Var,
    stage1: &Stage1Vars,
    rsp_features: Option<&[Var]>,
) -> Result<Var> {
    let x = conv_forward(g, p, &s2.shallow, img)?;
    let mut x = cab_forward(g, p, &s2.shallow_cab, x)?;
    if let Some((conv, cab)) = &s2.patch {
        let (_, _, w) = g.value(img).chw();
        let half = w / 2;
        let mut halves = [img; 2];
        for (i, slot) in halves.iter_mut().enumerate() {
            let part = g.slice_width(img, i * half, half);
            let y = conv_forward(g, p, conv, part)?;
            *slot = cab_forward(g, p, cab, y)?;
        }
        let joined = g.concat_width(&halves);
        x = g.add(x, joined);
    }
    let cat = g.concat_channels(&[x, stage1.sam_features]);
    let mut x = conv_forward(g, p, &s2.merge, cat)?;
    for fab in &s2.fabs {
        let rsp = rsp_features.map(|f| f[fab.level]);
        x = fab_forward(
            g,
            p,
            fab,
            x,
            stage1.encoder[fab.level],
            stage1.decoder[fab.level],
            rsp,
        )?;
    }
    let residual = conv_forward(g, p, &s2.tail, x)?;
    Ok(g.add(img, residual))
}

/// Graph handles for every output of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[I_e^1, I_e^2]`; identical without Stage 2.
    pub enhanced: [Var; 2],
    /// 2 with Stage 2, else 1.
    pub stages: usize,
    pub seg_native: Vec<Var>,
    /// Seg maps upsampled to `H x W`.
    pub seg_maps: Vec<Var>,
    pub rsp_features: Vec<Var>,
    pub sam_features: Var,
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    arch: &Architecture,
    p: &[Var],
    img: Var,
) -> Result<ForwardVars> {
    let (c, h, w) = g.value(img).chw();
    if c != CHANNELS {
        return Err(param_err!("input must have {CHANNELS} channels, got {c}"));
    }
    arch.cfg.check_input(h, w)?;
    let rsp = match &arch.rsp {
        Some(r) => Some(rsp_forward(g, p, r, img)?),
        None => None,
    };
    let s1 = stage1_forward(g, p, &arch.stage1, img)?;
    let e2 = match &arch.stage2 {
        Some(s2) => stage2_forward(g, p, s2, img, &s1, rsp.as_ref().map(|r| &r.features[..]))?,
        None => s1.enhanced,
    };
    let (seg_native, rsp_features) = rsp.map(|r| (r.seg_native, r.features)).unwrap_or_default();
    let seg_maps = seg_native.iter().map(|&s| g.resize(s, h, w)).collect();
    Ok(ForwardVars {
        enhanced: [s1.enhanced, e2],
        stages: if arch.stage2.is_some() { 2 } else { 1 },
        seg_native,
        seg_maps,
        rsp_features,
        sam_features: s1.sam_features,
        encoder: s1.encoder,
        decoder: s1.decoder,
    })
}

/// Materialised forward outputs, channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T = f32> {
    pub enhanced: [Tensor<T>; 2],
    pub stages: usize,
    /// Seg maps at their native scales `H / 2^v`.
    pub seg_native: Vec<Tensor<T>>,
    /// Seg maps upsampled to `H x W`.
    pub seg_maps: Vec<Tensor<T>>,
    pub rsp_features: Vec<Tensor<T>>,
    pub sam_features: Tensor<T>,
}

impl<T: Real> ModelOutput<T> {
    pub fn all_finite(&self) -> bool {
        self.enhanced.iter().all(Tensor::all_finite)
            && self.seg_maps.iter().all(Tensor::all_finite)
            && self.rsp_features.iter().all(Tensor::all_finite)
            && self.sam_features.all_finite()
    }

    /// The final output `I_e^2` as an image (clipped into `[0, 1]`).
    pub fn final_image(&self) -> Result<FundusImage> {
        tensor_to_image(&self.enhanced[1])
    }
}

impl ForwardVars {
    pub fn materialize<T: Real>(&self, g: &Graph<T>) -> ModelOutput<T> {
        ModelOutput {
            enhanced: [
                g.value(self.enhanced[0]).clone(),
                g.value(self.enhanced[1]).clone(),
            ],
            stages: self.stages,
            seg_native: self.seg_native.iter().map(|&v| g.value(v).clone()).collect(),
            seg_maps: self.seg_maps.iter().map(|&v| g.value(v).clone()).collect(),
            rsp_features: self.rsp_features.iter().map(|&v| g.value(v).clone()).collect(),
            sam_features: g.value(self.sam_features).clone(),
        }
    }
}

pub fn image_tensor<T: Real>(img: &FundusImage) -> Tensor<T> {
    let data = img.to_planar().into_iter().map(|v| T::from_f64(f64::from(v))).collect();
    Tensor::from_vec(&[CHANNELS, img.height(), img.width()], data)
}

pub fn tensor_to_image<T: Real>(t: &Tensor<T>) -> Result<FundusImage> {
    let (c, h, w) = t.chw();
    if c != CHANNELS {
        return Err(param_err!("expected a 3-channel tensor, got {c}"));
    }
    let planar: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
    FundusImage::from_planar(h, w, &planar)
}

/// Inference: builds a constant graph and returns every output.
pub fn forward_tensor<T: Real>(
    img: &Tensor<T>,
    weights: &WeightSet<T>,
    arch: &Architecture,
) -> Result<ModelOutput<T>> {
    let mut g = Graph::new();
    let p = arch.bind(&mut g, weights, false)?;
    let x = g.input(img.clone());
    let vars = forward_graph(&mut g, arch, &p, x)?;
    Ok(vars.materialize(&g))
}

pub fn forward(img: &FundusImage, weights: &WeightSet<f32>, cfg: &ModelConfig) -> Result<ModelOutput<f32>> {
    let arch = Architecture::new(cfg)?;
    forward_tensor(&image_tensor(img), weights, &arch)
}

impl core::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        for (i, (n, s)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{n}{s:?}")?;
        }
        Ok(())
    }
}
