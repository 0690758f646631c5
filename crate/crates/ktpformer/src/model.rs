//! Model assembly: configuration, parameters, wiring modes, forward pass,
//! checkpoints, and analytic parameter/FLOP accounting.
//!
//! # Wiring modes
//!
//! * `SMD` (canonical): KPA → spatial encoder → TPA stack → temporal
//!   encoder → L alternating spatial/temporal encoders → head.
//! * `SMD-S`: as SMD with a single TPA block in the stack.
//! * `UMD`: KPA → TPA stack → the full encoder chain.
//! * `PMD`: KPA + spatial encoder in parallel with an embed + TPA-stack
//!   branch (the branch reuses the shared embedding); the branches are
//!   summed before the temporal entry encoder.
//! * `BASELINE`: plain linear embedding plus position embeddings into the
//!   same encoder chain; no prior parameters exist in this mode.
//!
//! Every mode runs `depth + 1` spatial/temporal encoder pairs (the entry
//! pair plus `depth` stacked pairs), so prior machinery is the only
//! difference between them.
//!
//! # Parameter enumeration
//!
//! Checkpoints, the optimizer, and `params` accounting all walk parameters
//! in one stable order:
//!
//! 1. `embed` (2×d)
//! 2. `kpa_global` (N×N), `kpa_modulation` (N×d) — prior modes only
//! 3. `spatial_pos` (N×d)
//! 4. per TPA block i: `tpa{i}_transform` (d×d), `tpa{i}_global` (T×T),
//!    `tpa{i}_modulation` (T×d)
//! 5. `temporal_pos` (T×d)
//! 6. `entry_spatial_*`, `entry_temporal_*`, then `stack{i}_spatial_*`,
//!    `stack{i}_temporal_*`; encoder fields in order `qkv`, `out_proj`,
//!    `ln_gain`, `ln_bias`, `mlp_w1`, `mlp_b1`, `mlp_w2`, `mlp_b2`
//! 7. `head_w` (d×3), `head_b` (3)
//!
//! Initialization draws each group from its own seeded stream, so two
//! modes sharing a seed share the values of their common groups.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, KtpError, Result};
use crate::prior::{kpa_forward, tpa_stack, KpaVars, TpaBlockVars};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::topology::{build_spatial_local, build_temporal_local, Skeleton};
use crate::transformer::{encoder_block, swap_token_axes, EncoderVars, MhsaVars};

pub const OUTPUT_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Umd,
    Pmd,
    SmdS,
    Smd,
}

impl Mode {
    pub fn id(self) -> u32 {
        match self {
            Mode::Baseline => 0,
            Mode::Umd => 1,
            Mode::Pmd => 2,
            Mode::SmdS => 3,
            Mode::Smd => 4,
        }
    }

    pub fn from_id(id: u32) -> Result<Mode> {
        Ok(match id {
            0 => Mode::Baseline,
            1 => Mode::Umd,
            2 => Mode::Pmd,
            3 => Mode::SmdS,
            4 => Mode::Smd,
            other => {
                return Err(KtpError::Validation(format!("unknown mode id {other}")));
            }
        })
    }

    pub fn has_prior(self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    /// TPA blocks owned by a model built for this mode.
    pub fn tpa_blocks(self) -> usize {
        match self {
            Mode::Baseline => 0,
            Mode::SmdS => 1,
            _ => 2,
        }
    }

    pub const ALL: [Mode; 5] = [Mode::Baseline, Mode::Umd, Mode::Pmd, Mode::SmdS, Mode::Smd];
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Baseline => "BASELINE",
            Mode::Umd => "UMD",
            Mode::Pmd => "PMD",
            Mode::SmdS => "SMD-S",
            Mode::Smd => "SMD",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mode {
    type Err = KtpError;

    fn from_str(s: &str) -> Result<Mode> {
        Ok(match s {
            "BASELINE" => Mode::Baseline,
            "UMD" => Mode::Umd,
            "PMD" => Mode::Pmd,
            "SMD-S" => Mode::SmdS,
            "SMD" => Mode::Smd,
            other => {
                return Err(KtpError::Validation(format!(
                    "unknown mode `{other}` (expected BASELINE, UMD, PMD, SMD-S, or SMD)"
                )));
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub joints: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Stacked spatial/temporal encoder pairs after the entry pair.
    pub depth: usize,
    pub mode: Mode,
    pub temporal_radius: usize,
    pub lambda_t: f64,
    pub lambda_m: f64,
    /// Per-joint weights for the weighted position loss, length `joints`.
    pub joint_weights: Vec<f64>,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub train_steps: usize,
    pub seed: u64,
    pub layer_norm_eps: f64,
    /// Skeleton file path; `None` selects the bundled 17-joint skeleton.
    pub skeleton: Option<String>,
}

impl ModelConfig {
    /// Desk-scale defaults: 27-frame window over the bundled 17-joint
    /// skeleton, width 64, 4 heads, 2 stacked pairs, canonical SMD wiring.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            frames: 27,
            joints: 17,
            d_model: 64,
            heads: 4,
            depth: 2,
            mode: Mode::Smd,
            temporal_radius: 1,
            lambda_t: 0.1,
            lambda_m: 1.0,
            joint_weights: vec![1.0; 17],
            base_lr: 7e-5,
            lr_decay: 0.99,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            train_steps: 2000,
            seed: 42,
            layer_norm_eps: 1e-5,
            skeleton: None,
        }
    }

    pub fn d_ff(&self) -> usize {
        2 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.joints == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(KtpError::Validation(
                "frames, joints, d_model, and heads must all be >= 1".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(KtpError::Validation(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.temporal_radius == 0 {
            return Err(KtpError::Validation("temporal_radius must be >= 1".into()));
        }
        if self.joint_weights.len() != self.joints {
            return Err(KtpError::Validation(format!(
                "joint_weights has {} entries, expected {}",
                self.joint_weights.len(),
                self.joints
            )));
        }
        if self.joint_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(KtpError::Validation(
                "joint_weights must be finite and non-negative".into(),
            ));
        }
        for (name, v) in [
            ("lambda_t", self.lambda_t),
            ("lambda_m", self.lambda_m),
            ("base_lr", self.base_lr),
            ("lr_decay", self.lr_decay),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
            ("layer_norm_eps", self.layer_norm_eps),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(KtpError::Validation(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn load_skeleton(&self) -> Result<Skeleton> {
        let sk = match &self.skeleton {
            None => Skeleton::default_h36m17(),
            Some(path) => Skeleton::load(Path::new(path))?,
        };
        if sk.joints() != self.joints {
            return Err(KtpError::Validation(format!(
                "skeleton has {} joints but config expects {}",
                sk.joints(),
                self.joints
            )));
        }
        Ok(sk)
    }
}

/// Fixed local topologies used by the prior stages.
#[derive(Debug, Clone)]
pub struct Topologies {
    pub spatial_local: Tensor,
    pub temporal_local: Tensor,
}

pub fn build_topologies(config: &ModelConfig, skeleton: &Skeleton) -> Result<Topologies> {
    if skeleton.joints() != config.joints {
        return Err(KtpError::Validation(format!(
            "skeleton has {} joints but config expects {}",
            skeleton.joints(),
            config.joints
        )));
    }
    Ok(Topologies {
        spatial_local: build_spatial_local(skeleton),
        temporal_local: build_temporal_local(config.frames, config.temporal_radius)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub qkv: Tensor,
    pub out_proj: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpaBlockParams {
    pub transform: Tensor,
    pub global: Tensor,
    pub modulation: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub embed: Tensor,
    pub kpa_global: Option<Tensor>,
    pub kpa_modulation: Option<Tensor>,
    pub spatial_pos: Tensor,
    pub tpa_blocks: Vec<TpaBlockParams>,
    pub temporal_pos: Tensor,
    pub entry_spatial: EncoderParams,
    pub entry_temporal: EncoderParams,
    pub stacks: Vec<(EncoderParams, EncoderParams)>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

// Initialization streams; one ChaCha stream per group keeps shared groups
// identical across modes and stack depths for a given seed.
const STREAM_EMBED: u64 = 0;
const STREAM_KPA_GLOBAL: u64 = 1;
const STREAM_TPA_BASE: u64 = 4; // 3 streams per block: transform, global, modulation
const STREAM_ENTRY_SPATIAL: u64 = 11;
const STREAM_ENTRY_TEMPORAL: u64 = 12;
const STREAM_HEAD: u64 = 13;
const STREAM_STACK_BASE: u64 = 15; // 2 streams per stacked pair

const GLOBAL_INIT_RANGE: f64 = 1e-2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

fn init_encoder(rng: &mut ChaCha8Rng, d: usize, f: usize) -> EncoderParams {
    let bound = 1.0 / (d as f64).sqrt();
    EncoderParams {
        qkv: uniform_tensor(rng, vec![d, 3 * d], bound),
        out_proj: uniform_tensor(rng, vec![d, d], bound),
        ln_gain: Tensor::full(vec![d], 1.0),
        ln_bias: Tensor::zeros(vec![d]),
        mlp_w1: uniform_tensor(rng, vec![d, f], bound),
        mlp_b1: Tensor::zeros(vec![f]),
        mlp_w2: uniform_tensor(rng, vec![f, d], bound),
        mlp_b2: Tensor::zeros(vec![d]),
    }
}

fn zero_encoder(d: usize, f: usize) -> EncoderParams {
    EncoderParams {
        qkv: Tensor::zeros(vec![d, 3 * d]),
        out_proj: Tensor::zeros(vec![d, d]),
        ln_gain: Tensor::zeros(vec![d]),
        ln_bias: Tensor::zeros(vec![d]),
        mlp_w1: Tensor::zeros(vec![d, f]),
        mlp_b1: Tensor::zeros(vec![f]),
        mlp_w2: Tensor::zeros(vec![f, d]),
        mlp_b2: Tensor::zeros(vec![d]),
    }
}

impl ModelParameters {
    /// Seeded initialization:
    /// * matrices: uniform in ±1/√d
    /// * learned global adjustments: uniform in ±1e-2
    /// * TPA transforms: identity plus uniform ±1e-2
    /// * modulations: ones; position embeddings: zeros; biases: zeros
    pub fn seeded(config: &ModelConfig) -> Result<ModelParameters> {
        config.validate()?;
        let (t, n, d, f) = (config.frames, config.joints, config.d_model, config.d_ff());
        let seed = config.seed;
        let bound = 1.0 / (d as f64).sqrt();

        let embed = uniform_tensor(&mut stream_rng(seed, STREAM_EMBED), vec![2, d], bound);
        let (kpa_global, kpa_modulation) = if config.mode.has_prior() {
            (
                Some(uniform_tensor(
                    &mut stream_rng(seed, STREAM_KPA_GLOBAL),
                    vec![n, n],
                    GLOBAL_INIT_RANGE,
                )),
                Some(Tensor::full(vec![n, d], 1.0)),
            )
        } else {
            (None, None)
        };

        let mut tpa_blocks = Vec::new();
        for i in 0..config.mode.tpa_blocks() {
            let base = STREAM_TPA_BASE + 3 * i as u64;
            let mut transform = uniform_tensor(
                &mut stream_rng(seed, base),
                vec![d, d],
                GLOBAL_INIT_RANGE,
            );
            for k in 0..d {
                transform.data_mut()[k * d + k] += 1.0;
            }
            tpa_blocks.push(TpaBlockParams {
                transform,
                global: uniform_tensor(
                    &mut stream_rng(seed, base + 1),
                    vec![t, t],
                    GLOBAL_INIT_RANGE,
                ),
                modulation: Tensor::full(vec![t, d], 1.0),
            });
        }

        let entry_spatial = init_encoder(&mut stream_rng(seed, STREAM_ENTRY_SPATIAL), d, f);
        let entry_temporal = init_encoder(&mut stream_rng(seed, STREAM_ENTRY_TEMPORAL), d, f);
        let mut stacks = Vec::new();
        for i in 0..config.depth {
            let base = STREAM_STACK_BASE + 2 * i as u64;
            stacks.push((
                init_encoder(&mut stream_rng(seed, base), d, f),
                init_encoder(&mut stream_rng(seed, base + 1), d, f),
            ));
        }

        let head_w = uniform_tensor(
            &mut stream_rng(seed, STREAM_HEAD),
            vec![d, OUTPUT_DIM],
            bound,
        );

        Ok(ModelParameters {
            embed,
            kpa_global,
            kpa_modulation,
            spatial_pos: Tensor::zeros(vec![n, d]),
            tpa_blocks,
            temporal_pos: Tensor::zeros(vec![t, d]),
            entry_spatial,
            entry_temporal,
            stacks,
            head_w,
            head_b: Tensor::zeros(vec![OUTPUT_DIM]),
        })
    }

    /// All-zero parameters with the shapes the config dictates; the
    /// checkpoint loader fills these in enumeration order.
    pub fn zeros(config: &ModelConfig) -> Result<ModelParameters> {
        config.validate()?;
        let (t, n, d, f) = (config.frames, config.joints, config.d_model, config.d_ff());
        let (kpa_global, kpa_modulation) = if config.mode.has_prior() {
            (
                Some(Tensor::zeros(vec![n, n])),
                Some(Tensor::zeros(vec![n, d])),
            )
        } else {
            (None, None)
        };
        Ok(ModelParameters {
            embed: Tensor::zeros(vec![2, d]),
            kpa_global,
            kpa_modulation,
            spatial_pos: Tensor::zeros(vec![n, d]),
            tpa_blocks: (0..config.mode.tpa_blocks())
                .map(|_| TpaBlockParams {
                    transform: Tensor::zeros(vec![d, d]),
                    global: Tensor::zeros(vec![t, t]),
                    modulation: Tensor::zeros(vec![t, d]),
                })
                .collect(),
            temporal_pos: Tensor::zeros(vec![t, d]),
            entry_spatial: zero_encoder(d, f),
            entry_temporal: zero_encoder(d, f),
            stacks: (0..config.depth)
                .map(|_| (zero_encoder(d, f), zero_encoder(d, f)))
                .collect(),
            head_w: Tensor::zeros(vec![d, OUTPUT_DIM]),
            head_b: Tensor::zeros(vec![OUTPUT_DIM]),
        })
    }

    /// Walk all parameters in the stable enumeration order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor)) {
        let visit_encoder = |prefix: &str, e: &EncoderParams, f: &mut dyn FnMut(&str, &Tensor)| {
            f(&format!("{prefix}_qkv"), &e.qkv);
            f(&format!("{prefix}_out_proj"), &e.out_proj);
            f(&format!("{prefix}_ln_gain"), &e.ln_gain);
            f(&format!("{prefix}_ln_bias"), &e.ln_bias);
            f(&format!("{prefix}_mlp_w1"), &e.mlp_w1);
            f(&format!("{prefix}_mlp_b1"), &e.mlp_b1);
            f(&format!("{prefix}_mlp_w2"), &e.mlp_w2);
            f(&format!("{prefix}_mlp_b2"), &e.mlp_b2);
        };
        f("embed", &self.embed);
        if let Some(g) = &self.kpa_global {
            f("kpa_global", g);
        }
        if let Some(m) = &self.kpa_modulation {
            f("kpa_modulation", m);
        }
        f("spatial_pos", &self.spatial_pos);
        for (i, b) in self.tpa_blocks.iter().enumerate() {
            f(&format!("tpa{i}_transform"), &b.transform);
            f(&format!("tpa{i}_global"), &b.global);
            f(&format!("tpa{i}_modulation"), &b.modulation);
        }
        f("temporal_pos", &self.temporal_pos);
        visit_encoder("entry_spatial", &self.entry_spatial, &mut f);
        visit_encoder("entry_temporal", &self.entry_temporal, &mut f);
        for (i, (sp, tp)) in self.stacks.iter().enumerate() {
            visit_encoder(&format!("stack{i}_spatial"), sp, &mut f);
            visit_encoder(&format!("stack{i}_temporal"), tp, &mut f);
        }
        f("head_w", &self.head_w);
        f("head_b", &self.head_b);
    }

    /// Mutable walk, same order as [`ModelParameters::visit`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        let visit_encoder =
            |prefix: &str, e: &mut EncoderParams, f: &mut dyn FnMut(&str, &mut Tensor)| {
                f(&format!("{prefix}_qkv"), &mut e.qkv);
                f(&format!("{prefix}_out_proj"), &mut e.out_proj);
                f(&format!("{prefix}_ln_gain"), &mut e.ln_gain);
                f(&format!("{prefix}_ln_bias"), &mut e.ln_bias);
                f(&format!("{prefix}_mlp_w1"), &mut e.mlp_w1);
                f(&format!("{prefix}_mlp_b1"), &mut e.mlp_b1);
                f(&format!("{prefix}_mlp_w2"), &mut e.mlp_w2);
                f(&format!("{prefix}_mlp_b2"), &mut e.mlp_b2);
            };
        f("embed", &mut self.embed);
        if let Some(g) = &mut self.kpa_global {
            f("kpa_global", g);
        }
        if let Some(m) = &mut self.kpa_modulation {
            f("kpa_modulation", m);
        }
        f("spatial_pos", &mut self.spatial_pos);
        for (i, b) in self.tpa_blocks.iter_mut().enumerate() {
            f(&format!("tpa{i}_transform"), &mut b.transform);
            f(&format!("tpa{i}_global"), &mut b.global);
            f(&format!("tpa{i}_modulation"), &mut b.modulation);
        }
        f("temporal_pos", &mut self.temporal_pos);
        visit_encoder("entry_spatial", &mut self.entry_spatial, &mut f);
        visit_encoder("entry_temporal", &mut self.entry_temporal, &mut f);
        for (i, (sp, tp)) in self.stacks.iter_mut().enumerate() {
            visit_encoder(&format!("stack{i}_spatial"), sp, &mut f);
            visit_encoder(&format!("stack{i}_temporal"), tp, &mut f);
        }
        f("head_w", &mut self.head_w);
        f("head_b", &mut self.head_b);
    }

    pub fn count_parameters(&self) -> usize {
        let mut total = 0;
        self.visit(|_, t| total += t.numel());
        total
    }

    /// Scalars in the KPA group: embedding, global adjustment, modulation,
    /// spatial position embedding. `None` when the mode has no prior.
    pub fn count_kpa_parameters(&self) -> Option<usize> {
        self.kpa_global.as_ref()?;
        let mut total = self.embed.numel() + self.spatial_pos.numel();
        total += self.kpa_global.as_ref().map_or(0, Tensor::numel);
        total += self.kpa_modulation.as_ref().map_or(0, Tensor::numel);
        Some(total)
    }
}

/// Closed-form parameter count for a config; must agree with the
/// enumerated count of [`ModelParameters::seeded`].
///
/// Per encoder block (f = 2d): `3d² + d² + 2d + d·f + f + f·d + d = 8d² + 5d`.
/// Backbone: `2d + N·d + T·d + 2(depth+1)(8d² + 5d) + 3d + 3`.
/// KPA adds `N² + N·d`; each TPA block adds `d² + T² + T·d`.
pub fn analytic_param_count(config: &ModelConfig) -> usize {
    let (t, n, d) = (config.frames, config.joints, config.d_model);
    let enc = 8 * d * d + 5 * d;
    let mut total = 2 * d + n * d + t * d + 2 * (config.depth + 1) * enc + OUTPUT_DIM * d + OUTPUT_DIM;
    if config.mode.has_prior() {
        total += n * n + n * d;
    }
    total += config.mode.tpa_blocks() * (d * d + t * t + t * d);
    total
}

/// Forward-pass cost in FLOPs, counting every matrix contraction at 2·m·n·k
/// and nothing else (elementwise gating, softmax, and normalization are
/// excluded from the tally).
pub fn count_flops(config: &ModelConfig) -> u64 {
    let (t, n, d) = (
        config.frames as u64,
        config.joints as u64,
        config.d_model as u64,
    );
    let s_e = t * n;
    let f = 2 * d;
    // per encoder block: qkv + output projection + two MLP matmuls
    let block_dense = 6 * s_e * d * d + 2 * s_e * d * d + 4 * s_e * d * f;
    let spatial_block = block_dense + 4 * t * n * n * d; // scores + attn·V
    let temporal_block = block_dense + 4 * n * t * t * d;
    let pairs = (config.depth as u64 + 1) * (spatial_block + temporal_block);

    let embed = 4 * s_e * d; // 2 · (T·N) · 2 · d
    let head = 2 * s_e * d * OUTPUT_DIM as u64;
    let kpa_mix = 2 * n * n * (t * d);
    let tpa_block = 2 * s_e * d * d + 2 * t * t * (n * d);

    let mut total = embed + pairs + head;
    if config.mode.has_prior() {
        total += kpa_mix;
    }
    total += config.mode.tpa_blocks() as u64 * tpa_block;
    if config.mode == Mode::Pmd {
        total += embed; // the parallel branch embeds the input a second time
    }
    total
}

// ---- tape binding and forward ----

pub struct BoundEncoder {
    pub qkv: VarId,
    pub out_proj: VarId,
    pub ln_gain: VarId,
    pub ln_bias: VarId,
    pub mlp_w1: VarId,
    pub mlp_b1: VarId,
    pub mlp_w2: VarId,
    pub mlp_b2: VarId,
}

pub struct BoundTpaBlock {
    pub transform: VarId,
    pub global: VarId,
    pub modulation: VarId,
}

/// Tape-registered mirror of [`ModelParameters`]; `named` lists every
/// leaf in enumeration order for gradient collection.
pub struct BoundModel {
    pub embed: VarId,
    pub kpa_global: Option<VarId>,
    pub kpa_modulation: Option<VarId>,
    pub spatial_pos: VarId,
    pub tpa_blocks: Vec<BoundTpaBlock>,
    pub temporal_pos: VarId,
    pub entry_spatial: BoundEncoder,
    pub entry_temporal: BoundEncoder,
    pub stacks: Vec<(BoundEncoder, BoundEncoder)>,
    pub head_w: VarId,
    pub head_b: VarId,
    pub named: Vec<(String, VarId)>,
}

pub fn bind(tape: &mut Tape, params: &ModelParameters) -> BoundModel {
    let mut named: Vec<(String, VarId)> = Vec::new();
    let reg = |tape: &mut Tape, named: &mut Vec<(String, VarId)>, name: String, t: &Tensor| {
        let id = tape.param(t.clone());
        named.push((name, id));
        id
    };
    let bind_encoder =
        |tape: &mut Tape, named: &mut Vec<(String, VarId)>, prefix: &str, e: &EncoderParams| {
            BoundEncoder {
                qkv: reg(tape, named, format!("{prefix}_qkv"), &e.qkv),
                out_proj: reg(tape, named, format!("{prefix}_out_proj"), &e.out_proj),
                ln_gain: reg(tape, named, format!("{prefix}_ln_gain"), &e.ln_gain),
                ln_bias: reg(tape, named, format!("{prefix}_ln_bias"), &e.ln_bias),
                mlp_w1: reg(tape, named, format!("{prefix}_mlp_w1"), &e.mlp_w1),
                mlp_b1: reg(tape, named, format!("{prefix}_mlp_b1"), &e.mlp_b1),
                mlp_w2: reg(tape, named, format!("{prefix}_mlp_w2"), &e.mlp_w2),
                mlp_b2: reg(tape, named, format!("{prefix}_mlp_b2"), &e.mlp_b2),
            }
        };

    let embed = reg(tape, &mut named, "embed".into(), &params.embed);
    let kpa_global = params
        .kpa_global
        .as_ref()
        .map(|g| reg(tape, &mut named, "kpa_global".into(), g));
    let kpa_modulation = params
        .kpa_modulation
        .as_ref()
        .map(|m| reg(tape, &mut named, "kpa_modulation".into(), m));
    let spatial_pos = reg(tape, &mut named, "spatial_pos".into(), &params.spatial_pos);
    let tpa_blocks = params
        .tpa_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| BoundTpaBlock {
            transform: reg(tape, &mut named, format!("tpa{i}_transform"), &b.transform),
            global: reg(tape, &mut named, format!("tpa{i}_global"), &b.global),
            modulation: reg(tape, &mut named, format!("tpa{i}_modulation"), &b.modulation),
        })
        .collect();
    let temporal_pos = reg(
        tape,
        &mut named,
        "temporal_pos".into(),
        &params.temporal_pos,
    );
    let entry_spatial = bind_encoder(tape, &mut named, "entry_spatial", &params.entry_spatial);
    let entry_temporal = bind_encoder(tape, &mut named, "entry_temporal", &params.entry_temporal);
    let stacks = params
        .stacks
        .iter()
        .enumerate()
        .map(|(i, (sp, tp))| {
            (
                bind_encoder(tape, &mut named, &format!("stack{i}_spatial"), sp),
                bind_encoder(tape, &mut named, &format!("stack{i}_temporal"), tp),
            )
        })
        .collect();
    let head_w = reg(tape, &mut named, "head_w".into(), &params.head_w);
    let head_b = reg(tape, &mut named, "head_b".into(), &params.head_b);

    BoundModel {
        embed,
        kpa_global,
        kpa_modulation,
        spatial_pos,
        tpa_blocks,
        temporal_pos,
        entry_spatial,
        entry_temporal,
        stacks,
        head_w,
        head_b,
        named,
    }
}

pub struct ForwardArtifacts {
    /// Predicted 3D positions, `[T, N, 3]`, in model units.
    pub pred: VarId,
    /// Entry spatial attention, head-resolved, frame-averaged: `[h, N, N]`.
    pub attn_spatial: Tensor,
    /// Entry temporal attention, head-resolved, joint-averaged: `[h, T, T]`.
    pub attn_temporal: Tensor,
}

fn encoder_vars(e: &BoundEncoder, heads: usize, ln_eps: f64) -> EncoderVars {
    EncoderVars {
        mhsa: MhsaVars {
            qkv: e.qkv,
            out: e.out_proj,
            heads,
        },
        ln_gain: e.ln_gain,
        ln_bias: e.ln_bias,
        mlp_w1: e.mlp_w1,
        mlp_b1: e.mlp_b1,
        mlp_w2: e.mlp_w2,
        mlp_b2: e.mlp_b2,
        ln_eps,
    }
}

/// Average `[B, h, S, S]` attention over the batch axis -> `[h, S, S]`.
/// Rows stay softmax-normalized because averaging preserves row sums.
fn batch_average_attention(attn: &Tensor) -> Tensor {
    let shape = attn.shape();
    let (b, h, s) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(vec![h, s, s]);
    for bb in 0..b {
        for rest in 0..h * s * s {
            out.data_mut()[rest] += attn.data()[bb * h * s * s + rest];
        }
    }
    for v in out.data_mut() {
        *v /= b as f64;
    }
    out
}

/// The head-averaged attention maps used for export: `[N, N]` and `[T, T]`.
pub fn extract_attention(artifacts: &ForwardArtifacts) -> (Tensor, Tensor) {
    let avg_heads = |t: &Tensor| -> Tensor {
        let shape = t.shape();
        let (h, s) = (shape[0], shape[1]);
        let mut out = Tensor::zeros(vec![s, s]);
        for hh in 0..h {
            for i in 0..s * s {
                out.data_mut()[i] += t.data()[hh * s * s + i];
            }
        }
        for v in out.data_mut() {
            *v /= h as f64;
        }
        out
    };
    (
        avg_heads(&artifacts.attn_spatial),
        avg_heads(&artifacts.attn_temporal),
    )
}

/// Run the configured wiring mode over `[T, N, 2]` input tokens.
///
/// The returned prediction is `[T, N, 3]`. Entry-block attention maps are
/// captured as values; prior parameters that a mode never touches receive
/// exactly zero gradient because they never enter the graph.
pub fn forward(
    tape: &mut Tape,
    bound: &BoundModel,
    topo: &Topologies,
    x: VarId,
    config: &ModelConfig,
) -> Result<ForwardArtifacts> {
    let shape = tape.value(x).shape().to_vec();
    if shape != [config.frames, config.joints, 2] {
        return Err(KtpError::Validation(format!(
            "forward expects input [{}, {}, 2], got {shape:?}",
            config.frames, config.joints
        )));
    }
    let (t, n, d) = (config.frames, config.joints, config.d_model);
    let heads = config.heads;
    let eps = config.layer_norm_eps;

    let kpa_vars = |tape: &mut Tape| -> Result<KpaVars> {
        let (global, modulation) = match (bound.kpa_global, bound.kpa_modulation) {
            (Some(g), Some(m)) => (g, m),
            _ => {
                return Err(KtpError::Validation(format!(
                    "mode {} needs KPA parameters but the model has none",
                    config.mode
                )));
            }
        };
        Ok(KpaVars {
            embed: bound.embed,
            local: tape.constant(topo.spatial_local.clone()),
            global,
            modulation,
            pos: bound.spatial_pos,
        })
    };
    let tpa_vars = |tape: &mut Tape, count: usize| -> Result<Vec<TpaBlockVars>> {
        if bound.tpa_blocks.len() < count {
            return Err(KtpError::Validation(format!(
                "mode {} needs {count} TPA blocks but the model has {}",
                config.mode,
                bound.tpa_blocks.len()
            )));
        }
        Ok(bound.tpa_blocks[..count]
            .iter()
            .map(|b| TpaBlockVars {
                transform: b.transform,
                local: tape.constant(topo.temporal_local.clone()),
                global: b.global,
                modulation: b.modulation,
            })
            .collect())
    };
    // plain linear embedding with spatial position, [T, N, 2] -> [T, N, d]
    let plain_embed = |tape: &mut Tape, x: VarId| -> Result<VarId> {
        let flat = tape.reshape(x, vec![t * n, 2])?;
        let emb = tape.matmul(flat, bound.embed)?;
        let tok = tape.reshape(emb, vec![t, n, d])?;
        let pos = tape.broadcast_to(bound.spatial_pos, vec![t, n, d])?;
        tape.add(tok, pos)
    };
    let add_temporal_pos = |tape: &mut Tape, tok: VarId| -> Result<VarId> {
        let pos = tape.broadcast_to(bound.temporal_pos, vec![n, t, d])?;
        tape.add(tok, pos)
    };

    // Entry pair: each mode routes tokens through the entry spatial
    // encoder (frames-major) and entry temporal encoder (joints-major);
    // attention is captured there. Tokens leave the match joints-major
    // [N, T, d].
    let (tok, attn_spatial, attn_temporal) = match config.mode {
        Mode::Smd | Mode::SmdS => {
            let vars = kpa_vars(tape)?;
            let tok = kpa_forward(tape, x, &vars)?;
            let (tok, attn_s) =
                encoder_block(tape, tok, &encoder_vars(&bound.entry_spatial, heads, eps))?;
            let tok = swap_token_axes(tape, tok)?;
            let blocks = tpa_vars(tape, config.mode.tpa_blocks())?;
            let tok = tpa_stack(tape, tok, &blocks, bound.temporal_pos)?;
            let (tok, attn_t) =
                encoder_block(tape, tok, &encoder_vars(&bound.entry_temporal, heads, eps))?;
            (tok, attn_s, attn_t)
        }
        Mode::Umd => {
            let vars = kpa_vars(tape)?;
            let tok = kpa_forward(tape, x, &vars)?;
            let tok = swap_token_axes(tape, tok)?;
            let blocks = tpa_vars(tape, config.mode.tpa_blocks())?;
            let tok = tpa_stack(tape, tok, &blocks, bound.temporal_pos)?;
            let tok = swap_token_axes(tape, tok)?;
            let (tok, attn_s) =
                encoder_block(tape, tok, &encoder_vars(&bound.entry_spatial, heads, eps))?;
            let tok = swap_token_axes(tape, tok)?;
            let (tok, attn_t) =
                encoder_block(tape, tok, &encoder_vars(&bound.entry_temporal, heads, eps))?;
            (tok, attn_s, attn_t)
        }
        Mode::Pmd => {
            // kinematics branch
            let vars = kpa_vars(tape)?;
            let a = kpa_forward(tape, x, &vars)?;
            let (a, attn_s) =
                encoder_block(tape, a, &encoder_vars(&bound.entry_spatial, heads, eps))?;
            let a = swap_token_axes(tape, a)?;
            // trajectory branch over the shared plain embedding
            let b = plain_embed(tape, x)?;
            let b = swap_token_axes(tape, b)?;
            let blocks = tpa_vars(tape, config.mode.tpa_blocks())?;
            let b = tpa_stack(tape, b, &blocks, bound.temporal_pos)?;
            let tok = tape.add(a, b)?;
            let (tok, attn_t) =
                encoder_block(tape, tok, &encoder_vars(&bound.entry_temporal, heads, eps))?;
            (tok, attn_s, attn_t)
        }
        Mode::Baseline => {
            let tok = plain_embed(tape, x)?;
            let (tok, attn_s) =
                encoder_block(tape, tok, &encoder_vars(&bound.entry_spatial, heads, eps))?;
            let tok = swap_token_axes(tape, tok)?;
            let tok = add_temporal_pos(tape, tok)?;
            let (tok, attn_t) =
                encoder_block(tape, tok, &encoder_vars(&bound.entry_temporal, heads, eps))?;
            (tok, attn_s, attn_t)
        }
    };
    let attn_spatial = batch_average_attention(&attn_spatial);
    let attn_temporal = batch_average_attention(&attn_temporal);

    // stacked pairs, alternating frames-major / joints-major
    let mut tok = tok;
    for (sp, tp) in &bound.stacks {
        tok = swap_token_axes(tape, tok)?;
        let (next, _) = encoder_block(tape, tok, &encoder_vars(sp, heads, eps))?;
        tok = swap_token_axes(tape, next)?;
        let (next, _) = encoder_block(tape, tok, &encoder_vars(tp, heads, eps))?;
        tok = next;
    }

    // regression head, frames-major
    let tok = swap_token_axes(tape, tok)?;
    let flat = tape.reshape(tok, vec![t * n, d])?;
    let proj = tape.matmul(flat, bound.head_w)?;
    let bias = tape.broadcast_to(bound.head_b, vec![t * n, OUTPUT_DIM])?;
    let proj = tape.add(proj, bias)?;
    let pred = tape.reshape(proj, vec![t, n, OUTPUT_DIM])?;

    Ok(ForwardArtifacts {
        pred,
        attn_spatial,
        attn_temporal,
    })
}

/// One-shot inference: builds a private tape and returns plain values.
pub fn predict(
    params: &ModelParameters,
    topo: &Topologies,
    input: &Tensor,
    config: &ModelConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let bound = bind(&mut tape, params);
    let artifacts = forward(&mut tape, &bound, topo, x, config)?;
    Ok((
        tape.value(artifacts.pred).clone(),
        artifacts.attn_spatial,
        artifacts.attn_temporal,
    ))
}

// ---- checkpoint format ----
//
// Little-endian binary:
//   magic  "KTPF"
//   u32    version (1)
//   u32×7  frames, joints, d_model, heads, depth, mode id, temporal radius
//   f64×2  lambda_t, lambda_m
//   u64    skeleton path length, then that many UTF-8 bytes (empty for the
//          bundled skeleton; custom-skeleton checkpoints need the file to
//          stay readable at the recorded path)
//   per parameter in enumeration order: u64 element count, then the
//   elements as f64
// Loading restores a config whose training-only fields take desk defaults.

const CKPT_MAGIC: &[u8; 4] = b"KTPF";
const CKPT_VERSION: u32 = 1;

/// Serialize config header plus parameters into the checkpoint block.
pub(crate) fn checkpoint_bytes(config: &ModelConfig, params: &ModelParameters) -> Vec<u8> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [
        config.frames,
        config.joints,
        config.d_model,
        config.heads,
        config.depth,
        config.mode.id() as usize,
        config.temporal_radius,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&config.lambda_t.to_le_bytes());
    buf.extend_from_slice(&config.lambda_m.to_le_bytes());
    let skel = config.skeleton.as_deref().unwrap_or("");
    buf.extend_from_slice(&(skel.len() as u64).to_le_bytes());
    buf.extend_from_slice(skel.as_bytes());
    params.visit(|_, t| {
        buf.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    buf
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParameters,
) -> Result<()> {
    let buf = checkpoint_bytes(config, params);
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub(crate) struct ByteReader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) offset: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.buf.len() {
            return Err(KtpError::Parse {
                offset: self.offset,
                message: format!(
                    "checkpoint truncated while reading {what}: need {n} bytes, have {}",
                    self.buf.len() - self.offset
                ),
            });
        }
        let slice = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse one checkpoint block starting at the reader's position.
pub(crate) fn parse_checkpoint(r: &mut ByteReader) -> Result<(ModelConfig, ModelParameters)> {
    let magic_off = r.offset;
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(KtpError::Parse {
            offset: magic_off,
            message: format!("bad checkpoint magic {magic:?}"),
        });
    }
    let version_off = r.offset;
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(KtpError::Parse {
            offset: version_off,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let frames = r.u32("frames")? as usize;
    let joints = r.u32("joints")? as usize;
    let d_model = r.u32("d_model")? as usize;
    let heads = r.u32("heads")? as usize;
    let depth = r.u32("depth")? as usize;
    let mode = Mode::from_id(r.u32("mode")?)?;
    let temporal_radius = r.u32("temporal_radius")? as usize;
    let lambda_t = r.f64("lambda_t")?;
    let lambda_m = r.f64("lambda_m")?;
    let skel_len = r.u64("skeleton path length")? as usize;
    let skel_off = r.offset;
    let skel_bytes = r.take(skel_len, "skeleton path")?;
    let skeleton = match std::str::from_utf8(skel_bytes) {
        Ok("") => None,
        Ok(path) => Some(path.to_string()),
        Err(_) => {
            return Err(KtpError::Parse {
                offset: skel_off,
                message: "skeleton path is not UTF-8".into(),
            });
        }
    };

    let mut config = ModelConfig::desk();
    config.frames = frames;
    config.joints = joints;
    config.d_model = d_model;
    config.heads = heads;
    config.depth = depth;
    config.mode = mode;
    config.temporal_radius = temporal_radius;
    config.lambda_t = lambda_t;
    config.lambda_m = lambda_m;
    config.skeleton = skeleton;
    config.joint_weights = vec![1.0; joints];
    config.validate()?;

    let mut params = ModelParameters::zeros(&config)?;
    let mut failure: Option<KtpError> = None;
    params.visit_mut(|name, tensor| {
        if failure.is_some() {
            return;
        }
        let want = tensor.numel() as u64;
        match r.u64(name) {
            Ok(count) if count == want => {
                for i in 0..tensor.numel() {
                    match r.f64(name) {
                        Ok(v) => tensor.data_mut()[i] = v,
                        Err(e) => {
                            failure = Some(e);
                            return;
                        }
                    }
                }
            }
            Ok(count) => {
                failure = Some(KtpError::Parse {
                    offset: r.offset,
                    message: format!("parameter {name}: expected {want} values, got {count}"),
                });
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParameters)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let mut r = ByteReader {
        buf: &bytes,
        offset: 0,
    };
    let (config, params) = parse_checkpoint(&mut r)?;
    if r.offset != bytes.len() {
        return Err(KtpError::Parse {
            offset: r.offset,
            message: format!("{} trailing bytes after parameters", bytes.len() - r.offset),
        });
    }
    Ok((config, params))
}
