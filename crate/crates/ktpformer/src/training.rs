//! Losses, the Adam optimizer, the training loop, and the gradient audit.
//!
//! The objective is `L = L_W + lambda_t * L_T + lambda_m * L_M` where
//!
//! * `L_W`: mean over frames and joints of the weighted Euclidean position
//!   error, weights per joint;
//! * `L_T`: mean over frame transitions and joints of the squared velocity
//!   of the prediction (a smoothness prior, no target involved);
//! * `L_M`: mean over frame transitions and joints of the Euclidean error
//!   between predicted and target velocities.
//!
//! Single-frame clips have no velocities; both velocity terms become
//! constant zero and a warning is logged once per call site.
//!
//! Targets enter the loop root-relative in metres; see [`prepare_clip`].

use std::io::{Read, Write};
use std::path::Path;

use crate::clip::PoseSequence;
use crate::error::{io_err, KtpError, Result};
use crate::model::{
    bind, checkpoint_bytes, forward, parse_checkpoint, ByteReader, ModelConfig, ModelParameters,
    Topologies,
};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Millimetres per model unit: targets are scaled to metres for training
/// and predictions back to millimetres for evaluation.
pub const MM_PER_UNIT: f64 = 1000.0;

pub struct LossParts {
    pub total: VarId,
    pub weighted: VarId,
    pub temporal: VarId,
    pub motion: VarId,
}

fn frame_velocity(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let t = tape.value(x).shape()[0];
    let tail = tape.narrow(x, 0, 1, t - 1)?;
    let head = tape.narrow(x, 0, 0, t - 1)?;
    tape.sub(tail, head)
}

/// Weighted mean per-joint position error of `pred` against `gt`, both
/// `[T, N, 3]`; `weights` has length N.
pub fn weighted_position_loss(
    tape: &mut Tape,
    pred: VarId,
    gt: VarId,
    weights: &Tensor,
) -> Result<VarId> {
    let shape = tape.value(pred).shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(KtpError::Validation(format!(
            "position loss expects [T, N, 3] predictions, got {shape:?}"
        )));
    }
    if weights.shape() != [shape[1]] {
        return Err(KtpError::ShapeMismatch {
            op: "weighted_position_loss",
            left: shape,
            right: weights.shape().to_vec(),
        });
    }
    let (t, n) = (shape[0], shape[1]);
    let diff = tape.sub(pred, gt)?;
    let dist = tape.norm_lastaxis(diff)?; // [T, N]
    let w = tape.constant(weights.clone());
    let w = tape.broadcast_to(w, vec![t, n])?;
    let weighted = tape.mul(dist, w)?;
    let sum = tape.sum_all(weighted)?;
    tape.scale(sum, 1.0 / (t as f64 * n as f64))
}

/// Mean squared velocity of the prediction over frame transitions.
pub fn temporal_consistency_loss(tape: &mut Tape, pred: VarId) -> Result<VarId> {
    let shape = tape.value(pred).shape().to_vec();
    let (t, n) = (shape[0], shape[1]);
    if t < 2 {
        log::warn!("temporal consistency needs >= 2 frames, got {t}; term is constant zero");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let v = frame_velocity(tape, pred)?;
    let sq = tape.mul(v, v)?;
    let sum = tape.sum_all(sq)?;
    tape.scale(sum, 1.0 / ((t - 1) as f64 * n as f64))
}

/// Mean per-joint velocity error between prediction and target.
pub fn motion_consistency_loss(tape: &mut Tape, pred: VarId, gt: VarId) -> Result<VarId> {
    let shape = tape.value(pred).shape().to_vec();
    let (t, n) = (shape[0], shape[1]);
    if t < 2 {
        log::warn!("motion consistency needs >= 2 frames, got {t}; term is constant zero");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let vp = frame_velocity(tape, pred)?;
    let vg = frame_velocity(tape, gt)?;
    let diff = tape.sub(vp, vg)?;
    let dist = tape.norm_lastaxis(diff)?;
    let sum = tape.sum_all(dist)?;
    tape.scale(sum, 1.0 / ((t - 1) as f64 * n as f64))
}

pub fn total_loss(
    tape: &mut Tape,
    pred: VarId,
    gt: VarId,
    config: &ModelConfig,
) -> Result<LossParts> {
    let weights = Tensor::new(vec![config.joints], config.joint_weights.clone())?;
    let weighted = weighted_position_loss(tape, pred, gt, &weights)?;
    let temporal = temporal_consistency_loss(tape, pred)?;
    let motion = motion_consistency_loss(tape, pred, gt)?;
    let t_term = tape.scale(temporal, config.lambda_t)?;
    let m_term = tape.scale(motion, config.lambda_m)?;
    let partial = tape.add(weighted, t_term)?;
    let total = tape.add(partial, m_term)?;
    Ok(LossParts {
        total,
        weighted,
        temporal,
        motion,
    })
}

/// Turn a 2D/3D clip pair into training tensors.
///
/// The 2D input must be in `norm` units and the 3D target in `mm`. The
/// target is root-centered per frame (joint 0 moves to the origin) and
/// scaled to metres.
pub fn prepare_clip(
    input2d: &PoseSequence,
    target3d: &PoseSequence,
) -> Result<(Tensor, Tensor)> {
    input2d.validate()?;
    target3d.validate()?;
    if input2d.dim() != 2 || input2d.unit != "norm" {
        return Err(KtpError::Validation(format!(
            "2D input must be dim 2 in norm units, got dim {} unit {}",
            input2d.dim(),
            input2d.unit
        )));
    }
    if target3d.dim() != 3 || target3d.unit != "mm" {
        return Err(KtpError::Validation(format!(
            "3D target must be dim 3 in mm units, got dim {} unit {}",
            target3d.dim(),
            target3d.unit
        )));
    }
    if input2d.frames() != target3d.frames() || input2d.joints() != target3d.joints() {
        return Err(KtpError::ShapeMismatch {
            op: "prepare_clip",
            left: input2d.data.shape().to_vec(),
            right: target3d.data.shape().to_vec(),
        });
    }
    let (t, n) = (target3d.frames(), target3d.joints());
    let mut target = target3d.data.clone();
    for frame in 0..t {
        let root = [
            target.data()[(frame * n) * 3],
            target.data()[(frame * n) * 3 + 1],
            target.data()[(frame * n) * 3 + 2],
        ];
        for joint in 0..n {
            for c in 0..3 {
                let idx = (frame * n + joint) * 3 + c;
                target.data_mut()[idx] = (target.data()[idx] - root[c]) / MM_PER_UNIT;
            }
        }
    }
    Ok((input2d.data.clone(), target))
}

/// Learning rate after `epoch` completed passes over the clip set.
pub fn lr_at(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

// ---- Adam ----

struct AdamSlot {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected Adam; slots align with the parameter enumeration order.
pub struct AdamState {
    pub t: u64,
    slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> AdamState {
        let mut slots = Vec::new();
        params.visit(|name, tensor| {
            slots.push(AdamSlot {
                name: name.to_string(),
                m: vec![0.0; tensor.numel()],
                v: vec![0.0; tensor.numel()],
            });
        });
        AdamState { t: 0, slots }
    }

    /// One update over all parameters. `grads` must be in enumeration
    /// order (as produced by walking `BoundModel::named`).
    pub fn step(
        &mut self,
        params: &mut ModelParameters,
        grads: &[(String, Tensor)],
        lr: f64,
        config: &ModelConfig,
    ) -> Result<()> {
        let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
        self.t += 1;
        let t = self.t;
        let corr1 = 1.0 - b1.powi(t as i32);
        let corr2 = 1.0 - b2.powi(t as i32);

        let mut idx = 0usize;
        let mut failure: Option<KtpError> = None;
        params.visit_mut(|name, tensor| {
            if failure.is_some() {
                return;
            }
            let Some((gname, grad)) = grads.get(idx) else {
                failure = Some(KtpError::Validation(format!(
                    "missing gradient for parameter {name}"
                )));
                return;
            };
            let slot = &mut self.slots[idx];
            if gname != name || slot.name != name {
                failure = Some(KtpError::Validation(format!(
                    "gradient order mismatch: parameter {name}, gradient {gname}, slot {}",
                    slot.name
                )));
                return;
            }
            if grad.shape() != tensor.shape() {
                failure = Some(KtpError::ShapeMismatch {
                    op: "adam_step",
                    left: tensor.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
                return;
            }
            if !grad.is_finite() {
                failure = Some(KtpError::Numerical(format!(
                    "gradient for {name} is not finite at optimizer step {t}"
                )));
                return;
            }
            for (i, g) in grad.data().iter().enumerate() {
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let m_hat = slot.m[i] / corr1;
                let v_hat = slot.v[i] / corr2;
                tensor.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if idx != grads.len() {
            return Err(KtpError::Validation(format!(
                "got {} gradients for {} parameters",
                grads.len(),
                idx
            )));
        }
        Ok(())
    }
}

// ---- trainer ----

pub struct TrainingClip {
    pub name: String,
    /// `[T, N, 2]`, norm units.
    pub input: Tensor,
    /// `[T, N, 3]`, root-relative metres.
    pub target: Tensor,
}

pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_w: f64,
    pub loss_t: f64,
    pub loss_m: f64,
}

pub const LOG_HEADER: &str = "step,epoch,lr,loss_total,loss_w,loss_t,loss_m";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.loss_total, self.loss_w, self.loss_t, self.loss_m
        )
    }
}

pub struct Trainer {
    pub config: ModelConfig,
    pub params: ModelParameters,
    pub adam: AdamState,
    pub topo: Topologies,
    pub clips: Vec<TrainingClip>,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: ModelConfig, clips: Vec<TrainingClip>) -> Result<Trainer> {
        config.validate()?;
        if clips.is_empty() {
            return Err(KtpError::Validation("training needs at least one clip".into()));
        }
        for clip in &clips {
            if clip.input.shape() != [config.frames, config.joints, 2]
                || clip.target.shape() != [config.frames, config.joints, 3]
            {
                return Err(KtpError::Validation(format!(
                    "clip {} has shapes {:?}/{:?}, config expects [{}, {}, 2|3]",
                    clip.name,
                    clip.input.shape(),
                    clip.target.shape(),
                    config.frames,
                    config.joints
                )));
            }
        }
        let skeleton = config.load_skeleton()?;
        let topo = crate::model::build_topologies(&config, &skeleton)?;
        let params = ModelParameters::seeded(&config)?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            config,
            params,
            adam,
            topo,
            clips,
            step: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.step / self.clips.len()
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.config.base_lr, self.config.lr_decay, self.epoch())
    }

    /// One forward/backward/update pass over the next clip in rotation.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let clip_idx = self.step % self.clips.len();
        let epoch = self.epoch();
        let lr = self.lr();

        let mut tape = Tape::new();
        let x = tape.constant(self.clips[clip_idx].input.clone());
        let gt = tape.constant(self.clips[clip_idx].target.clone());
        let bound = bind(&mut tape, &self.params);
        let artifacts = forward(&mut tape, &bound, &self.topo, x, &self.config)?;
        let losses = total_loss(&mut tape, artifacts.pred, gt, &self.config)?;

        let record = StepRecord {
            step: self.step,
            epoch,
            lr,
            loss_total: tape.value(losses.total).data()[0],
            loss_w: tape.value(losses.weighted).data()[0],
            loss_t: tape.value(losses.temporal).data()[0],
            loss_m: tape.value(losses.motion).data()[0],
        };
        if !record.loss_total.is_finite() {
            return Err(KtpError::Numerical(format!(
                "loss is not finite at step {} (clip {})",
                self.step, self.clips[clip_idx].name
            )));
        }

        tape.backward(losses.total)?;
        let grads: Vec<(String, Tensor)> = bound
            .named
            .iter()
            .map(|(name, id)| (name.clone(), tape.grad(*id)))
            .collect();
        self.adam.step(&mut self.params, &grads, lr, &self.config)?;
        self.step += 1;
        Ok(record)
    }

    /// Run `steps` updates, writing one CSV line each to `sink`.
    pub fn run(&mut self, steps: usize, mut sink: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            let record = self.step_once()?;
            if let Some(w) = sink.as_deref_mut() {
                writeln!(w, "{}", record.csv_line())
                    .map_err(|e| KtpError::Validation(format!("log write failed: {e}")))?;
            }
            records.push(record);
        }
        Ok(records)
    }
}

// ---- training state persistence ----
//
// "KTPT" v1, little-endian: magic, u32 version, u64 completed steps, the
// full config as length-prefixed canonical text (the checkpoint header
// alone drops optimizer hyperparameters), the embedded checkpoint block,
// u64 Adam t, then per parameter in enumeration order u64 count + first
// moments + second moments.

const STATE_MAGIC: &[u8; 4] = b"KTPT";
const STATE_VERSION: u32 = 1;

pub fn save_training_state(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(trainer.step as u64).to_le_bytes());
    let config_text = crate::config::serialize_model_config(&trainer.config);
    buf.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&checkpoint_bytes(&trainer.config, &trainer.params));
    buf.extend_from_slice(&trainer.adam.t.to_le_bytes());
    for slot in &trainer.adam.slots {
        buf.extend_from_slice(&(slot.m.len() as u64).to_le_bytes());
        for v in slot.m.iter().chain(slot.v.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Restore a trainer; `clips` must match the set the state was saved with
/// (the rotation index is `step % clips.len()`).
pub fn load_training_state(path: &Path, clips: Vec<TrainingClip>) -> Result<Trainer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let mut r = ByteReader {
        buf: &bytes,
        offset: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != STATE_MAGIC {
        return Err(KtpError::Parse {
            offset: 0,
            message: format!("bad training state magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != STATE_VERSION {
        return Err(KtpError::Parse {
            offset: 4,
            message: format!("unsupported training state version {version}"),
        });
    }
    let step = r.u64("step")? as usize;
    let text_len = r.u64("config length")? as usize;
    let text_off = r.offset;
    let text_bytes = r.take(text_len, "config text")?;
    let config_text = std::str::from_utf8(text_bytes).map_err(|_| KtpError::Parse {
        offset: text_off,
        message: "config text is not UTF-8".into(),
    })?;
    let config = crate::config::parse_model_config(config_text)?;
    let (ckpt_config, params) = parse_checkpoint(&mut r)?;
    if ckpt_config.frames != config.frames
        || ckpt_config.joints != config.joints
        || ckpt_config.d_model != config.d_model
        || ckpt_config.heads != config.heads
        || ckpt_config.depth != config.depth
        || ckpt_config.mode != config.mode
        || ckpt_config.temporal_radius != config.temporal_radius
    {
        return Err(KtpError::Parse {
            offset: text_off,
            message: "training state config disagrees with the embedded checkpoint".into(),
        });
    }
    let t = r.u64("adam t")?;

    let mut adam = AdamState::new(&params);
    adam.t = t;
    for slot in &mut adam.slots {
        let want = slot.m.len() as u64;
        let count = r.u64(&slot.name)?;
        if count != want {
            return Err(KtpError::Parse {
                offset: r.offset,
                message: format!(
                    "optimizer slot {}: expected {want} values, got {count}",
                    slot.name
                ),
            });
        }
        for v in slot.m.iter_mut() {
            *v = r.f64(&slot.name)?;
        }
        for v in slot.v.iter_mut() {
            *v = r.f64(&slot.name)?;
        }
    }
    if r.offset != bytes.len() {
        return Err(KtpError::Parse {
            offset: r.offset,
            message: format!("{} trailing bytes after optimizer state", bytes.len() - r.offset),
        });
    }

    let mut trainer = Trainer::new(config, clips)?;
    trainer.params = params;
    trainer.adam = adam;
    trainer.step = step;
    Ok(trainer)
}

// ---- gradient audit ----

pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const GRADCHECK_FD_STEP: f64 = 1e-6;
pub const GRADCHECK_REL_TOL: f64 = 1e-4;
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-8;

fn loss_value(
    config: &ModelConfig,
    topo: &Topologies,
    params: &ModelParameters,
    input: &Tensor,
    target: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let gt = tape.constant(target.clone());
    let bound = bind(&mut tape, params);
    let artifacts = forward(&mut tape, &bound, topo, x, config)?;
    let losses = total_loss(&mut tape, artifacts.pred, gt, config)?;
    Ok(tape.value(losses.total).data()[0])
}

/// Compare analytic gradients of the total loss against central finite
/// differences on `samples_per_group` elements of every parameter group.
///
/// `corrupt` names a parameter whose analytic gradient is perturbed before
/// comparison; the audit must then fail for that group (negative control
/// for the audit itself).
pub fn gradcheck_model(
    config: &ModelConfig,
    params: &ModelParameters,
    input: &Tensor,
    target: &Tensor,
    samples_per_group: usize,
    corrupt: Option<&str>,
) -> Result<Vec<GroupReport>> {
    config.validate()?;
    if samples_per_group == 0 {
        return Err(KtpError::Validation("samples_per_group must be >= 1".into()));
    }
    let skeleton = config.load_skeleton()?;
    let topo = crate::model::build_topologies(&config, &skeleton)?;

    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let gt = tape.constant(target.clone());
    let bound = bind(&mut tape, params);
    let artifacts = forward(&mut tape, &bound, &topo, x, config)?;
    let losses = total_loss(&mut tape, artifacts.pred, gt, config)?;
    tape.backward(losses.total)?;
    let mut analytic: Vec<(String, Tensor)> = bound
        .named
        .iter()
        .map(|(name, id)| (name.clone(), tape.grad(*id)))
        .collect();
    drop(tape);

    if let Some(victim) = corrupt {
        let Some(entry) = analytic.iter_mut().find(|(n, _)| n == victim) else {
            return Err(KtpError::Validation(format!(
                "corrupt target {victim} is not a parameter of this model"
            )));
        };
        entry.1.data_mut()[0] += 0.5;
    }

    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEECE66D);
    let mut reports = Vec::new();
    let mut scratch = params.clone();
    for (name, grad) in &analytic {
        let numel = grad.numel();
        let count = samples_per_group.min(numel);
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        let mut pass = true;
        for s in 0..count {
            // element 0 is always checked (the corruption hook targets it);
            // the rest spread across the group, jittered inside stripes
            let stride = numel / count;
            let idx = if s == 0 {
                0
            } else {
                (s * stride + sampler.gen_range(0..stride.max(1))).min(numel - 1)
            };

            let mut probe = |delta: f64| -> Result<f64> {
                let mut found = false;
                scratch.visit_mut(|n, t| {
                    if n == name {
                        t.data_mut()[idx] += delta;
                        found = true;
                    }
                });
                if !found {
                    return Err(KtpError::Validation(format!("parameter {name} vanished")));
                }
                let value = loss_value(config, &topo, &scratch, input, target)?;
                scratch.visit_mut(|n, t| {
                    if n == name {
                        t.data_mut()[idx] -= delta;
                    }
                });
                Ok(value)
            };
            let plus = probe(GRADCHECK_FD_STEP)?;
            let minus = probe(-GRADCHECK_FD_STEP)?;
            let fd = (plus - minus) / (2.0 * GRADCHECK_FD_STEP);
            let a = grad.data()[idx];
            let abs = (a - fd).abs();
            let denom = a.abs().max(fd.abs());
            let rel = if denom > 0.0 { abs / denom } else { 0.0 };
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            if abs > GRADCHECK_ABS_FLOOR && rel >= GRADCHECK_REL_TOL {
                pass = false;
            }
        }
        reports.push(GroupReport {
            name: name.clone(),
            checked: count,
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            pass,
        });
    }
    Ok(reports)
}
