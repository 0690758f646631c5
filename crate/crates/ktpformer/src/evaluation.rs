//! Evaluation protocols over millimetre-space predictions.
//!
//! * `mpjpe`: mean Euclidean joint error.
//! * `p_mpjpe`: the same after a per-frame similarity alignment
//!   (rotation with determinant +1, positive scale, translation).
//! * `pck` / `auc`: fraction of joints within a threshold, and the mean of
//!   that fraction over thresholds 0..=150 mm in 5 mm steps (31 values,
//!   inclusive comparison).
//! * `mpjve`: mean Euclidean error between predicted and target frame
//!   velocities.
//!
//! All metrics expect `[T, N, 3]` tensors in millimetres, root-relative.

use nalgebra::{Matrix3, Vector3};

use crate::error::{KtpError, Result};
use crate::tensor::Tensor;
use crate::training::MM_PER_UNIT;

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEP_MM: f64 = 5.0;
pub const AUC_STEPS: usize = 31;

fn check_pose_pair(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let shape = pred.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(KtpError::Validation(format!(
            "{op} expects [T, N, 3] tensors, got {:?}",
            shape
        )));
    }
    if pred.shape() != gt.shape() {
        return Err(KtpError::ShapeMismatch {
            op,
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    Ok((shape[0], shape[1]))
}

fn joint_error(pred: &[f64], gt: &[f64]) -> f64 {
    let dx = pred[0] - gt[0];
    let dy = pred[1] - gt[1];
    let dz = pred[2] - gt[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (t, n) = check_pose_pair(pred, gt, "mpjpe")?;
    let mut sum = 0.0;
    for (p, g) in pred.data().chunks_exact(3).zip(gt.data().chunks_exact(3)) {
        sum += joint_error(p, g);
    }
    Ok(sum / (t * n) as f64)
}

/// Per-joint mean error over frames, length N.
pub fn per_joint_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    let (t, n) = check_pose_pair(pred, gt, "per_joint_mpjpe")?;
    let mut sums = vec![0.0; n];
    for frame in 0..t {
        for joint in 0..n {
            let at = (frame * n + joint) * 3;
            sums[joint] += joint_error(&pred.data()[at..at + 3], &gt.data()[at..at + 3]);
        }
    }
    for s in &mut sums {
        *s /= t as f64;
    }
    Ok(sums)
}

/// Result of aligning one frame onto its target.
pub struct Alignment {
    /// Aligned positions, N×3 flat.
    pub aligned: Vec<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// True when the source frame was too degenerate for a rotation fit
    /// and only the centroid was matched.
    pub fallback: bool,
}

/// Least-squares similarity alignment of `source` onto `target` (both N×3
/// flat): minimizes sum of squared distances over rotation (det +1),
/// positive isotropic scale, and translation.
///
/// Frames whose centered source has (near-)zero spread, or collapses onto
/// a line so the rotation is not identifiable, fall back to matching
/// centroids with the identity rotation.
pub fn procrustes_align(source: &[f64], target: &[f64]) -> Result<Alignment> {
    if source.len() != target.len() || source.len() % 3 != 0 || source.is_empty() {
        return Err(KtpError::Validation(format!(
            "procrustes_align needs equal non-empty N×3 frames, got {} and {} values",
            source.len(),
            target.len()
        )));
    }
    let n = source.len() / 3;
    let points = |flat: &[f64], i: usize| Vector3::new(flat[i * 3], flat[i * 3 + 1], flat[i * 3 + 2]);
    let mut mu_s = Vector3::zeros();
    let mut mu_t = Vector3::zeros();
    for i in 0..n {
        mu_s += points(source, i);
        mu_t += points(target, i);
    }
    mu_s /= n as f64;
    mu_t /= n as f64;

    let mut h = Matrix3::zeros();
    let mut source_spread = 0.0;
    for i in 0..n {
        let sc = points(source, i) - mu_s;
        let tc = points(target, i) - mu_t;
        h += tc * sc.transpose(); // so that R maps source space to target space
        source_spread += sc.norm_squared();
    }

    let translate_only = |fallback: bool| -> Alignment {
        let mut aligned = Vec::with_capacity(n * 3);
        for i in 0..n {
            let p = points(source, i) - mu_s + mu_t;
            aligned.extend_from_slice(&[p.x, p.y, p.z]);
        }
        Alignment {
            aligned,
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: mu_t - mu_s,
            fallback,
        }
    };

    if source_spread < 1e-24 {
        return Ok(translate_only(true));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Ok(translate_only(true)),
    };
    let sigma = svd.singular_values;
    // rotation unidentifiable when the correlation collapses to a line
    if sigma[1] + sigma[2] <= 1e-12 * sigma[0].max(1e-300) {
        return Ok(translate_only(true));
    }
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * correction * v_t;
    let trace = sigma[0] + sigma[1] + d * sigma[2];
    let scale = trace / source_spread;
    if scale <= 0.0 || !scale.is_finite() {
        return Ok(translate_only(true));
    }
    debug_assert!((rotation.determinant() - 1.0).abs() < 1e-9);

    let translation = mu_t - rotation * mu_s * scale;
    let mut aligned = Vec::with_capacity(n * 3);
    for i in 0..n {
        let p = rotation * points(source, i) * scale + translation;
        aligned.extend_from_slice(&[p.x, p.y, p.z]);
    }
    Ok(Alignment {
        aligned,
        rotation,
        scale,
        translation,
        fallback: false,
    })
}

/// MPJPE after per-frame similarity alignment; also reports how many
/// frames hit the degenerate-geometry fallback.
pub fn p_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<(f64, usize)> {
    let (t, n) = check_pose_pair(pred, gt, "p_mpjpe")?;
    let mut sum = 0.0;
    let mut fallbacks = 0;
    for frame in 0..t {
        let at = frame * n * 3;
        let alignment = procrustes_align(&pred.data()[at..at + n * 3], &gt.data()[at..at + n * 3])?;
        if alignment.fallback {
            fallbacks += 1;
        }
        for (p, g) in alignment
            .aligned
            .chunks_exact(3)
            .zip(gt.data()[at..at + n * 3].chunks_exact(3))
        {
            sum += joint_error(p, g);
        }
    }
    Ok((sum / (t * n) as f64, fallbacks))
}

/// Fraction of joints with error at most `threshold_mm` (inclusive).
pub fn pck(pred: &Tensor, gt: &Tensor, threshold_mm: f64) -> Result<f64> {
    let (t, n) = check_pose_pair(pred, gt, "pck")?;
    let mut hits = 0usize;
    for (p, g) in pred.data().chunks_exact(3).zip(gt.data().chunks_exact(3)) {
        if joint_error(p, g) <= threshold_mm {
            hits += 1;
        }
    }
    Ok(hits as f64 / (t * n) as f64)
}

/// Mean PCK over thresholds 0, 5, ..., 150 mm.
pub fn auc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..AUC_STEPS {
        total += pck(pred, gt, k as f64 * AUC_STEP_MM)?;
    }
    Ok(total / AUC_STEPS as f64)
}

/// Mean Euclidean error between predicted and target frame velocities.
/// Single-frame inputs have no velocities and score zero.
pub fn mpjve(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (t, n) = check_pose_pair(pred, gt, "mpjve")?;
    if t < 2 {
        log::warn!("mpjve needs >= 2 frames, got {t}; reporting 0");
        return Ok(0.0);
    }
    let stride = n * 3;
    let mut sum = 0.0;
    for frame in 0..t - 1 {
        for joint in 0..n {
            let a = frame * stride + joint * 3;
            let b = a + stride;
            let mut sq = 0.0;
            for c in 0..3 {
                let vp = pred.data()[b + c] - pred.data()[a + c];
                let vg = gt.data()[b + c] - gt.data()[a + c];
                sq += (vp - vg) * (vp - vg);
            }
            sum += sq.sqrt();
        }
    }
    Ok(sum / ((t - 1) * n) as f64)
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck150: f64,
    pub auc: f64,
    pub mpjve: f64,
    pub procrustes_fallbacks: usize,
    pub per_joint: Vec<f64>,
}

pub fn evaluate(pred: &Tensor, gt: &Tensor) -> Result<MetricReport> {
    let (p_value, fallbacks) = p_mpjpe(pred, gt)?;
    Ok(MetricReport {
        mpjpe: mpjpe(pred, gt)?,
        p_mpjpe: p_value,
        pck150: pck(pred, gt, PCK_THRESHOLD_MM)?,
        auc: auc(pred, gt)?,
        mpjve: mpjve(pred, gt)?,
        procrustes_fallbacks: fallbacks,
        per_joint: per_joint_mpjpe(pred, gt)?,
    })
}

impl MetricReport {
    pub fn metrics_csv(&self) -> String {
        format!(
            "metric,value\nmpjpe,{}\np_mpjpe,{}\npck150,{}\nauc,{}\nmpjve,{}\nprocrustes_fallbacks,{}\n",
            self.mpjpe, self.p_mpjpe, self.pck150, self.auc, self.mpjve, self.procrustes_fallbacks
        )
    }

    pub fn per_joint_csv(&self, joint_names: &[String]) -> Result<String> {
        if joint_names.len() != self.per_joint.len() {
            return Err(KtpError::Validation(format!(
                "{} joint names for {} per-joint values",
                joint_names.len(),
                self.per_joint.len()
            )));
        }
        let mut out = String::from("joint,name,mpjpe\n");
        for (i, (name, value)) in joint_names.iter().zip(&self.per_joint).enumerate() {
            out.push_str(&format!("{i},{name},{value}\n"));
        }
        Ok(out)
    }
}

/// Root-center a `[T, N, 3]` millimetre tensor per frame (joint 0 to the
/// origin); evaluation compares root-relative poses.
pub fn root_relative_mm(data: &Tensor) -> Result<Tensor> {
    let shape = data.shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(KtpError::Validation(format!(
            "root_relative_mm expects [T, N, 3], got {shape:?}"
        )));
    }
    let (t, n) = (shape[0], shape[1]);
    let mut out = data.clone();
    for frame in 0..t {
        let root = [
            out.data()[frame * n * 3],
            out.data()[frame * n * 3 + 1],
            out.data()[frame * n * 3 + 2],
        ];
        for joint in 0..n {
            for c in 0..3 {
                out.data_mut()[(frame * n + joint) * 3 + c] -= root[c];
            }
        }
    }
    Ok(out)
}

/// Scale model-unit predictions (metres, root-relative) to millimetres.
pub fn units_to_mm(pred: &Tensor) -> Tensor {
    let mut out = pred.clone();
    for v in out.data_mut() {
        *v *= MM_PER_UNIT;
    }
    out
}
