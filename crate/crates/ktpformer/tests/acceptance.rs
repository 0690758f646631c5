//! Acceptance gates for the whole crate: gradient audit, topology algebra,
//! prior degradation, overfit capacity, mode coverage, metric oracles,
//! attention normalization, parameter accounting, determinism, and format
//! round-trips.
//!
//! Each test prints one `criterion NN PASS` line with the measured numbers;
//! a failed gate panics through its assert instead.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ktpformer::clip::{parse_clip, PoseSequence};
use ktpformer::config::{parse_model_config, serialize_model_config};
use ktpformer::evaluation::{auc, mpjpe, p_mpjpe, pck, units_to_mm, PCK_THRESHOLD_MM};
use ktpformer::model::{
    analytic_param_count, bind, build_topologies, forward, load_checkpoint, predict,
    save_checkpoint, BoundEncoder, Mode, ModelConfig, ModelParameters, Topologies,
};
use ktpformer::synth::{synthesize, SynthSpec};
use ktpformer::tape::Tape;
use ktpformer::tensor::Tensor;
use ktpformer::topology::{build_spatial_local, build_temporal_local, combine, Skeleton};
use ktpformer::training::{gradcheck_model, prepare_clip, total_loss, Trainer, TrainingClip};
use ktpformer::transformer::{encoder_block, swap_token_axes, EncoderVars, MhsaVars};

/// Write an N-joint chain skeleton (0-1, 1-2, ...) and return its path.
fn chain_skeleton(dir: &Path, joints: usize) -> String {
    let mut text = format!("ktp-skel v1 {joints}\n");
    for j in 0..joints {
        text.push_str(&format!("{j} j{j}\n"));
    }
    text.push_str("edges:\n");
    for j in 1..joints {
        text.push_str(&format!("{} {}\n", j - 1, j));
    }
    let path = dir.join("chain.skel");
    fs::write(&path, text).expect("write skeleton");
    path.to_string_lossy().into_owned()
}

fn synth_pair(spec: &SynthSpec) -> (Tensor, Tensor) {
    let (c2, c3) = synthesize(spec).expect("synthesize");
    prepare_clip(&c2, &c3).expect("prepare clip")
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_gradient_audit() {
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let skel = chain_skeleton(dir.path(), 5);

    let mut config = ModelConfig::desk();
    config.frames = 4;
    config.joints = 5;
    config.d_model = 8;
    config.heads = 2;
    config.depth = 1;
    config.mode = Mode::Smd;
    config.joint_weights = vec![1.0; 5];
    config.skeleton = Some(skel.clone());
    config.validate().expect("config");

    let spec = SynthSpec {
        seed: config.seed,
        frames: config.frames,
        skeleton: Some(skel),
        ..SynthSpec::default()
    };
    let (input, target) = synth_pair(&spec);

    let params = ModelParameters::seeded(&config).expect("init");
    let reports = gradcheck_model(&config, &params, &input, &target, 3, None).expect("audit");

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for r in &reports {
        assert!(
            r.pass,
            "group {} failed the audit: max_abs {:.3e} max_rel {:.3e}",
            r.name, r.max_abs_err, r.max_rel_err
        );
        // pass already encodes rel < 1e-4 with an absolute floor for
        // elements whose gradient is too small for a relative error to
        // mean anything; track the raw maxima for the report line
        max_rel = max_rel.max(r.max_rel_err);
        max_abs = max_abs.max(r.max_abs_err);
    }
    assert!(max_rel < 1e-4, "max relative error {max_rel:.3e} >= 1e-4");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "audit took {elapsed:.1}s, budget is 60s");
    println!(
        "criterion 01 PASS: gradient audit over {} groups, max rel {:.3e}, max abs {:.3e}, {:.1}s",
        reports.len(),
        max_rel,
        max_abs,
        elapsed
    );
}

#[test]
fn criterion_02_topology_symmetry() {
    let skeleton = Skeleton::default_h36m17();
    let a_spatial = build_spatial_local(&skeleton);
    let a_temporal = build_temporal_local(27, 1).expect("band");
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut worst = 0.0f64;
    for i in 0..1000 {
        let base = if i % 2 == 0 { &a_spatial } else { &a_temporal };
        let s = base.shape()[0];
        let mut tape = Tape::new();
        let local = tape.constant(base.clone());
        let data: Vec<f64> = (0..s * s).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let learned = tape.param(Tensor::new(vec![s, s], data).expect("shape"));
        let combined = combine(&mut tape, local, learned).expect("combine");
        let v = tape.value(combined).clone();
        for r in 0..s {
            for c in 0..r {
                worst = worst.max((v.at2(r, c) - v.at2(c, r)).abs());
            }
        }
    }
    assert!(worst <= 1e-15, "combine asymmetry {worst:.3e} > 1e-15");

    // a zero adjustment must leave the local topology untouched, bit for bit
    for base in [&a_spatial, &a_temporal] {
        let s = base.shape()[0];
        let mut tape = Tape::new();
        let local = tape.constant(base.clone());
        let zero = tape.param(Tensor::zeros(vec![s, s]));
        let combined = combine(&mut tape, local, zero).expect("combine");
        assert_eq!(
            tape.value(combined).data(),
            base.data(),
            "zero adjustment changed the {s}x{s} topology"
        );
    }
    println!(
        "criterion 02 PASS: 1000 random adjustments, max asymmetry {worst:.3e}, zero adjustment exact"
    );
}

/// Prior parameters at their neutral settings: zero adjustments, unit
/// modulations, zero position embeddings, and TPA transforms either the
/// identity (the blocks forward tokens unchanged, so the stack residual
/// doubles them) or zero (the blocks vanish entirely).
fn neutral_params(config: &ModelConfig, identity_transforms: bool) -> ModelParameters {
    let mut p = ModelParameters::seeded(config).expect("init");
    let (t, n, d) = (config.frames, config.joints, config.d_model);
    if p.kpa_global.is_some() {
        p.kpa_global = Some(Tensor::zeros(vec![n, n]));
        p.kpa_modulation = Some(Tensor::full(vec![n, d], 1.0));
    }
    p.spatial_pos = Tensor::zeros(vec![n, d]);
    p.temporal_pos = Tensor::zeros(vec![t, d]);
    for block in &mut p.tpa_blocks {
        block.transform = if identity_transforms {
            Tensor::eye(d)
        } else {
            Tensor::zeros(vec![d, d])
        };
        block.global = Tensor::zeros(vec![t, t]);
        block.modulation = Tensor::full(vec![t, d], 1.0);
    }
    p
}

/// Plain-attention forward with the degraded prior stages in place: linear
/// embedding, entry encoders, a token doubling where the identity TPA
/// stack's residual sits, then the stacked pairs and the head. Mirrors the
/// full wiring with every prior op removed by hand.
fn plain_forward_with_doubling(
    config: &ModelConfig,
    params: &ModelParameters,
    input: &Tensor,
) -> Tensor {
    let (t, n, d) = (config.frames, config.joints, config.d_model);
    let heads = config.heads;
    let eps = config.layer_norm_eps;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let bound = bind(&mut tape, params);
    let vars = |e: &BoundEncoder| EncoderVars {
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
        ln_eps: eps,
    };

    let flat = tape.reshape(x, vec![t * n, 2]).expect("reshape");
    let emb = tape.matmul(flat, bound.embed).expect("embed");
    let mut tok = tape.reshape(emb, vec![t, n, d]).expect("reshape");
    let pos = tape
        .broadcast_to(bound.spatial_pos, vec![t, n, d])
        .expect("broadcast");
    tok = tape.add(tok, pos).expect("add");
    let (tok_s, _) = encoder_block(&mut tape, tok, &vars(&bound.entry_spatial)).expect("spatial");
    tok = swap_token_axes(&mut tape, tok_s).expect("swap");
    tok = tape.add(tok, tok).expect("double");
    let pos_t = tape
        .broadcast_to(bound.temporal_pos, vec![n, t, d])
        .expect("broadcast");
    tok = tape.add(tok, pos_t).expect("add");
    let (tok_t, _) = encoder_block(&mut tape, tok, &vars(&bound.entry_temporal)).expect("temporal");
    tok = tok_t;
    for (sp, tp) in &bound.stacks {
        tok = swap_token_axes(&mut tape, tok).expect("swap");
        let (next, _) = encoder_block(&mut tape, tok, &vars(sp)).expect("stack spatial");
        tok = swap_token_axes(&mut tape, next).expect("swap");
        let (next, _) = encoder_block(&mut tape, tok, &vars(tp)).expect("stack temporal");
        tok = next;
    }
    tok = swap_token_axes(&mut tape, tok).expect("swap");
    let flat = tape.reshape(tok, vec![t * n, d]).expect("reshape");
    let proj = tape.matmul(flat, bound.head_w).expect("head");
    let bias = tape
        .broadcast_to(bound.head_b, vec![t * n, 3])
        .expect("broadcast");
    let proj = tape.add(proj, bias).expect("add");
    let pred = tape.reshape(proj, vec![t, n, 3]).expect("reshape");
    tape.value(pred).clone()
}

#[test]
fn criterion_03_degradation_identity() {
    let mut config = ModelConfig::desk();
    config.mode = Mode::Smd;
    let spec = SynthSpec {
        seed: 11,
        ..SynthSpec::default()
    };
    let (input, _) = synth_pair(&spec);

    // identity topologies stand in for the fixed local matrices
    let topo = Topologies {
        spatial_local: Tensor::eye(config.joints),
        temporal_local: Tensor::eye(config.frames),
    };

    // zero transforms: both TPA blocks vanish and the stack reduces to its
    // residual, so the wiring collapses onto the plain-attention mode
    let zeroed = neutral_params(&config, false);
    let (pred_zero, _, _) = predict(&zeroed, &topo, &input, &config).expect("forward");

    let mut base_config = config.clone();
    base_config.mode = Mode::Baseline;
    let mut base_params = ModelParameters::seeded(&base_config).expect("init");
    base_params.spatial_pos = Tensor::zeros(vec![config.joints, config.d_model]);
    base_params.temporal_pos = Tensor::zeros(vec![config.frames, config.d_model]);
    let (pred_base, _, _) = predict(&base_params, &topo, &input, &base_config).expect("forward");
    let zero_arm = max_abs_diff(&pred_zero, &pred_base);
    assert!(
        zero_arm <= 1e-12,
        "zero-transform degradation differs from plain attention by {zero_arm:.3e}"
    );

    // identity transforms: the blocks forward tokens unchanged and the
    // stack residual doubles them; the reference applies that doubling to
    // the plain-attention pipeline by hand
    let identity = neutral_params(&config, true);
    let (pred_id, _, _) = predict(&identity, &topo, &input, &config).expect("forward");
    let pred_ref = plain_forward_with_doubling(&config, &identity, &input);
    let identity_arm = max_abs_diff(&pred_id, &pred_ref);
    assert!(
        identity_arm <= 1e-12,
        "identity-transform degradation differs from the doubled reference by {identity_arm:.3e}"
    );

    println!(
        "criterion 03 PASS: degradation identity, zero arm {zero_arm:.3e}, identity arm {identity_arm:.3e}"
    );
}

/// Mean bone length in mm measured from the first frame of a 3D clip,
/// independent of the synthesizer's internal length table.
fn mean_bone_length_mm(seq3d: &PoseSequence, skeleton: &Skeleton) -> f64 {
    let n = seq3d.joints();
    let frame0 = &seq3d.data.data()[..n * 3];
    let mut total = 0.0;
    for &(a, b) in &skeleton.edges {
        let mut sq = 0.0;
        for c in 0..3 {
            let delta = frame0[a * 3 + c] - frame0[b * 3 + c];
            sq += delta * delta;
        }
        total += sq.sqrt();
    }
    total / skeleton.edges.len() as f64
}

#[test]
fn criterion_04_single_clip_overfit() {
    let start = Instant::now();
    let spec = SynthSpec {
        seed: 11,
        ..SynthSpec::default()
    };
    let (c2, c3) = synthesize(&spec).expect("synthesize");
    let skeleton = Skeleton::default_h36m17();
    let mean_bone = mean_bone_length_mm(&c3, &skeleton);
    let threshold = 0.02 * mean_bone;
    let (input, target) = prepare_clip(&c2, &c3).expect("prepare");
    let gt_mm = units_to_mm(&target);

    // single-clip overfit wants a hotter schedule than the desk default,
    // which is tuned for multi-clip rotations
    let mut config = ModelConfig::desk();
    config.mode = Mode::Smd;
    config.base_lr = 1e-3;
    config.lr_decay = 0.998;
    config.train_steps = 2000;

    let clip = TrainingClip {
        name: "probe".into(),
        input: input.clone(),
        target: target.clone(),
    };
    let mut trainer = Trainer::new(config.clone(), vec![clip]).expect("trainer");

    let budget = 2000usize;
    let mut reached: Option<(usize, f64)> = None;
    let mut last_err = f64::INFINITY;
    while trainer.step < budget {
        let chunk = 50.min(budget - trainer.step);
        let records = trainer.run(chunk, None).expect("train");
        for r in &records {
            assert!(r.loss_total.is_finite(), "step {}: loss not finite", r.step);
        }
        let (pred, _, _) =
            predict(&trainer.params, &trainer.topo, &input, &trainer.config).expect("predict");
        last_err = mpjpe(&units_to_mm(&pred), &gt_mm).expect("mpjpe");
        if last_err < threshold {
            reached = Some((trainer.step, last_err));
            break;
        }
    }
    let (steps_used, err) = reached.unwrap_or_else(|| {
        panic!("training MPJPE still {last_err:.2}mm after {budget} steps, target {threshold:.2}mm")
    });

    // the plain-attention mode gets the identical budget and must stay
    // finite; it is not required to hit the overfit target
    let mut base_config = config.clone();
    base_config.mode = Mode::Baseline;
    let clip = TrainingClip {
        name: "probe".into(),
        input: input.clone(),
        target: target.clone(),
    };
    let mut base_trainer = Trainer::new(base_config, vec![clip]).expect("trainer");
    let records = base_trainer.run(steps_used, None).expect("train");
    for r in &records {
        assert!(r.loss_total.is_finite(), "baseline step {}: loss not finite", r.step);
    }
    let first = records.first().expect("records").loss_total;
    let last = records.last().expect("records").loss_total;
    assert!(
        last < first,
        "baseline did not improve: first {first:.6} last {last:.6}"
    );

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 600.0, "overfit took {elapsed:.0}s, budget is 600s");
    println!(
        "criterion 04 PASS: overfit to {err:.2}mm (target {threshold:.2}mm) in {steps_used} steps, \
         baseline loss {first:.4} -> {last:.4} over the same {steps_used} steps, {elapsed:.0}s"
    );
}

#[test]
fn criterion_05_mode_matrix() {
    let spec = SynthSpec {
        seed: 11,
        ..SynthSpec::default()
    };
    let (input, target) = synth_pair(&spec);
    let skeleton = Skeleton::default_h36m17();

    let mut losses = Vec::new();
    for mode in Mode::ALL {
        let mut config = ModelConfig::desk();
        config.mode = mode;
        let params = ModelParameters::seeded(&config).expect("init");
        let topo = build_topologies(&config, &skeleton).expect("topologies");
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let gt = tape.constant(target.clone());
        let bound = bind(&mut tape, &params);
        let artifacts = forward(&mut tape, &bound, &topo, x, &config).expect("forward");
        let parts = total_loss(&mut tape, artifacts.pred, gt, &config).expect("loss");
        let loss = tape.value(parts.total).data()[0];
        assert!(loss.is_finite(), "mode {mode}: loss not finite");
        tape.backward(parts.total).expect("backward");
        for (name, id) in &bound.named {
            assert!(
                tape.grad(*id).is_finite(),
                "mode {mode}: gradient of {name} not finite"
            );
        }
        losses.push(format!("{mode} {loss:.4}"));
    }

    // one TPA block is transform + adjustment + modulation
    let (t, d) = (27usize, 64usize);
    let block = d * d + t * t + t * d;
    let mut smd = ModelConfig::desk();
    smd.mode = Mode::Smd;
    let mut smd_s = ModelConfig::desk();
    smd_s.mode = Mode::SmdS;
    let counted_smd = ModelParameters::zeros(&smd).expect("zeros").count_parameters();
    let counted_smd_s = ModelParameters::zeros(&smd_s).expect("zeros").count_parameters();
    assert_eq!(
        counted_smd - counted_smd_s,
        block,
        "single-TPA mode does not drop exactly one block"
    );
    assert_eq!(
        analytic_param_count(&smd) - analytic_param_count(&smd_s),
        block,
        "analytic counts disagree on the block size"
    );

    println!(
        "criterion 05 PASS: all modes finite forward+backward ({}), single-TPA delta {} params",
        losses.join(", "),
        block
    );
}

/// Compose a rotation from three axis angles; orthogonal with det +1 by
/// construction, independent of the alignment code under test.
fn rotation(alpha: f64, beta: f64, gamma: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, row) in b.iter().enumerate() {
                    out[i][j] += a[i][k] * row[j];
                }
            }
        }
        out
    };
    mul(rz, mul(ry, rx))
}

fn apply_similarity(points: &Tensor, s: f64, r: &[[f64; 3]; 3], t: &[f64; 3]) -> Tensor {
    let mut out = points.clone();
    let data = out.data_mut();
    for p in data.chunks_mut(3) {
        let (x, y, z) = (p[0], p[1], p[2]);
        for c in 0..3 {
            p[c] = s * (r[c][0] * x + r[c][1] * y + r[c][2] * z) + t[c];
        }
    }
    out
}

fn random_points(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

#[test]
fn criterion_06_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);

    // alignment can only shrink the error
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let pred = random_points(&mut rng, &[3, 6, 3], 500.0);
        let gt = random_points(&mut rng, &[3, 6, 3], 500.0);
        let plain = mpjpe(&pred, &gt).expect("mpjpe");
        let (aligned, _) = p_mpjpe(&pred, &gt).expect("p_mpjpe");
        worst_gap = worst_gap.max(aligned - plain);
        assert!(
            aligned <= plain + 1e-9,
            "aligned error {aligned:.6} exceeds plain error {plain:.6}"
        );
    }

    // aligned error ignores similarity transforms of the predictions
    let mut worst_drift = 0.0f64;
    for _ in 0..50 {
        let pred = random_points(&mut rng, &[2, 8, 3], 400.0);
        let gt = random_points(&mut rng, &[2, 8, 3], 400.0);
        let (before, _) = p_mpjpe(&pred, &gt).expect("p_mpjpe");
        let r = rotation(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-3.0..3.0),
        );
        let s = rng.gen_range(0.3..3.0);
        let t = [
            rng.gen_range(-800.0..800.0),
            rng.gen_range(-800.0..800.0),
            rng.gen_range(-800.0..800.0),
        ];
        let moved = apply_similarity(&pred, s, &r, &t);
        let (after, _) = p_mpjpe(&moved, &gt).expect("p_mpjpe");
        worst_drift = worst_drift.max((after - before).abs());
        assert!(
            (after - before).abs() <= 1e-9,
            "aligned error drifted {:.3e} under a similarity transform",
            (after - before).abs()
        );
    }

    // perfect predictions max out the threshold metrics
    let gt = random_points(&mut rng, &[4, 17, 3], 600.0);
    assert_eq!(pck(&gt, &gt, PCK_THRESHOLD_MM).expect("pck"), 1.0);
    assert_eq!(auc(&gt, &gt).expect("auc"), 1.0);

    // 3-4-5 offset fixtures: all values exact in floating point
    let gt = Tensor::zeros(vec![1, 2, 3]);
    let mut pred = Tensor::zeros(vec![1, 2, 3]);
    pred.data_mut()[0] = 3.0;
    pred.data_mut()[1] = 4.0; // joint 0 off by 5mm, joint 1 exact
    assert_eq!(mpjpe(&pred, &gt).expect("mpjpe"), 2.5);
    assert_eq!(pck(&pred, &gt, 3.0).expect("pck"), 0.5);
    let mut scaled = Tensor::zeros(vec![1, 2, 3]);
    scaled.data_mut()[0] = 90.0;
    scaled.data_mut()[1] = 120.0; // joint 0 at exactly 150mm, inside the gate
    scaled.data_mut()[3] = 120.0;
    scaled.data_mut()[4] = 160.0; // joint 1 at 200mm, outside
    assert_eq!(pck(&scaled, &gt, PCK_THRESHOLD_MM).expect("pck"), 0.5);

    println!(
        "criterion 06 PASS: aligned<=plain on 1000 pairs (worst gap {worst_gap:.3e}), \
         similarity drift {worst_drift:.3e}, perfect preds 100/100, offset fixtures exact"
    );
}

/// Worst row-sum deviation from 1 over an `[h, s, s]` or `[s, s]` map.
fn worst_row_deviation(attn: &Tensor) -> f64 {
    let shape = attn.shape();
    let s = shape[shape.len() - 1];
    let mut worst = 0.0f64;
    for row in attn.data().chunks(s) {
        let sum: f64 = row.iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

fn head_average(attn: &Tensor) -> Tensor {
    let shape = attn.shape();
    let (h, s) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(vec![s, s]);
    for hh in 0..h {
        for i in 0..s * s {
            out.data_mut()[i] += attn.data()[hh * s * s + i];
        }
    }
    for v in out.data_mut() {
        *v /= h as f64;
    }
    out
}

#[test]
fn criterion_07_attention_normalization() {
    let spec = SynthSpec {
        seed: 11,
        ..SynthSpec::default()
    };
    let (input, _) = synth_pair(&spec);
    let skeleton = Skeleton::default_h36m17();

    let mut worst = 0.0f64;
    for mode in Mode::ALL {
        let mut config = ModelConfig::desk();
        config.mode = mode;
        let params = ModelParameters::seeded(&config).expect("init");
        let topo = build_topologies(&config, &skeleton).expect("topologies");
        let (_, attn_s, attn_t) = predict(&params, &topo, &input, &config).expect("predict");
        for attn in [&attn_s, &attn_t] {
            worst = worst.max(worst_row_deviation(attn));
            worst = worst.max(worst_row_deviation(&head_average(attn)));
        }
    }
    assert!(worst <= 1e-9, "attention row sum off by {worst:.3e}");
    println!(
        "criterion 07 PASS: attention rows sum to 1 within {worst:.3e} across all modes, \
         head-averaged included"
    );
}

/// The documented parameter formula, restated independently: one encoder
/// is 8d^2+5d; the plain backbone is embed + positions + 2(depth+1)
/// encoders + head; the kinematics prior adds N^2+Nd; each TPA block adds
/// d^2+T^2+Td.
fn expected_params(config: &ModelConfig) -> usize {
    let (t, n, d) = (config.frames, config.joints, config.d_model);
    let enc = 8 * d * d + 5 * d;
    let mut total = 2 * d + n * d + t * d + 2 * (config.depth + 1) * enc + (3 * d + 3);
    if config.mode.has_prior() {
        total += n * n + n * d;
    }
    total += config.mode.tpa_blocks() * (d * d + t * t + t * d);
    total
}

#[test]
fn criterion_08_parameter_accounting() {
    let mut configs: Vec<(String, ModelConfig)> = Vec::new();
    for mode in Mode::ALL {
        let mut c = ModelConfig::desk();
        c.mode = mode;
        configs.push((format!("desk {mode}"), c));
    }
    let mut tiny = ModelConfig::desk();
    tiny.frames = 4;
    tiny.joints = 5;
    tiny.d_model = 8;
    tiny.heads = 2;
    tiny.depth = 1;
    tiny.joint_weights = vec![1.0; 5];
    configs.push(("tiny SMD".into(), tiny));
    let mut paper = ModelConfig::desk();
    paper.frames = 243;
    paper.d_model = 512;
    paper.heads = 8;
    paper.depth = 7;
    configs.push(("full-scale SMD".into(), paper));

    for (label, config) in &configs {
        let params = ModelParameters::zeros(config).expect("zeros");
        let counted = params.count_parameters();
        let analytic = analytic_param_count(config);
        let expected = expected_params(config);
        assert_eq!(counted, analytic, "{label}: enumerated != analytic");
        assert_eq!(counted, expected, "{label}: enumerated != restated formula");
        if config.mode.has_prior() {
            let (n, d) = (config.joints, config.d_model);
            assert_eq!(
                params.count_kpa_parameters(),
                Some(2 * d + n * n + 2 * n * d),
                "{label}: kinematics prior increment off"
            );
        } else {
            assert_eq!(params.count_kpa_parameters(), None);
        }
    }

    // frozen totals, tallied by hand from the formula
    let desk_smd = &configs[4].1;
    assert_eq!(desk_smd.mode, Mode::Smd);
    assert_eq!(analytic_param_count(desk_smd), 216_150);
    let paper = &configs.last().expect("configs").1;
    assert_eq!(analytic_param_count(paper), 34_631_286);

    println!(
        "criterion 08 PASS: {} configs counted, desk SMD 216150, full scale 34631286",
        configs.len()
    );
}

#[test]
fn criterion_09_training_determinism() {
    let dir = tempfile::tempdir().expect("tempdir");
    let clips = dir.path().join("clips");
    fs::create_dir(&clips).expect("mkdir");
    let spec = SynthSpec {
        seed: 5,
        frames: 9,
        ..SynthSpec::default()
    };
    let (c2, c3) = synthesize(&spec).expect("synthesize");
    c2.save(&clips.join("probe_2d.clip")).expect("save");
    c3.save(&clips.join("probe_3d.clip")).expect("save");

    let config = dir.path().join("model.cfg");
    fs::write(
        &config,
        "frames = 9\nd_model = 16\nheads = 2\ndepth = 1\ntrain_steps = 40\nseed = 5\nmode = SMD\n",
    )
    .expect("write config");

    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_ktp"))
            .args(["train", "--config"])
            .arg(&config)
            .arg("--clips")
            .arg(&clips)
            .arg("--out")
            .arg(&out)
            .env_remove("KTP_SEED")
            .status()
            .expect("run ktp");
        assert!(status.success(), "train run {run} failed");
    }

    for file in ["model.ckpt", "train_log.csv", "state.ktpt"] {
        let a = fs::read(dir.path().join("a").join(file)).expect("read a");
        let b = fs::read(dir.path().join("b").join(file)).expect("read b");
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    println!(
        "criterion 09 PASS: two identical train runs, checkpoint, state, and log bit-identical"
    );
}

#[test]
fn criterion_10_format_roundtrips() {
    let dir = tempfile::tempdir().expect("tempdir");

    // clip text survives parse -> serialize bitwise, including values that
    // stress the shortest round-trip float form
    let values = vec![
        1e-300,
        -0.0,
        9007199254740994.0, // 2^53 + 2
        0.1,
        1.0 / 3.0,
        -2.5e17,
        1e308,
        5e-324, // smallest subnormal
        -1.5,
        2.0,
        -7.25e-12,
        42.0,
    ];
    let mut clip = PoseSequence::new("mm", Tensor::new(vec![2, 2, 3], values).expect("shape"))
        .expect("clip");
    clip.name = Some("nasty".into());
    clip.fps = Some(50.0);
    let text = clip.to_text();
    let parsed = parse_clip(&text).expect("parse");
    assert_eq!(parsed.to_text(), text, "clip text not a fixed point");
    for (a, b) in clip.data.data().iter().zip(parsed.data.data()) {
        assert_eq!(a.to_bits(), b.to_bits(), "clip value changed bits");
    }

    // config files: serialize -> parse -> serialize is the identity
    let mut config = ModelConfig::desk();
    config.lambda_t = 1.0 / 3.0;
    config.base_lr = 7e-5;
    config.joint_weights[3] = 2.5;
    let text = serialize_model_config(&config);
    let parsed = parse_model_config(&text).expect("parse");
    assert_eq!(
        serialize_model_config(&parsed),
        text,
        "config text not a fixed point"
    );

    // checkpoints: save -> load -> save reproduces the bytes
    let mut small = ModelConfig::desk();
    small.frames = 4;
    small.d_model = 8;
    small.heads = 2;
    small.depth = 1;
    let params = ModelParameters::seeded(&small).expect("init");
    let path_a = dir.path().join("a.ckpt");
    let path_b = dir.path().join("b.ckpt");
    save_checkpoint(&path_a, &small, &params).expect("save");
    let (loaded_config, loaded_params) = load_checkpoint(&path_a).expect("load");
    save_checkpoint(&path_b, &loaded_config, &loaded_params).expect("save");
    let bytes_a = fs::read(&path_a).expect("read");
    let bytes_b = fs::read(&path_b).expect("read");
    assert_eq!(bytes_a, bytes_b, "checkpoint bytes changed across a round-trip");

    println!(
        "criterion 10 PASS: clip, config, and checkpoint round-trips bitwise ({} checkpoint bytes)",
        bytes_a.len()
    );
}
