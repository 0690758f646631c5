use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use ktpformer::clip::PoseSequence;
use ktpformer::config::{load_model_config, serialize_model_config};
use ktpformer::error::{KtpError, Result};
use ktpformer::evaluation::{evaluate, root_relative_mm, units_to_mm, MetricReport};
use ktpformer::model::{
    analytic_param_count, build_topologies, count_flops, extract_attention, load_checkpoint,
    predict, save_checkpoint, ModelConfig, ModelParameters,
};
use ktpformer::synth::{load_synth_spec, synthesize, SynthSpec};
use ktpformer::training::{
    gradcheck_model, load_training_state, prepare_clip, save_training_state, Trainer,
    TrainingClip, LOG_HEADER,
};

#[derive(Parser)]
#[command(
    name = "ktp",
    version,
    about = "2D-to-3D pose lifting with kinematics and trajectory priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip pair (<out>_2d.clip and <out>_3d.clip).
    Synth {
        /// Synthesis spec file; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
        /// Clip name recorded in both files.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train a model on clip pairs and write checkpoint, state, and log.
    Train {
        /// Model config file; desk defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding <stem>_2d.clip / <stem>_3d.clip pairs.
        #[arg(long)]
        clips: PathBuf,
        /// Output directory for model.ckpt, state.ktpt, train_log.csv.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Resume from a state.ktpt file instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on clip pairs; writes metrics CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding <stem>_2d.clip / <stem>_3d.clip pairs.
        #[arg(long)]
        clips: PathBuf,
        /// Output directory for metrics.csv and per_joint.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit analytic gradients against central finite differences.
    Gradcheck {
        /// Model config file; desk defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Elements sampled per parameter group.
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Corrupt this parameter's analytic gradient first; the audit
        /// must then fail (negative control).
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Export entry-block attention maps for a 2D clip as CSV matrices.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 2D input clip (norm units).
        #[arg(long)]
        clip: PathBuf,
        /// Output prefix for <prefix>_spatial.csv and <prefix>_temporal.csv.
        #[arg(long)]
        prefix: PathBuf,
    },
    /// Print parameter and FLOP accounting for a config.
    Params {
        /// Model config file; desk defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("KTP_SEED") {
        Ok(s) => s
            .parse::<u64>()
            .map(Some)
            .map_err(|_| KtpError::Validation(format!("KTP_SEED `{s}` is not a u64"))),
        Err(_) => Ok(None),
    }
}

fn load_config_opt(path: &Option<PathBuf>) -> Result<ModelConfig> {
    let mut config = match path {
        Some(p) => load_model_config(p)?,
        None => ModelConfig::desk(),
    };
    if let Some(seed) = env_seed()? {
        config.seed = seed;
    }
    Ok(config)
}

/// Find `<stem>_2d.clip` / `<stem>_3d.clip` pairs, sorted by stem.
fn discover_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| ktpformer::error::io_err(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ktpformer::error::io_err(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_2d.clip") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    let mut pairs = Vec::new();
    for stem in stems {
        let p2 = dir.join(format!("{stem}_2d.clip"));
        let p3 = dir.join(format!("{stem}_3d.clip"));
        if !p3.exists() {
            return Err(KtpError::Validation(format!(
                "{} has no matching {}",
                p2.display(),
                p3.display()
            )));
        }
        pairs.push((stem, p2, p3));
    }
    if pairs.is_empty() {
        return Err(KtpError::Validation(format!(
            "no <stem>_2d.clip files found in {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

fn load_training_clips(dir: &Path, config: &ModelConfig) -> Result<Vec<TrainingClip>> {
    let mut clips = Vec::new();
    for (stem, p2, p3) in discover_pairs(dir)? {
        let c2 = PoseSequence::load(&p2)?;
        let c3 = PoseSequence::load(&p3)?;
        let (input, target) = prepare_clip(&c2, &c3)?;
        if input.shape() != [config.frames, config.joints, 2] {
            return Err(KtpError::Validation(format!(
                "clip {stem} is {:?}, config expects [{}, {}, 2]",
                input.shape(),
                config.frames,
                config.joints
            )));
        }
        clips.push(TrainingClip {
            name: stem,
            input,
            target,
        });
    }
    Ok(clips)
}

fn run_synth(spec_path: Option<PathBuf>, out: PathBuf, name: Option<String>) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => load_synth_spec(&p)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = env_seed()? {
        spec.seed = seed;
    }
    let (mut c2, mut c3) = synthesize(&spec)?;
    c2.name.clone_from(&name);
    c3.name = name;
    let p2 = out.with_file_name(format!(
        "{}_2d.clip",
        out.file_name().unwrap_or_default().to_string_lossy()
    ));
    let p3 = out.with_file_name(format!(
        "{}_3d.clip",
        out.file_name().unwrap_or_default().to_string_lossy()
    ));
    c2.save(&p2)?;
    c3.save(&p3)?;
    println!(
        "wrote {} and {} ({} frames, {} joints, seed {})",
        p2.display(),
        p3.display(),
        c2.frames(),
        c2.joints(),
        spec.seed
    );
    Ok(())
}

fn run_train(
    config_path: Option<PathBuf>,
    clips_dir: PathBuf,
    out: PathBuf,
    steps: Option<usize>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let config = load_config_opt(&config_path)?;
    std::fs::create_dir_all(&out).map_err(|e| ktpformer::error::io_err(&out, e))?;

    let mut trainer = match resume {
        Some(state_path) => {
            // the state file carries its own config; clips must match it
            let peek = peek_state_config(&state_path)?;
            let clips = load_training_clips(&clips_dir, &peek)?;
            load_training_state(&state_path, clips)?
        }
        None => {
            let clips = load_training_clips(&clips_dir, &config)?;
            Trainer::new(config, clips)?
        }
    };

    let steps = steps.unwrap_or(trainer.config.train_steps);
    let log_path = out.join("train_log.csv");
    let fresh_log = trainer.step == 0 || !log_path.exists();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| ktpformer::error::io_err(&log_path, e))?;
    if fresh_log {
        use std::io::Write;
        writeln!(log, "{LOG_HEADER}").map_err(|e| ktpformer::error::io_err(&log_path, e))?;
    }
    let records = trainer.run(steps, Some(&mut log))?;

    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &trainer.config, &trainer.params)?;
    let state = out.join("state.ktpt");
    save_training_state(&state, &trainer)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!(
            "trained {} steps (total {}): loss {} -> {}",
            records.len(),
            trainer.step,
            first.loss_total,
            last.loss_total
        );
    } else {
        println!("trained 0 steps (total {})", trainer.step);
    }
    println!("wrote {} and {}", ckpt.display(), state.display());
    Ok(())
}

/// Read only the config text block out of a state file.
fn peek_state_config(path: &Path) -> Result<ModelConfig> {
    use std::io::Read;
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| ktpformer::error::io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| ktpformer::error::io_err(path, e))?;
    if bytes.len() < 24 || &bytes[0..4] != b"KTPT" {
        return Err(KtpError::Parse {
            offset: 0,
            message: "not a training state file".into(),
        });
    }
    let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() < 24 + len {
        return Err(KtpError::Parse {
            offset: 16,
            message: "truncated config block".into(),
        });
    }
    let text = std::str::from_utf8(&bytes[24..24 + len]).map_err(|_| KtpError::Parse {
        offset: 24,
        message: "config text is not UTF-8".into(),
    })?;
    ktpformer::config::parse_model_config(text)
}

fn run_eval(checkpoint: PathBuf, clips_dir: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let (config, params) = load_checkpoint(&checkpoint)?;
    let skeleton = config.load_skeleton()?;
    let topo = build_topologies(&config, &skeleton)?;

    let pairs = discover_pairs(&clips_dir)?;
    let mut reports: Vec<(String, MetricReport)> = Vec::new();
    for (stem, p2, p3) in pairs {
        let c2 = PoseSequence::load(&p2)?;
        let c3 = PoseSequence::load(&p3)?;
        if c2.unit != "norm" || c3.unit != "mm" || c2.dim() != 2 || c3.dim() != 3 {
            return Err(KtpError::Validation(format!(
                "clip {stem}: expected norm 2D input and mm 3D target"
            )));
        }
        if c2.data.shape()[..2] != [config.frames, config.joints] {
            return Err(KtpError::Validation(format!(
                "clip {stem} is {:?}, checkpoint expects [{}, {}]",
                &c2.data.shape()[..2],
                config.frames,
                config.joints
            )));
        }
        let (pred_units, _, _) = predict(&params, &topo, &c2.data, &config)?;
        let pred_mm = units_to_mm(&pred_units);
        let gt_mm = root_relative_mm(&c3.data)?;
        let report = evaluate(&pred_mm, &gt_mm)?;
        println!(
            "clip {stem}: mpjpe {:.3} p_mpjpe {:.3} pck150 {:.4} auc {:.4} mpjve {:.3}",
            report.mpjpe, report.p_mpjpe, report.pck150, report.auc, report.mpjve
        );
        reports.push((stem, report));
    }

    let k = reports.len() as f64;
    let n = config.joints;
    let mut agg = MetricReport {
        mpjpe: 0.0,
        p_mpjpe: 0.0,
        pck150: 0.0,
        auc: 0.0,
        mpjve: 0.0,
        procrustes_fallbacks: 0,
        per_joint: vec![0.0; n],
    };
    for (_, r) in &reports {
        agg.mpjpe += r.mpjpe / k;
        agg.p_mpjpe += r.p_mpjpe / k;
        agg.pck150 += r.pck150 / k;
        agg.auc += r.auc / k;
        agg.mpjve += r.mpjve / k;
        agg.procrustes_fallbacks += r.procrustes_fallbacks;
        for (s, v) in agg.per_joint.iter_mut().zip(&r.per_joint) {
            *s += v / k;
        }
    }
    println!(
        "aggregate over {} clips: mpjpe {:.3} p_mpjpe {:.3} pck150 {:.4} auc {:.4} mpjve {:.3}",
        reports.len(),
        agg.mpjpe,
        agg.p_mpjpe,
        agg.pck150,
        agg.auc,
        agg.mpjve
    );

    if let Some(out) = out {
        std::fs::create_dir_all(&out).map_err(|e| ktpformer::error::io_err(&out, e))?;
        let metrics = out.join("metrics.csv");
        std::fs::write(&metrics, agg.metrics_csv())
            .map_err(|e| ktpformer::error::io_err(&metrics, e))?;
        let per_joint = out.join("per_joint.csv");
        std::fs::write(&per_joint, agg.per_joint_csv(&skeleton.joint_names)?)
            .map_err(|e| ktpformer::error::io_err(&per_joint, e))?;
        println!("wrote {} and {}", metrics.display(), per_joint.display());
    }
    Ok(())
}

fn run_gradcheck(
    config_path: Option<PathBuf>,
    samples: usize,
    corrupt: Option<String>,
) -> Result<()> {
    let config = load_config_opt(&config_path)?;
    let params = ModelParameters::seeded(&config)?;

    // deterministic probe data from the synthesizer at the config's shape
    let mut spec = SynthSpec::default();
    spec.seed = config.seed;
    spec.frames = config.frames;
    spec.skeleton.clone_from(&config.skeleton);
    let (c2, c3) = synthesize(&spec)?;
    if c2.joints() != config.joints {
        return Err(KtpError::Validation(format!(
            "skeleton provides {} joints, config expects {}",
            c2.joints(),
            config.joints
        )));
    }
    let (input, target) = prepare_clip(&c2, &c3)?;

    let reports = gradcheck_model(&config, &params, &input, &target, samples, corrupt.as_deref())?;
    let mut failures = 0;
    for r in &reports {
        println!(
            "group {}: checked {} max_abs {:.3e} max_rel {:.3e} {}",
            r.name,
            r.checked,
            r.max_abs_err,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        );
        if !r.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(KtpError::Numerical(format!(
            "gradient audit failed for {failures} of {} groups",
            reports.len()
        )));
    }
    println!("gradient audit: PASS ({} groups)", reports.len());
    Ok(())
}

fn run_export_attn(checkpoint: PathBuf, clip: PathBuf, prefix: PathBuf) -> Result<()> {
    let (config, params) = load_checkpoint(&checkpoint)?;
    let skeleton = config.load_skeleton()?;
    let topo = build_topologies(&config, &skeleton)?;
    let c2 = PoseSequence::load(&clip)?;
    if c2.dim() != 2 || c2.unit != "norm" {
        return Err(KtpError::Validation(
            "attention export needs a 2D clip in norm units".into(),
        ));
    }
    if c2.data.shape()[..2] != [config.frames, config.joints] {
        return Err(KtpError::Validation(format!(
            "clip is {:?}, checkpoint expects [{}, {}]",
            &c2.data.shape()[..2],
            config.frames,
            config.joints
        )));
    }
    let (_, attn_s, attn_t) = predict(&params, &topo, &c2.data, &config)?;
    let (spatial, temporal) = extract_attention(&ktpformer::model::ForwardArtifacts {
        pred: {
            // only the attention values are used here
            let mut t = ktpformer::tape::Tape::new();
            t.constant(ktpformer::tensor::Tensor::scalar(0.0))
        },
        attn_spatial: attn_s,
        attn_temporal: attn_t,
    });

    let write_matrix = |path: &Path, m: &ktpformer::tensor::Tensor| -> Result<()> {
        let s = m.shape()[0];
        let mut text = String::new();
        for row in m.data().chunks_exact(s) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| ktpformer::error::io_err(path, e))
    };
    let base = prefix.file_name().unwrap_or_default().to_string_lossy();
    let sp = prefix.with_file_name(format!("{base}_spatial.csv"));
    let tp = prefix.with_file_name(format!("{base}_temporal.csv"));
    write_matrix(&sp, &spatial)?;
    write_matrix(&tp, &temporal)?;
    println!("wrote {} and {}", sp.display(), tp.display());
    Ok(())
}

fn run_params(config_path: Option<PathBuf>) -> Result<()> {
    let config = load_config_opt(&config_path)?;
    let params = ModelParameters::seeded(&config)?;
    let total = params.count_parameters();
    let analytic = analytic_param_count(&config);
    if total != analytic {
        return Err(KtpError::Numerical(format!(
            "enumerated count {total} disagrees with closed form {analytic}"
        )));
    }
    println!("mode {}", config.mode);
    println!("parameters_total {total}");
    if let Some(kpa) = params.count_kpa_parameters() {
        println!("parameters_kpa {kpa}");
    }
    println!("flops_total {}", count_flops(&config));
    params.visit(|name, t| {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        println!("param {name} {} [{}]", t.numel(), dims.join("x"));
    });
    println!("config follows:");
    print!("{}", serialize_model_config(&config));
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { spec, out, name } => run_synth(spec, out, name),
        Command::Train {
            config,
            clips,
            out,
            steps,
            resume,
        } => run_train(config, clips, out, steps, resume),
        Command::Eval {
            checkpoint,
            clips,
            out,
        } => run_eval(checkpoint, clips, out),
        Command::Gradcheck {
            config,
            samples,
            corrupt,
        } => run_gradcheck(config, samples, corrupt),
        Command::ExportAttn {
            checkpoint,
            clip,
            prefix,
        } => run_export_attn(checkpoint, clip, prefix),
        Command::Params { config } => run_params(config),
    }
}

fn main() {
    // die quietly when a pipe closes instead of panicking mid-print
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
