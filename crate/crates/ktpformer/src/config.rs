//! Flat `key = value` configuration files for the model and trainer.
//!
//! Every key is optional and falls back to the desk-scale default; unknown
//! or duplicate keys are errors so typos cannot silently change a run.
//! `serialize` emits every key in a fixed order, and
//! `parse(serialize(c)) == c` holds bitwise because floats are written in
//! shortest round-trip form.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{io_err, KtpError, Result};
use crate::model::{Mode, ModelConfig};

/// Scan `key = value` lines; returns `(key, value, byte_offset)` per entry.
/// `#` starts a comment line; blank lines are skipped.
pub(crate) fn scan_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut pairs = Vec::new();
    let mut offset = 0usize;
    for line in text.split('\n') {
        let line_off = offset;
        offset += line.len() + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some(eq) = trimmed.find('=') else {
            return Err(KtpError::Parse {
                offset: line_off,
                message: format!("expected `key = value`, got `{trimmed}`"),
            });
        };
        let key = trimmed[..eq].trim();
        let value = trimmed[eq + 1..].trim();
        if key.is_empty() {
            return Err(KtpError::Parse {
                offset: line_off,
                message: "empty key".into(),
            });
        }
        pairs.push((key.to_string(), value.to_string(), line_off));
    }
    Ok(pairs)
}

const MODEL_KEYS: [&str; 19] = [
    "frames",
    "joints",
    "d_model",
    "heads",
    "depth",
    "mode",
    "temporal_radius",
    "lambda_t",
    "lambda_m",
    "joint_weights",
    "base_lr",
    "lr_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "train_steps",
    "seed",
    "layer_norm_eps",
    "skeleton",
];

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut config = ModelConfig::desk();
    let mut joint_weights: Option<Vec<f64>> = None;
    let mut seen: HashSet<String> = HashSet::new();

    for (key, value, off) in scan_pairs(text)? {
        if !seen.insert(key.clone()) {
            return Err(KtpError::Parse {
                offset: off,
                message: format!("duplicate key `{key}`"),
            });
        }
        let bad = |what: &str| KtpError::Parse {
            offset: off,
            message: format!("{key}: `{value}` is not {what}"),
        };
        let parse_usize = || value.parse::<usize>().map_err(|_| bad("a count"));
        let parse_f64 = || value.parse::<f64>().map_err(|_| bad("a number"));
        match key.as_str() {
            "frames" => config.frames = parse_usize()?,
            "joints" => config.joints = parse_usize()?,
            "d_model" => config.d_model = parse_usize()?,
            "heads" => config.heads = parse_usize()?,
            "depth" => config.depth = parse_usize()?,
            "mode" => config.mode = value.parse::<Mode>()?,
            "temporal_radius" => config.temporal_radius = parse_usize()?,
            "lambda_t" => config.lambda_t = parse_f64()?,
            "lambda_m" => config.lambda_m = parse_f64()?,
            "joint_weights" => {
                let ws: std::result::Result<Vec<f64>, _> =
                    value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                joint_weights = Some(ws.map_err(|_| bad("a comma-separated number list"))?);
            }
            "base_lr" => config.base_lr = parse_f64()?,
            "lr_decay" => config.lr_decay = parse_f64()?,
            "adam_beta1" => config.adam_beta1 = parse_f64()?,
            "adam_beta2" => config.adam_beta2 = parse_f64()?,
            "adam_eps" => config.adam_eps = parse_f64()?,
            "train_steps" => config.train_steps = parse_usize()?,
            "seed" => config.seed = value.parse::<u64>().map_err(|_| bad("a seed"))?,
            "layer_norm_eps" => config.layer_norm_eps = parse_f64()?,
            "skeleton" => {
                config.skeleton = if value == "default" {
                    None
                } else {
                    Some(value.to_string())
                };
            }
            other => {
                return Err(KtpError::Parse {
                    offset: off,
                    message: format!(
                        "unknown key `{other}` (known keys: {})",
                        MODEL_KEYS.join(", ")
                    ),
                });
            }
        }
    }

    // weights default to ones at whatever joint count the file selected
    config.joint_weights = joint_weights.unwrap_or_else(|| vec![1.0; config.joints]);
    config.validate()?;
    Ok(config)
}

pub fn serialize_model_config(config: &ModelConfig) -> String {
    let weights: Vec<String> = config.joint_weights.iter().map(|w| format!("{w}")).collect();
    format!(
        "frames = {}\njoints = {}\nd_model = {}\nheads = {}\ndepth = {}\nmode = {}\n\
         temporal_radius = {}\nlambda_t = {}\nlambda_m = {}\njoint_weights = {}\n\
         base_lr = {}\nlr_decay = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\n\
         train_steps = {}\nseed = {}\nlayer_norm_eps = {}\nskeleton = {}\n",
        config.frames,
        config.joints,
        config.d_model,
        config.heads,
        config.depth,
        config.mode,
        config.temporal_radius,
        config.lambda_t,
        config.lambda_m,
        weights.join(","),
        config.base_lr,
        config.lr_decay,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        config.train_steps,
        config.seed,
        config.layer_norm_eps,
        config.skeleton.as_deref().unwrap_or("default"),
    )
}

pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_model_config(&text)
}

pub fn save_model_config(path: &Path, config: &ModelConfig) -> Result<()> {
    std::fs::write(path, serialize_model_config(config)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_desk_defaults() {
        let config = parse_model_config("").unwrap();
        assert_eq!(config, ModelConfig::desk());
        let config = parse_model_config("# just a comment\n\n").unwrap();
        assert_eq!(config, ModelConfig::desk());
    }

    #[test]
    fn serialize_then_parse_is_identity_and_a_fixed_point() {
        let mut config = ModelConfig::desk();
        config.frames = 9;
        config.mode = Mode::Pmd;
        config.base_lr = 1.25e-3;
        config.joint_weights = (0..17).map(|i| 1.0 + i as f64 * 0.125).collect();
        config.skeleton = Some("custom.skel".into());
        let text = serialize_model_config(&config);
        let back = parse_model_config(&text).unwrap();
        assert_eq!(back, config);
        assert_eq!(serialize_model_config(&back), text);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected_with_offsets() {
        let text = "frames = 9\nd_modl = 32\n";
        match parse_model_config(text) {
            Err(KtpError::Parse { offset, message }) => {
                assert_eq!(offset, 11);
                assert!(message.contains("d_modl"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_model_config("seed = 1\nseed = 2\n").is_err());
        assert!(parse_model_config("frames 9\n").is_err());
    }

    #[test]
    fn joint_weights_length_is_validated_after_all_keys() {
        // joints set after weights in file order still validates correctly
        let text = "joint_weights = 1,1,1\njoints = 3\nframes = 4\nd_model = 8\nheads = 2\n";
        let config = parse_model_config(text).unwrap();
        assert_eq!(config.joints, 3);
        assert_eq!(config.joint_weights, vec![1.0, 1.0, 1.0]);
        // mismatched weights fail validation
        assert!(parse_model_config("joint_weights = 1,1\n").is_err());
    }

    #[test]
    fn mode_values_parse_and_bad_numbers_fail() {
        let config = parse_model_config("mode = SMD-S\n").unwrap();
        assert_eq!(config.mode, Mode::SmdS);
        assert!(parse_model_config("mode = QMD\n").is_err());
        assert!(parse_model_config("frames = -2\n").is_err());
        assert!(parse_model_config("lambda_t = soup\n").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cfg");
        let config = ModelConfig::desk();
        save_model_config(&path, &config).unwrap();
        assert_eq!(load_model_config(&path).unwrap(), config);
    }
}
