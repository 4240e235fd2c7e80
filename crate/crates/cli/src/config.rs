use std::fs;
use std::path::Path;

use fsed_core::features::{FeatureConfig, FeatureSet};
use fsed_core::inference::InferenceConfig;
use fsed_core::protonet::DistanceFn;
use fsed_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

/// Settings file shared by all subcommands. Every key has a default, so an
/// empty file (or no file at all) is valid; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    /// Target rate; inputs at other rates are resampled.
    pub sample_rate: u32,
    /// Frames per training patch.
    pub patch_frames: usize,
    pub features: FeatureConfig,
    pub training: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            sample_rate: 22050,
            patch_frames: 17,
            features: FeatureConfig::default(),
            training: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

/// Load the config file when given, otherwise start from defaults.
pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| {
        AppError::Usage(format!("cannot read config {}: {e}", path.display()))
    })?;
    toml::from_str(&text)
        .map_err(|e| AppError::Usage(format!("config {}: {e}", path.display())))
}

/// Flag-value parser for `--features`.
pub fn parse_feature_set(s: &str) -> std::result::Result<FeatureSet, String> {
    Ok(match s {
        "mel" => FeatureSet::Mel,
        "log_mel" => FeatureSet::LogMel,
        "log_mel_mfcc" => FeatureSet::LogMelMfcc,
        "log_mel_delta_mfcc" => FeatureSet::LogMelDeltaMfcc,
        "pcen" => FeatureSet::Pcen,
        "pcen_mfcc" => FeatureSet::PcenMfcc,
        "pcen_delta_mfcc" => FeatureSet::PcenDeltaMfcc,
        _ => {
            return Err(format!(
                "unknown feature set `{s}` (one of: mel, log_mel, log_mel_mfcc, \
                 log_mel_delta_mfcc, pcen, pcen_mfcc, pcen_delta_mfcc)"
            ))
        }
    })
}

/// Flag-value parser for `--distance`.
pub fn parse_distance(s: &str) -> std::result::Result<DistanceFn, String> {
    Ok(match s {
        "squared_euclidean" => DistanceFn::SquaredEuclidean,
        "cosine" => DistanceFn::Cosine,
        _ => return Err(format!("unknown distance `{s}` (one of: squared_euclidean, cosine)")),
    })
}

/// Config keys, for subcommand long help.
pub const CONFIG_KEY_HELP: &str = "Config file keys (TOML; flags override file values):
  sample_rate, patch_frames
  [features]  window_len, hop_len, n_mels, n_mfcc, feature_set, log_floor,
              delta_width, pcen.{alpha, delta, r, smoothing, epsilon}
  [training]  n_way, k_shot, q_query, episodes_per_epoch, max_epochs,
              patience, val_episodes, distance, channels, leaky_slope,
              base_lr, decay_gamma, decay_interval, seed
  [inference] n_shots, neg_segments_per_set, n_negative_sets, prob_threshold,
              min_event_frac, negative_hard_sampling, distance, rng_seed,
              transductive.{mode, epochs, lr}
Unknown keys are errors.";

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = FileConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: FileConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.sample_rate, cfg.sample_rate);
        assert_eq!(back.patch_frames, cfg.patch_frames);
        assert_eq!(back.features, cfg.features);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = toml::from_str::<FileConfig>("[training]\nlerning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lerning_rate"), "{err}");
    }

    #[test]
    fn missing_file_is_usage_error() {
        let err = load_config(Some(Path::new("/no/such/config.toml"))).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "[training]\nseed = 9").unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        assert_eq!(cfg.training.seed, 9);
        assert_eq!(cfg.training.n_way, TrainConfig::default().n_way);
        assert_eq!(cfg.sample_rate, 22050);
    }

    #[test]
    fn feature_set_parser_accepts_all_sets() {
        for name in [
            "mel",
            "log_mel",
            "log_mel_mfcc",
            "log_mel_delta_mfcc",
            "pcen",
            "pcen_mfcc",
            "pcen_delta_mfcc",
        ] {
            parse_feature_set(name).unwrap();
        }
        assert!(parse_feature_set("logmel").is_err());
    }
}
