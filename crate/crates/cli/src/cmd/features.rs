use std::path::PathBuf;

use clap::Parser;
use fsed_core::audio::{decode_wav, resample};
use fsed_core::features::{
    build_features, standardize, write_feature_matrix, write_feature_matrix_csv, FeatureSet,
};

use crate::config::{self, load_config, CONFIG_KEY_HELP};
use crate::error::{AppError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DumpFormat {
    Csv,
    Bin,
}

#[derive(Debug, Parser)]
#[command(after_long_help = CONFIG_KEY_HELP)]
pub struct Args {
    /// Input WAV file
    #[arg(long)]
    pub input: PathBuf,

    /// Output path (default: input path with the extension replaced)
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// TOML settings file; flags below override its values
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Feature set, e.g. log_mel or pcen_delta_mfcc
    #[arg(long, value_parser = config::parse_feature_set)]
    pub features: Option<FeatureSet>,

    /// Target sample rate; other rates are resampled
    #[arg(long)]
    pub sample_rate: Option<u32>,

    /// Apply per-file standardization (the model's input convention)
    #[arg(long)]
    pub standardize: bool,

    /// Output encoding
    #[arg(long, value_enum, default_value_t = DumpFormat::Csv)]
    pub format: DumpFormat,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.features {
        cfg.features.feature_set = v;
    }
    if let Some(v) = args.sample_rate {
        cfg.sample_rate = v;
    }
    cfg.features.validate()?;

    let clip = decode_wav(&args.input)?;
    let clip = if clip.sample_rate == cfg.sample_rate {
        clip
    } else {
        resample(&clip, cfg.sample_rate)?
    };
    let mut fm = build_features(&clip, &cfg.features)?;
    if args.standardize {
        fm = standardize(&fm);
    }

    let ext = match args.format {
        DumpFormat::Csv => "features.csv",
        DumpFormat::Bin => "features.bin",
    };
    let out = args.out.unwrap_or_else(|| args.input.with_extension(ext));
    if out == args.input {
        return Err(AppError::Usage(format!(
            "refusing to overwrite input {}",
            args.input.display()
        )));
    }
    match args.format {
        DumpFormat::Csv => write_feature_matrix_csv(&out, &fm)?,
        DumpFormat::Bin => write_feature_matrix(&out, &fm)?,
    }
    println!(
        "{} frames x {} dims ({:.4} s hop) -> {}",
        fm.frames(),
        fm.dim(),
        fm.frame_hop_seconds,
        out.display()
    );
    Ok(())
}
