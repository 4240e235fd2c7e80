use std::fs;
use std::path::PathBuf;

use clap::Parser;
use fsed_core::audio::{decode_wav, resample};
use fsed_core::dataset::{
    discover_files, extract_patches, parse_annotations, AnnotationTable, ClassPools, LabeledFile,
    SegmentPool,
};
use fsed_core::features::{build_features, standardize, FeatureConfig, FeatureSet};
use fsed_core::nn::checkpoint::{save_checkpoint, CheckpointMeta};
use fsed_core::protonet::DistanceFn;
use fsed_core::trainer::{train_protonet, write_training_log};

use crate::config::{self, load_config, CONFIG_KEY_HELP};
use crate::error::Result;
use crate::par::{default_threads, map_parallel};

#[derive(Debug, Parser)]
#[command(after_long_help = CONFIG_KEY_HELP)]
pub struct Args {
    /// TOML settings file; flags below override its values
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Dataset root: <root>/<subset>/<name>.wav with sibling .csv annotations
    #[arg(long)]
    pub train_root: PathBuf,

    /// Separate root for validation episodes (defaults to held-out episodes
    /// from the training pools)
    #[arg(long)]
    pub val_root: Option<PathBuf>,

    /// Output directory for model.ckpt and training_log.csv
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,

    /// Feature set, e.g. log_mel or pcen_delta_mfcc
    #[arg(long, value_parser = config::parse_feature_set)]
    pub features: Option<FeatureSet>,

    /// Embedding distance: squared_euclidean or cosine
    #[arg(long, value_parser = config::parse_distance)]
    pub distance: Option<DistanceFn>,

    /// RNG seed for weight init and episode sampling
    #[arg(long)]
    pub seed: Option<u64>,

    /// Epoch cap (early stopping may end sooner)
    #[arg(long)]
    pub max_epochs: Option<usize>,

    /// Episodes sampled per epoch
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,

    /// Epochs without validation improvement before stopping
    #[arg(long)]
    pub patience: Option<usize>,

    /// Classes per episode
    #[arg(long)]
    pub n_way: Option<usize>,

    /// Support examples per class per episode
    #[arg(long)]
    pub k_shot: Option<usize>,

    /// Query examples per class per episode
    #[arg(long)]
    pub q_query: Option<usize>,

    /// Base learning rate
    #[arg(long)]
    pub lr: Option<f64>,

    /// Frames per training patch
    #[arg(long)]
    pub patch_frames: Option<usize>,

    /// Target sample rate; other rates are resampled
    #[arg(long)]
    pub sample_rate: Option<u32>,

    /// Worker threads for feature extraction (1 = fully deterministic order
    /// of work; results are identical at any count)
    #[arg(long, default_value_t = default_threads())]
    pub threads: usize,
}

fn prepare_file(
    file: &LabeledFile,
    cfg: &FeatureConfig,
    sample_rate: u32,
    patch_frames: usize,
) -> fsed_core::Result<(AnnotationTable, SegmentPool)> {
    let clip = decode_wav(&file.wav_path)?;
    let clip = if clip.sample_rate == sample_rate {
        clip
    } else {
        resample(&clip, sample_rate)?
    };
    let features = standardize(&build_features(&clip, cfg)?);
    let table = parse_annotations(&file.csv_path)?;
    let pool = extract_patches(&features, &table, patch_frames)?;
    Ok((table, pool))
}

fn build_pools(
    root: &std::path::Path,
    cfg: &FeatureConfig,
    sample_rate: u32,
    patch_frames: usize,
    threads: usize,
) -> fsed_core::Result<ClassPools> {
    let files = discover_files(root)?;
    let prepared = map_parallel(&files, threads, |file| {
        prepare_file(file, cfg, sample_rate, patch_frames)
    })?;
    let refs: Vec<(&AnnotationTable, &SegmentPool)> =
        prepared.iter().map(|(t, p)| (t, p)).collect();
    ClassPools::merge(&refs)
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.features {
        cfg.features.feature_set = v;
    }
    if let Some(v) = args.distance {
        cfg.training.distance = v;
    }
    if let Some(v) = args.seed {
        cfg.training.seed = v;
    }
    if let Some(v) = args.max_epochs {
        cfg.training.max_epochs = v;
    }
    if let Some(v) = args.episodes_per_epoch {
        cfg.training.episodes_per_epoch = v;
    }
    if let Some(v) = args.patience {
        cfg.training.patience = v;
    }
    if let Some(v) = args.n_way {
        cfg.training.n_way = v;
    }
    if let Some(v) = args.k_shot {
        cfg.training.k_shot = v;
    }
    if let Some(v) = args.q_query {
        cfg.training.q_query = v;
    }
    if let Some(v) = args.lr {
        cfg.training.base_lr = v;
    }
    if let Some(v) = args.patch_frames {
        cfg.patch_frames = v;
    }
    if let Some(v) = args.sample_rate {
        cfg.sample_rate = v;
    }
    cfg.features.validate()?;
    cfg.training.validate()?;

    eprintln!("preparing training pools from {}", args.train_root.display());
    let train_pools = build_pools(
        &args.train_root,
        &cfg.features,
        cfg.sample_rate,
        cfg.patch_frames,
        args.threads,
    )?;
    let val_pools = match &args.val_root {
        Some(root) => {
            eprintln!("preparing validation pools from {}", root.display());
            Some(build_pools(
                root,
                &cfg.features,
                cfg.sample_rate,
                cfg.patch_frames,
                args.threads,
            )?)
        }
        None => None,
    };

    eprintln!(
        "training: {} way, {} shot, {} query, up to {} epochs x {} episodes",
        cfg.training.n_way,
        cfg.training.k_shot,
        cfg.training.q_query,
        cfg.training.max_epochs,
        cfg.training.episodes_per_epoch,
    );
    let outcome = train_protonet(&train_pools, val_pools.as_ref(), &cfg.training)?;

    fs::create_dir_all(&args.out).map_err(|source| fsed_core::Error::Io {
        path: args.out.clone(),
        source,
    })?;
    let ckpt_path = args.out.join("model.ckpt");
    let log_path = args.out.join("training_log.csv");
    let meta = CheckpointMeta {
        feature: cfg.features.clone(),
        patch_frames: cfg.patch_frames,
        sample_rate: cfg.sample_rate,
    };
    save_checkpoint(&ckpt_path, &outcome.net, &meta, None)?;
    write_training_log(&log_path, &outcome.history)?;

    let best = &outcome.history[outcome.best_epoch];
    println!(
        "trained {} epochs; best epoch {} (val accuracy {:.4})",
        outcome.history.len(),
        outcome.best_epoch,
        best.val_accuracy,
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("training log: {}", log_path.display());
    Ok(())
}
