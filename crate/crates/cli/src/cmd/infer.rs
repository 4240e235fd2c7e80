use std::fs;
use std::path::PathBuf;

use clap::Parser;
use fsed_core::dataset::discover_files;
use fsed_core::inference::{detect_file, write_predictions, Transductive};
use fsed_core::nn::checkpoint::load_checkpoint;
use fsed_core::protonet::DistanceFn;
use fsed_core::runner::prepare_eval_file;

use crate::config::{self, load_config, CONFIG_KEY_HELP};
use crate::error::Result;
use crate::par::{default_threads, map_parallel};

#[derive(Debug, Parser)]
#[command(after_long_help = CONFIG_KEY_HELP)]
pub struct Args {
    /// TOML settings file; flags below override its values
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Trained model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Evaluation root: <root>/<subset>/<name>.wav with sibling .csv
    /// annotations supplying the first support shots
    #[arg(long)]
    pub eval_root: PathBuf,

    /// Output directory for per-file and merged prediction CSVs
    #[arg(long, default_value = "runs/infer")]
    pub out: PathBuf,

    /// Leading POS events per file used as the support set
    #[arg(long)]
    pub n_shots: Option<usize>,

    /// Background segments drawn per negative set
    #[arg(long)]
    pub neg_segments_per_set: Option<usize>,

    /// Negative sets to ensemble
    #[arg(long)]
    pub n_negative_sets: Option<usize>,

    /// Probability above which a query window counts as positive
    #[arg(long)]
    pub prob_threshold: Option<f64>,

    /// Minimum event length as a fraction of the mean shot length
    #[arg(long)]
    pub min_event_frac: Option<f64>,

    /// Build negative prototypes from sampled pool subsets (true) or from
    /// the whole pool as one prototype (false)
    #[arg(long)]
    pub negative_hard_sampling: Option<bool>,

    /// Fine-tune a copy of the network on each file's support shots
    #[arg(long)]
    pub transductive: bool,

    /// Adaptation steps per file when --transductive is set
    #[arg(long, default_value_t = 10)]
    pub transductive_epochs: usize,

    /// Adaptation learning rate when --transductive is set
    #[arg(long, default_value_t = 1e-3)]
    pub transductive_lr: f64,

    /// Embedding distance: squared_euclidean or cosine
    #[arg(long, value_parser = config::parse_distance)]
    pub distance: Option<DistanceFn>,

    /// RNG seed for negative-set draws
    #[arg(long)]
    pub rng_seed: Option<u64>,

    /// Worker threads; files are processed independently
    #[arg(long, default_value_t = default_threads())]
    pub threads: usize,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?.inference;
    if let Some(v) = args.n_shots {
        cfg.n_shots = v;
    }
    if let Some(v) = args.neg_segments_per_set {
        cfg.neg_segments_per_set = v;
    }
    if let Some(v) = args.n_negative_sets {
        cfg.n_negative_sets = v;
    }
    if let Some(v) = args.prob_threshold {
        cfg.prob_threshold = v;
    }
    if let Some(v) = args.min_event_frac {
        cfg.min_event_frac = v;
    }
    if let Some(v) = args.negative_hard_sampling {
        cfg.negative_hard_sampling = v;
    }
    if args.transductive {
        cfg.transductive = Transductive::On {
            epochs: args.transductive_epochs,
            lr: args.transductive_lr,
        };
    }
    if let Some(v) = args.distance {
        cfg.distance = v;
    }
    if let Some(v) = args.rng_seed {
        cfg.rng_seed = v;
    }
    cfg.validate()?;

    let loaded = load_checkpoint(&args.checkpoint)?;
    let files = discover_files(&args.eval_root)?;
    eprintln!("featurizing {} files", files.len());
    let prepared = map_parallel(&files, args.threads, |file| {
        prepare_eval_file(file, &loaded.meta.feature, loaded.meta.sample_rate, cfg.n_shots)
    })?;

    eprintln!("detecting");
    let lists = map_parallel(&prepared, args.threads, |f| {
        detect_file(&f.features, &f.table, &f.class, &loaded.net, &cfg)
    })?;

    fs::create_dir_all(&args.out).map_err(|source| fsed_core::Error::Io {
        path: args.out.clone(),
        source,
    })?;
    for (f, list) in prepared.iter().zip(&lists) {
        let path = args.out.join(format!("{}_predictions.csv", f.file.stem));
        write_predictions(&path, std::slice::from_ref(list))?;
    }
    let merged = args.out.join("predictions.csv");
    write_predictions(&merged, &lists)?;

    let n_events: usize = lists.iter().map(|l| l.events.len()).sum();
    println!("{} files, {} detected events", lists.len(), n_events);
    println!("predictions: {}", merged.display());
    Ok(())
}
