use std::fs;
use std::path::PathBuf;

use clap::Parser;
use fsed_core::runner::{run_plan, ExperimentPlan};
use fsed_core::Error;

use crate::error::Result;

#[derive(Debug, Parser)]
pub struct Args {
    /// Experiment plan (TOML): base_seed, n_trials, [inference] base
    /// settings, and [[runs]] with per-run overrides or sweep grids
    #[arg(long)]
    pub plan: PathBuf,

    /// Trained model checkpoint; the plan only varies inference
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Evaluation root: <root>/<subset>/<name>.wav with sibling .csv
    #[arg(long)]
    pub eval_root: PathBuf,

    /// Output directory; completed trials found here are reused
    #[arg(long, default_value = "runs/sweep")]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let text = fs::read_to_string(&args.plan).map_err(|source| Error::Io {
        path: args.plan.clone(),
        source,
    })?;
    let plan = ExperimentPlan::from_toml_str(&text)?;
    let n_points: usize = plan.runs.len();
    eprintln!(
        "plan: {} runs x {} trials (base seed {})",
        n_points, plan.n_trials, plan.base_seed
    );
    let summary = run_plan(&plan, &args.checkpoint, &args.eval_root, &args.out)?;
    println!("summary: {}", summary.display());
    Ok(())
}
