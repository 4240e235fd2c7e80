//! Experiment orchestration over a fixed checkpoint: run variants of the
//! inference configuration (hard sampling on/off, transduction, sweeps of
//! negative-set counts) across several seeded trials, resumably, and fold
//! everything into one summary CSV.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{decode_wav, resample};
use crate::dataset::{discover_files, parse_annotations, AnnotationTable, LabeledFile};
use crate::error::{Error, Result};
use crate::eval::{aggregate, ground_truth_after_shots, match_events, FileScore, DEFAULT_MIN_IOU};
use crate::features::{build_features, standardize, FeatureConfig, FeatureMatrix};
use crate::fnv1a64;
use crate::inference::{
    detect_file, write_predictions, EventList, InferenceConfig, Transductive,
};
use crate::nn::checkpoint::load_checkpoint;
use crate::nn::EmbeddingNetwork;

/// One experiment variant. Unset fields inherit the plan's base inference
/// configuration; a sweep grid expands into one configuration per
/// (segment count, set count) pair.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub id: String,
    pub negative_hard_sampling: Option<bool>,
    pub transductive: Option<Transductive>,
    pub n_negative_sets: Option<usize>,
    pub neg_segments_per_set: Option<usize>,
    pub sweep: Option<SweepGrid>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub neg_segments: Vec<usize>,
    pub negative_sets: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub base_seed: u64,
    pub n_trials: usize,
    /// Base settings shared by every run; runs override individual fields.
    pub inference: InferenceConfig,
    pub runs: Vec<RunSpec>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            base_seed: 0,
            n_trials: 1,
            inference: InferenceConfig::default(),
            runs: Vec::new(),
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml_str(text: &str) -> Result<ExperimentPlan> {
        let plan: ExperimentPlan =
            toml::from_str(text).map_err(|e| Error::Plan(format!("bad plan file: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Plan("plan has no runs".into()));
        }
        if self.n_trials == 0 {
            return Err(Error::Plan("n_trials must be >= 1".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for run in &self.runs {
            if run.id.is_empty() || run.id.contains(['/', '\\']) {
                return Err(Error::Plan(format!("run id {:?} is not a valid directory name", run.id)));
            }
            if !seen.insert(&run.id) {
                return Err(Error::Plan(format!("duplicate run id {:?}", run.id)));
            }
            if let Some(sweep) = &run.sweep {
                if sweep.neg_segments.is_empty() || sweep.negative_sets.is_empty() {
                    return Err(Error::Plan(format!("run {:?} has an empty sweep axis", run.id)));
                }
            }
        }
        self.inference.validate()
    }

    /// Deterministic per-trial seed.
    pub fn trial_seed(&self, run_id: &str, trial: usize) -> u64 {
        fnv1a64(&[
            b"trial",
            &self.base_seed.to_le_bytes(),
            run_id.as_bytes(),
            &(trial as u64).to_le_bytes(),
        ])
    }

    /// Expand one run into labeled inference configurations for a trial.
    fn resolve(&self, run: &RunSpec, trial: usize) -> Vec<(String, InferenceConfig)> {
        let mut base = self.inference.clone();
        base.rng_seed = self.trial_seed(&run.id, trial);
        if let Some(v) = run.negative_hard_sampling {
            base.negative_hard_sampling = v;
        }
        if let Some(v) = run.transductive {
            base.transductive = v;
        }
        if let Some(v) = run.n_negative_sets {
            base.n_negative_sets = v;
        }
        if let Some(v) = run.neg_segments_per_set {
            base.neg_segments_per_set = v;
        }
        match &run.sweep {
            None => vec![("single".into(), base)],
            Some(grid) => {
                let mut out = Vec::new();
                for &neg in &grid.neg_segments {
                    for &sets in &grid.negative_sets {
                        let mut cfg = base.clone();
                        cfg.neg_segments_per_set = neg;
                        cfg.n_negative_sets = sets;
                        out.push((format!("neg{neg}_sets{sets}"), cfg));
                    }
                }
                out
            }
        }
    }
}

/// An eval file with its features extracted and its detection class
/// resolved (the annotation column with enough POS events).
pub struct PreparedEvalFile {
    pub file: LabeledFile,
    pub table: AnnotationTable,
    pub features: FeatureMatrix,
    pub class: String,
}

/// Decode, resample, and featurize one eval file. The detection class is
/// the first annotation column with at least `n_shots` POS events.
pub fn prepare_eval_file(
    file: &LabeledFile,
    feature_cfg: &FeatureConfig,
    sample_rate: u32,
    n_shots: usize,
) -> Result<PreparedEvalFile> {
    let clip = decode_wav(&file.wav_path)?;
    let clip = if clip.sample_rate == sample_rate {
        clip
    } else {
        resample(&clip, sample_rate)?
    };
    let features = standardize(&build_features(&clip, feature_cfg)?);
    let table = parse_annotations(&file.csv_path)?;
    let class = table
        .class_set
        .iter()
        .find(|c| table.pos_events(c).len() >= n_shots)
        .ok_or_else(|| Error::InsufficientShots {
            file: table.file.clone(),
            needed: n_shots,
            found: table.class_set.iter().map(|c| table.pos_events(c).len()).max().unwrap_or(0),
        })?
        .clone();
    Ok(PreparedEvalFile {
        file: file.clone(),
        table,
        features,
        class,
    })
}

/// Decode, resample, and featurize every eval file under `root`.
pub fn prepare_eval_files(
    root: &Path,
    feature_cfg: &FeatureConfig,
    sample_rate: u32,
    n_shots: usize,
) -> Result<Vec<PreparedEvalFile>> {
    discover_files(root)?
        .iter()
        .map(|file| prepare_eval_file(file, feature_cfg, sample_rate, n_shots))
        .collect()
}

/// Detect on every prepared file and score against the post-shot ground
/// truth. Returns per-file predictions plus the pooled report scores.
pub fn score_eval_files(
    files: &[PreparedEvalFile],
    net: &EmbeddingNetwork<f32>,
    cfg: &InferenceConfig,
) -> Result<(Vec<EventList>, crate::eval::EvalReport)> {
    let mut predictions = Vec::new();
    let mut scores = Vec::new();
    for f in files {
        let detected = detect_file(&f.features, &f.table, &f.class, net, cfg)?;
        let gt = ground_truth_after_shots(&f.table, &f.class, cfg.n_shots);
        let counts = match_events(&detected.events, &gt, DEFAULT_MIN_IOU);
        scores.push(FileScore {
            file: f.table.file.clone(),
            species: f.class.clone(),
            counts,
        });
        predictions.push(detected);
    }
    Ok((predictions, aggregate(&scores)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run_id: String,
    pub trial: usize,
    pub point: String,
    pub neg_segments: usize,
    pub negative_sets: usize,
    pub hard_sampling: bool,
    pub transductive: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

const SUMMARY_HEADER: &str =
    "run_id,trial,point,neg_segments,negative_sets,hard_sampling,transductive,precision,recall,f1";

fn write_rows(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(w, "{SUMMARY_HEADER}").map_err(io_err)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.2},{:.2},{:.2}",
            r.run_id,
            r.trial,
            r.point,
            r.neg_segments,
            r.negative_sets,
            r.hard_sampling,
            r.transductive,
            r.precision,
            r.recall,
            r.f1
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_summary_rows(path: &Path) -> Result<Vec<SummaryRow>> {
    let parse_err = |row: usize, detail: String| Error::Plan(format!(
        "{}:{row}: {detail}",
        path.display()
    ));
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SUMMARY_HEADER => {}
        other => {
            return Err(parse_err(1, format!("expected summary header, got {:?}", other.map(|(_, h)| h))))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(parse_err(row, format!("expected 10 fields, got {}", fields.len())));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| parse_err(row, format!("bad number {:?}", fields[j])))
        };
        let int = |j: usize| -> Result<usize> {
            fields[j]
                .parse()
                .map_err(|_| parse_err(row, format!("bad integer {:?}", fields[j])))
        };
        let flag = |j: usize| -> Result<bool> {
            fields[j]
                .parse()
                .map_err(|_| parse_err(row, format!("bad flag {:?}", fields[j])))
        };
        rows.push(SummaryRow {
            run_id: fields[0].to_string(),
            trial: int(1)?,
            point: fields[2].to_string(),
            neg_segments: int(3)?,
            negative_sets: int(4)?,
            hard_sampling: flag(5)?,
            transductive: flag(6)?,
            precision: num(7)?,
            recall: num(8)?,
            f1: num(9)?,
        });
    }
    Ok(rows)
}

/// Execute a plan against one checkpoint and eval root. Completed trials
/// (their `scores.csv` already on disk) are not recomputed; the summary is
/// always rebuilt from the per-trial files.
///
/// Returns the summary CSV path.
pub fn run_plan(
    plan: &ExperimentPlan,
    checkpoint: &Path,
    eval_root: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    plan.validate()?;
    let loaded = load_checkpoint(checkpoint)?;
    let files = prepare_eval_files(
        eval_root,
        &loaded.meta.feature,
        loaded.meta.sample_rate,
        plan.inference.n_shots,
    )?;
    if files.is_empty() {
        return Err(Error::MissingPath(eval_root.to_path_buf()));
    }

    let mut all_rows: Vec<SummaryRow> = Vec::new();
    for run in &plan.runs {
        for trial in 0..plan.n_trials {
            let trial_dir = out_dir.join(&run.id).join(format!("trial_{trial}"));
            let scores_path = trial_dir.join("scores.csv");
            if scores_path.is_file() {
                all_rows.extend(read_summary_rows(&scores_path)?);
                continue;
            }
            std::fs::create_dir_all(&trial_dir).map_err(|source| Error::Io {
                path: trial_dir.clone(),
                source,
            })?;

            let mut rows = Vec::new();
            for (point, cfg) in plan.resolve(run, trial) {
                let (predictions, report) = score_eval_files(&files, &loaded.net, &cfg)?;
                write_predictions(&trial_dir.join(format!("{point}_predictions.csv")), &predictions)?;
                crate::eval::write_report_csv(&trial_dir.join(format!("{point}_report.csv")), &report)?;
                rows.push(SummaryRow {
                    run_id: run.id.clone(),
                    trial,
                    point,
                    neg_segments: cfg.neg_segments_per_set,
                    negative_sets: cfg.n_negative_sets,
                    hard_sampling: cfg.negative_hard_sampling,
                    transductive: cfg.transductive != Transductive::Off,
                    precision: report.overall.precision,
                    recall: report.overall.recall,
                    f1: report.overall.f1,
                });
            }
            write_rows(&scores_path, &rows)?;
            all_rows.extend(rows);
        }
    }

    all_rows.sort_by(|a, b| (&a.run_id, a.trial, &a.point).cmp(&(&b.run_id, b.trial, &b.point)));
    let summary = out_dir.join("summary.csv");
    write_rows(&summary, &all_rows)?;
    Ok(summary)
}
