//! Event-based scoring: IoU-gated one-to-one matching between predicted
//! and ground-truth intervals, micro-averaged precision/recall/F1, and
//! Student-t confidence intervals over repeated trials.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::AnnotationTable;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }
}

fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Match predictions to ground truth one-to-one, maximizing the number of
/// matched pairs among candidates with IoU >= `min_iou` (augmenting-path
/// maximum bipartite matching, exact).
pub fn match_events(pred: &[(f64, f64)], gt: &[(f64, f64)], min_iou: f64) -> MatchCounts {
    let candidates: Vec<Vec<usize>> = pred
        .iter()
        .map(|&p| {
            gt.iter()
                .enumerate()
                .filter(|(_, &g)| iou(p, g) >= min_iou)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    fn augment(
        i: usize,
        candidates: &[Vec<usize>],
        owner: &mut [Option<usize>],
        visited: &mut [bool],
    ) -> bool {
        for &j in &candidates[i] {
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if owner[j].is_none()
                || augment(owner[j].expect("checked"), candidates, owner, visited)
            {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }

    let mut owner: Vec<Option<usize>> = vec![None; gt.len()];
    let mut matched = 0;
    for i in 0..pred.len() {
        let mut visited = vec![false; gt.len()];
        if augment(i, &candidates, &mut owner, &mut visited) {
            matched += 1;
        }
    }
    MatchCounts {
        true_positives: matched,
        false_positives: pred.len() - matched,
        false_negatives: gt.len() - matched,
    }
}

/// Ground-truth events that are targets for detection: everything after
/// the shots that served as support.
pub fn ground_truth_after_shots(
    table: &AnnotationTable,
    class: &str,
    n_shots: usize,
) -> Vec<(f64, f64)> {
    let pos = table.pos_events(class);
    pos.get(n_shots..).map(|s| s.to_vec()).unwrap_or_default()
}

/// Micro precision/recall/F1 in percent. Precision is defined as 0 when
/// there are no predictions, keeping F1 total.
pub fn precision_recall_f1(counts: MatchCounts) -> (f64, f64, f64) {
    let tp = counts.true_positives as f64;
    let p_den = tp + counts.false_positives as f64;
    let r_den = tp + counts.false_negatives as f64;
    let precision = if p_den > 0.0 { tp / p_den } else { 0.0 };
    let recall = if r_den > 0.0 { tp / r_den } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (100.0 * precision, 100.0 * recall, 100.0 * f1)
}

#[derive(Debug, Clone)]
pub struct FileScore {
    pub file: String,
    pub species: String,
    pub counts: MatchCounts,
}

#[derive(Debug, Clone)]
pub struct GroupScore {
    pub group: String,
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl GroupScore {
    fn from_counts(group: String, counts: MatchCounts) -> GroupScore {
        let (precision, recall, f1) = precision_recall_f1(counts);
        GroupScore {
            group,
            counts,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_file: Vec<FileScore>,
    pub per_species: Vec<GroupScore>,
    pub overall: GroupScore,
}

/// Pool per-file counts into per-species and overall micro scores.
pub fn aggregate(per_file: &[FileScore]) -> EvalReport {
    let mut species: std::collections::BTreeMap<String, MatchCounts> = Default::default();
    let mut total = MatchCounts::default();
    for fs in per_file {
        species.entry(fs.species.clone()).or_default().add(fs.counts);
        total.add(fs.counts);
    }
    EvalReport {
        per_file: per_file.to_vec(),
        per_species: species
            .into_iter()
            .map(|(name, c)| GroupScore::from_counts(name, c))
            .collect(),
        overall: GroupScore::from_counts("overall".into(), total),
    }
}

/// Mean and 95% confidence half-width over independent trials
/// (Student-t, n-1 degrees of freedom).
pub fn trials_summary(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Eval(format!(
            "confidence interval needs at least 2 trials, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("valid dof")
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / n.sqrt()))
}

/// CSV rows (group, precision, recall, f1, tp, fp, fn): per-species
/// groups first, overall last. Percentages carry two decimals.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(w, "group,precision,recall,f1,tp,fp,fn").map_err(io_err)?;
    for g in report.per_species.iter().chain(std::iter::once(&report.overall)) {
        writeln!(
            w,
            "{},{:.2},{:.2},{:.2},{},{},{}",
            g.group,
            g.precision,
            g.recall,
            g.f1,
            g.counts.true_positives,
            g.counts.false_positives,
            g.counts.false_negatives
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Human-readable score table.
pub fn format_report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>10} {:>10} {:>10} {:>6} {:>6} {:>6}",
        "group", "precision", "recall", "f1", "tp", "fp", "fn"
    );
    for g in report.per_species.iter().chain(std::iter::once(&report.overall)) {
        let _ = writeln!(
            out,
            "{:<16} {:>10.2} {:>10.2} {:>10.2} {:>6} {:>6} {:>6}",
            g.group,
            g.precision,
            g.recall,
            g.f1,
            g.counts.true_positives,
            g.counts.false_positives,
            g.counts.false_negatives
        );
    }
    out
}
