use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use fsed_core::runner::read_summary_rows;
use fsed_core::Error;

use crate::error::Result;

#[derive(Debug, Parser)]
pub struct Args {
    /// Directory holding run outputs (searched recursively for summary.csv
    /// and *report.csv)
    #[arg(long)]
    pub input: PathBuf,

    /// Output directory for the tidy plot-data CSVs
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn collect(dir: &Path, summaries: &mut Vec<PathBuf>, reports: &mut Vec<PathBuf>) -> fsed_core::Result<()> {
    let io_err = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.is_dir() {
            collect(&path, summaries, reports)?;
            continue;
        }
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name == "summary.csv" {
            summaries.push(path);
        } else if name.ends_with("report.csv") {
            reports.push(path);
        }
    }
    Ok(())
}

fn write_negatives_sweep(path: &Path, summaries: &[PathBuf]) -> fsed_core::Result<usize> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(w, "n_neg,n_sets,trial,f1").map_err(io_err)?;
    let mut n = 0;
    for summary in summaries {
        for row in read_summary_rows(summary)? {
            writeln!(
                w,
                "{},{},{},{:.2}",
                row.neg_segments, row.negative_sets, row.trial, row.f1
            )
            .map_err(io_err)?;
            n += 1;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(n)
}

/// Pull the species rows (everything but `overall`) out of a report CSV
/// written by `eval` or `sweep`.
fn species_rows(path: &Path) -> fsed_core::Result<Vec<(String, f64, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |row: usize, detail: String| Error::AnnotationParse {
        path: path.to_path_buf(),
        row,
        detail,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "group,precision,recall,f1,tp,fp,fn")) => {}
        Some((_, other)) => {
            return Err(parse_err(1, format!("unexpected report header `{other}`")))
        }
        None => return Err(parse_err(1, "empty report".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(i + 1, format!("expected 7 fields, got {}", fields.len())));
        }
        if fields[0] == "overall" {
            continue;
        }
        let num = |j: usize| -> fsed_core::Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| parse_err(i + 1, format!("non-numeric field `{}`", fields[j])))
        };
        out.push((fields[0].to_string(), num(1)?, num(2)?, num(3)?));
    }
    Ok(out)
}

fn write_species_scores(path: &Path, reports: &[PathBuf]) -> fsed_core::Result<usize> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(w, "species,precision,recall,f1").map_err(io_err)?;
    let mut n = 0;
    for report in reports {
        for (species, p, r, f1) in species_rows(report)? {
            writeln!(w, "{species},{p:.2},{r:.2},{f1:.2}").map_err(io_err)?;
            n += 1;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(n)
}

pub fn run(args: Args) -> Result<()> {
    let mut summaries = Vec::new();
    let mut reports = Vec::new();
    if !args.input.is_dir() {
        return Err(Error::MissingPath(args.input.clone()).into());
    }
    collect(&args.input, &mut summaries, &mut reports)?;
    summaries.sort();
    reports.sort();
    if summaries.is_empty() && reports.is_empty() {
        return Err(Error::Eval(format!(
            "{}: nothing to report; expected summary.csv (from `fsed sweep`) \
             or *report.csv (from `fsed eval`) somewhere under it",
            args.input.display()
        ))
        .into());
    }

    let out_dir = args.out.unwrap_or_else(|| args.input.clone());
    fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
        path: out_dir.clone(),
        source,
    })?;

    if !summaries.is_empty() {
        let path = out_dir.join("negatives_sweep.csv");
        let n = write_negatives_sweep(&path, &summaries)?;
        println!("{n} sweep points -> {}", path.display());
    }
    if !reports.is_empty() {
        let path = out_dir.join("species_scores.csv");
        let n = write_species_scores(&path, &reports)?;
        println!("{n} species rows -> {}", path.display());
    }
    Ok(())
}
