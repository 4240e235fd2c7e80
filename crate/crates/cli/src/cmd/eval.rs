use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::Parser;
use fsed_core::dataset::{discover_files, parse_annotations, AnnotationTable};
use fsed_core::eval::{
    aggregate, ground_truth_after_shots, match_events, write_report_csv, format_report_table,
    FileScore, DEFAULT_MIN_IOU,
};
use fsed_core::inference::read_predictions;
use fsed_core::Error;

use crate::error::Result;

#[derive(Debug, Parser)]
pub struct Args {
    /// Merged predictions CSV (Audiofilename,Starttime,Endtime)
    #[arg(long)]
    pub predictions: PathBuf,

    /// Ground-truth root: <root>/<subset>/<name>.csv annotations
    #[arg(long)]
    pub eval_root: PathBuf,

    /// Output directory for report.csv
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,

    /// Support shots excluded from scoring (events overlapping the first
    /// n POS annotations are the model's inputs, not targets)
    #[arg(long, default_value_t = 5)]
    pub n_shots: usize,

    /// Minimum IoU for a prediction to match a ground-truth event
    #[arg(long, default_value_t = DEFAULT_MIN_IOU)]
    pub min_iou: f64,
}

fn detection_class(table: &AnnotationTable, n_shots: usize) -> fsed_core::Result<String> {
    table
        .class_set
        .iter()
        .find(|c| table.pos_events(c).len() >= n_shots)
        .cloned()
        .ok_or_else(|| Error::InsufficientShots {
            file: table.file.clone(),
            needed: n_shots,
            found: table
                .class_set
                .iter()
                .map(|c| table.pos_events(c).len())
                .max()
                .unwrap_or(0),
        })
}

pub fn run(args: Args) -> Result<()> {
    let lists = read_predictions(&args.predictions)?;
    let mut by_file: BTreeMap<String, Vec<(f64, f64)>> = lists
        .into_iter()
        .map(|l| (l.file, l.events))
        .collect();

    let mut scores = Vec::new();
    for file in discover_files(&args.eval_root)? {
        let table = parse_annotations(&file.csv_path)?;
        let class = detection_class(&table, args.n_shots)?;
        let gt = ground_truth_after_shots(&table, &class, args.n_shots);
        // a file with no predicted events still contributes its misses
        let predicted = by_file.remove(&table.file).unwrap_or_default();
        scores.push(FileScore {
            file: table.file,
            species: class,
            counts: match_events(&predicted, &gt, args.min_iou),
        });
    }
    if let Some(file) = by_file.keys().next() {
        return Err(Error::Eval(format!(
            "{}: predictions reference `{file}`, which has no annotations under {}",
            args.predictions.display(),
            args.eval_root.display()
        ))
        .into());
    }

    let report = aggregate(&scores);
    fs::create_dir_all(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    let report_path = args.out.join("report.csv");
    write_report_csv(&report_path, &report)?;
    print!("{}", format_report_table(&report));
    println!("report: {}", report_path.display());
    Ok(())
}
