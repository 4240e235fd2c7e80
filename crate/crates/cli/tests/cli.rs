use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fsed_core::synth::{generate_corpus, CorpusLayout, SynthConfig};

fn fsed(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsed"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn fsed")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_corpus(dir: &Path) -> CorpusLayout {
    generate_corpus(
        dir,
        &SynthConfig {
            n_train_files: 2,
            n_eval_files: 1,
            train_events_per_species: 6,
            eval_events: 8,
            seed: 11,
            ..SynthConfig::default()
        },
    )
    .unwrap()
}

const TINY_CONFIG: &str = "\
patch_frames = 8

[features]
n_mels = 24
n_mfcc = 12

[training]
n_way = 2
k_shot = 2
q_query = 2
episodes_per_epoch = 4
max_epochs = 2
patience = 2
val_episodes = 2
channels = [8, 8]

[inference]
neg_segments_per_set = 20
n_negative_sets = 2
";

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn train_tiny(dir: &Path, corpus: &CorpusLayout, out: &str) -> std::path::PathBuf {
    let config = write_tiny_config(dir);
    let result = fsed(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--train-root",
            corpus.train_root.to_str().unwrap(),
            "--out",
            out,
            "--seed",
            "7",
            "--threads",
            "1",
        ],
        dir,
    );
    assert_eq!(exit_code(&result), 0, "{}", stderr(&result));
    dir.join(out)
}

#[test]
fn help_exits_zero_and_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsed(&["--help"], dir.path());
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    for sub in ["train", "infer", "eval", "features", "report", "sweep"] {
        assert!(text.contains(sub), "missing {sub} in help:\n{text}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsed(&["train", "--no-such-flag"], dir.path());
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn missing_train_root_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsed(
        &["train", "--train-root", "/no/such/dataset", "--out", "o"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("/no/such/dataset"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[training]\nlerning_rate = 0.1\n").unwrap();
    let out = fsed(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--train-root",
            ".",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("lerning_rate"), "{}", stderr(&out));
}

#[test]
fn train_is_deterministic_under_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(&dir.path().join("data"));
    let a = train_tiny(dir.path(), &corpus, "run_a");
    let b = train_tiny(dir.path(), &corpus, "run_b");
    let log_a = fs::read(a.join("training_log.csv")).unwrap();
    let log_b = fs::read(b.join("training_log.csv")).unwrap();
    assert_eq!(log_a, log_b);
    let ckpt_a = fs::read(a.join("model.ckpt")).unwrap();
    let ckpt_b = fs::read(b.join("model.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
    let log = String::from_utf8(log_a).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_accuracy,lr"), "{log}");
}

#[test]
fn train_infer_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(&dir.path().join("data"));
    let run = train_tiny(dir.path(), &corpus, "run");
    let ckpt = run.join("model.ckpt");

    let out = fsed(
        &[
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--eval-root",
            corpus.eval_root.to_str().unwrap(),
            "--out",
            "inf",
            "--neg-segments-per-set",
            "20",
            "--n-negative-sets",
            "2",
            "--threads",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let merged = dir.path().join("inf/predictions.csv");
    let text = fs::read_to_string(&merged).unwrap();
    assert!(text.starts_with("Audiofilename,Starttime,Endtime"), "{text}");
    // one per-file CSV next to the merged one
    assert!(dir.path().join("inf/eval_00_predictions.csv").is_file());

    let out = fsed(
        &[
            "eval",
            "--predictions",
            merged.to_str().unwrap(),
            "--eval-root",
            corpus.eval_root.to_str().unwrap(),
            "--out",
            "ev",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("overall"), "{}", stdout(&out));
    let report = fs::read_to_string(dir.path().join("ev/report.csv")).unwrap();
    assert!(report.starts_with("group,precision,recall,f1,tp,fp,fn"), "{report}");

    let out = fsed(
        &["report", "--input", "ev", "--out", "plots"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let species = fs::read_to_string(dir.path().join("plots/species_scores.csv")).unwrap();
    let mut lines = species.lines();
    assert_eq!(lines.next(), Some("species,precision,recall,f1"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 1, "one species in the eval corpus: {rows:?}");
    assert!(!rows[0].starts_with("overall"));
}

#[test]
fn eval_rejects_predictions_for_unknown_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(&dir.path().join("data"));
    let preds = dir.path().join("p.csv");
    fs::write(&preds, "Audiofilename,Starttime,Endtime\nghost.wav,1.0,2.0\n").unwrap();
    let out = fsed(
        &[
            "eval",
            "--predictions",
            preds.to_str().unwrap(),
            "--eval-root",
            corpus.eval_root.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("ghost.wav"), "{}", stderr(&out));
}

#[test]
fn report_on_empty_directory_lists_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = fsed(&["report", "--input", empty.to_str().unwrap()], dir.path());
    assert_eq!(exit_code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("summary.csv") && msg.contains("report.csv"), "{msg}");
}

#[test]
fn features_dump_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(&dir.path().join("data"));
    let wav = corpus.eval_root.join("syntheval/eval_00.wav");
    let out_path = dir.path().join("eval_00.features.csv");
    let out = fsed(
        &[
            "features",
            "--input",
            wav.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
            "--features",
            "log_mel_mfcc",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("x 160 dims"), "{}", stdout(&out));
    assert!(out_path.is_file());
}

#[test]
fn sweep_runs_plan_and_report_reads_summary() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(&dir.path().join("data"));
    let run = train_tiny(dir.path(), &corpus, "run");
    let plan = dir.path().join("plan.toml");
    fs::write(
        &plan,
        "base_seed = 5\nn_trials = 1\n\n[inference]\nneg_segments_per_set = 10\nn_negative_sets = 1\n\n[[runs]]\nid = \"base\"\n\n[[runs]]\nid = \"grid\"\n[runs.sweep]\nneg_segments = [5, 10]\nnegative_sets = [1]\n",
    )
    .unwrap();
    let ckpt = run.join("model.ckpt");
    let args = [
        "sweep",
        "--plan",
        plan.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--eval-root",
        corpus.eval_root.to_str().unwrap(),
        "--out",
        "sweep_out",
    ];
    let out = fsed(&args, dir.path());
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let summary_path = dir.path().join("sweep_out/summary.csv");
    let first = fs::read(&summary_path).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert!(
        text.starts_with("run_id,trial,point,neg_segments,negative_sets,hard_sampling,transductive,precision,recall,f1"),
        "{text}"
    );
    // 1 base point + 2 grid points
    assert_eq!(text.lines().count(), 4, "{text}");

    // a second invocation reuses the cached trials and reproduces the file
    let out = fsed(&args, dir.path());
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(&summary_path).unwrap(), first);

    let out = fsed(
        &["report", "--input", "sweep_out", "--out", "plots"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let sweep_csv = fs::read_to_string(dir.path().join("plots/negatives_sweep.csv")).unwrap();
    let mut lines = sweep_csv.lines();
    assert_eq!(lines.next(), Some("n_neg,n_sets,trial,f1"));
    assert_eq!(lines.count(), 3, "{sweep_csv}");
}
