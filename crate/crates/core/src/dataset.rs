//! Annotation parsing, patch extraction, and episodic sampling.
//!
//! Annotation CSVs follow the DCASE few-shot layout: a
//! `Audiofilename,Starttime,Endtime` prefix and one column per class whose
//! cells are POS/NEG/UNK. Recordings are sliced into fixed-size feature
//! patches (positives tile events, negatives tile the rest) and episodes are
//! drawn from the per-class pools with an explicit seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Cell value of an annotation column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelValue {
    Pos,
    Neg,
    Unk,
}

impl LabelValue {
    fn parse(s: &str) -> Option<LabelValue> {
        match s {
            "POS" => Some(LabelValue::Pos),
            "NEG" => Some(LabelValue::Neg),
            "UNK" => Some(LabelValue::Unk),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub class_name: String,
    pub value: LabelValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTable {
    pub file: String,
    pub class_set: Vec<String>,
    pub events: Vec<AnnotationEvent>,
}

impl AnnotationTable {
    /// POS intervals for one class, sorted by onset.
    pub fn pos_events(&self, class: &str) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .events
            .iter()
            .filter(|e| e.class_name == class && e.value == LabelValue::Pos)
            .map(|e| (e.onset_s, e.offset_s))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    /// Intervals that must not contribute negative material for `class`
    /// (POS and UNK), sorted by onset.
    pub fn masked_intervals(&self, class: &str) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .events
            .iter()
            .filter(|e| {
                e.class_name == class
                    && matches!(e.value, LabelValue::Pos | LabelValue::Unk)
            })
            .map(|e| (e.onset_s, e.offset_s))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }
}

/// Parse a DCASE-format annotation CSV.
///
/// Every class column with a POS/NEG/UNK cell yields one event per row.
/// Malformed rows (non-numeric times, onset >= offset, unknown tokens) are
/// reported with their 1-based line number.
pub fn parse_annotations(path: &Path) -> Result<AnnotationTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::AnnotationParse {
            path: path.to_path_buf(),
            row: 1,
            detail: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::AnnotationParse {
            path: path.to_path_buf(),
            row: 1,
            detail: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4
        || cols[0] != "Audiofilename"
        || cols[1] != "Starttime"
        || cols[2] != "Endtime"
    {
        return Err(Error::AnnotationParse {
            path: path.to_path_buf(),
            row: 1,
            detail: format!(
                "expected header `Audiofilename,Starttime,Endtime,<class columns>`, got `{}`",
                cols.join(",")
            ),
        });
    }
    let class_set: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();

    let mut file = String::new();
    let mut events = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // header is line 1
        let err = |detail: String| Error::AnnotationParse {
            path: path.to_path_buf(),
            row,
            detail,
        };
        let record = record.map_err(|e| err(e.to_string()))?;
        if file.is_empty() {
            file = record[0].to_string();
        }
        let onset: f64 = record[1]
            .parse()
            .map_err(|_| err(format!("non-numeric Starttime `{}`", &record[1])))?;
        let offset: f64 = record[2]
            .parse()
            .map_err(|_| err(format!("non-numeric Endtime `{}`", &record[2])))?;
        if !onset.is_finite() || !offset.is_finite() || onset < 0.0 {
            return Err(err(format!("invalid times ({onset}, {offset})")));
        }
        if onset >= offset {
            return Err(err(format!(
                "Starttime ({onset}) must be before Endtime ({offset})"
            )));
        }
        for (c, class_name) in class_set.iter().enumerate() {
            let cell = &record[3 + c];
            let value = LabelValue::parse(cell)
                .ok_or_else(|| err(format!("unknown value `{cell}` for class `{class_name}`")))?;
            events.push(AnnotationEvent {
                onset_s: onset,
                offset_s: offset,
                class_name: class_name.clone(),
                value,
            });
        }
    }

    Ok(AnnotationTable {
        file,
        class_set,
        events,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone)]
pub struct PoolPatch {
    /// patch_frames x dim slice of the source features
    pub values: Array2<f64>,
    pub class_index: usize,
    pub polarity: Polarity,
}

/// All patches extracted from one recording.
#[derive(Debug, Clone)]
pub struct SegmentPool {
    pub patch_frames: usize,
    pub dim: usize,
    pub patches: Vec<PoolPatch>,
}

impl SegmentPool {
    pub fn count(&self, class_index: usize, polarity: Polarity) -> usize {
        self.patches
            .iter()
            .filter(|p| p.class_index == class_index && p.polarity == polarity)
            .count()
    }
}

/// Convert an event interval in seconds to a half-open frame range, clamped
/// to the feature matrix.
pub(crate) fn event_frame_range(
    features: &FeatureMatrix,
    onset_s: f64,
    offset_s: f64,
) -> (usize, usize) {
    let hop = features.frame_hop_seconds;
    let start = (onset_s / hop).floor().max(0.0) as usize;
    let end = ((offset_s / hop).ceil() as usize).min(features.frames());
    (start.min(end), end)
}

fn copy_patch(features: &FeatureMatrix, start: usize, patch_frames: usize) -> Array2<f64> {
    features
        .values
        .slice(ndarray::s![start..start + patch_frames, ..])
        .to_owned()
}

/// Repeat the frames of a short event cyclically until the patch is full.
pub(crate) fn tile_patch(
    features: &FeatureMatrix,
    start: usize,
    len: usize,
    patch_frames: usize,
) -> Array2<f64> {
    let dim = features.dim();
    let mut out = Array2::zeros((patch_frames, dim));
    for j in 0..patch_frames {
        let src = start + j % len;
        out.row_mut(j).assign(&features.values.row(src));
    }
    out
}

/// Slice a recording's features into labeled patches.
///
/// Positive patches tile each POS event with hop `patch_frames / 2`; events
/// shorter than a patch are repeat-tiled from their own frames. Negative
/// patches tile the per-class complement of POS and UNK intervals with
/// non-overlapping windows.
pub fn extract_patches(
    features: &FeatureMatrix,
    table: &AnnotationTable,
    patch_frames: usize,
) -> Result<SegmentPool> {
    if patch_frames == 0 {
        return Err(Error::InvalidConfig("patch_frames must be >= 1".into()));
    }
    let total = features.frames();
    let hop = (patch_frames / 2).max(1);
    let mut patches = Vec::new();

    for (class_index, class_name) in table.class_set.iter().enumerate() {
        for (onset, offset) in table.pos_events(class_name) {
            let (start, end) = event_frame_range(features, onset, offset);
            let len = end - start;
            if len == 0 {
                continue; // event lies beyond the extracted features
            }
            if len < patch_frames {
                patches.push(PoolPatch {
                    values: tile_patch(features, start, len, patch_frames),
                    class_index,
                    polarity: Polarity::Positive,
                });
            } else {
                let mut s = start;
                while s + patch_frames <= end {
                    patches.push(PoolPatch {
                        values: copy_patch(features, s, patch_frames),
                        class_index,
                        polarity: Polarity::Positive,
                    });
                    s += hop;
                }
            }
        }

        // frames covered by POS or UNK for this class
        let mut masked = vec![false; total];
        for (onset, offset) in table.masked_intervals(class_name) {
            let (start, end) = event_frame_range(features, onset, offset);
            for m in masked.iter_mut().take(end).skip(start) {
                *m = true;
            }
        }
        let mut run_start = 0usize;
        let mut t = 0usize;
        while t <= total {
            if t == total || masked[t] {
                let mut s = run_start;
                while s + patch_frames <= t {
                    patches.push(PoolPatch {
                        values: copy_patch(features, s, patch_frames),
                        class_index,
                        polarity: Polarity::Negative,
                    });
                    s += patch_frames;
                }
                run_start = t + 1;
            }
            t += 1;
        }
    }

    Ok(SegmentPool {
        patch_frames,
        dim: features.dim(),
        patches,
    })
}

/// Per-class patch pools merged across recordings, keyed by class name.
#[derive(Debug, Clone)]
pub struct ClassPools {
    pub class_names: Vec<String>,
    pub positives: Vec<Vec<Array2<f64>>>,
    pub negatives: Vec<Vec<Array2<f64>>>,
    pub patch_frames: usize,
    pub dim: usize,
}

impl ClassPools {
    /// Merge per-file pools; class identity follows the class name.
    pub fn merge(items: &[(&AnnotationTable, &SegmentPool)]) -> Result<ClassPools> {
        let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
        for (table, _) in items {
            for name in &table.class_set {
                let next = by_name.len();
                by_name.entry(name.clone()).or_insert(next);
            }
        }
        // normalize to sorted order for stable indices
        let class_names: Vec<String> = by_name.keys().cloned().collect();
        let index_of: BTreeMap<&str, usize> = class_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();

        let (mut patch_frames, mut dim) = (0usize, 0usize);
        let mut positives = vec![Vec::new(); class_names.len()];
        let mut negatives = vec![Vec::new(); class_names.len()];
        for (table, pool) in items {
            if patch_frames == 0 {
                patch_frames = pool.patch_frames;
                dim = pool.dim;
            } else if pool.patch_frames != patch_frames || pool.dim != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("{patch_frames}x{dim} patches"),
                    got: format!("{}x{}", pool.patch_frames, pool.dim),
                });
            }
            for p in &pool.patches {
                let global = index_of[table.class_set[p.class_index].as_str()];
                match p.polarity {
                    Polarity::Positive => positives[global].push(p.values.clone()),
                    Polarity::Negative => negatives[global].push(p.values.clone()),
                }
            }
        }

        Ok(ClassPools {
            class_names,
            positives,
            negatives,
            patch_frames,
            dim,
        })
    }

    /// Classes with enough positives for K support + Q query patches and
    /// enough negatives for K negative-support patches.
    pub fn eligible_classes(&self, k_shot: usize, q_query: usize) -> Vec<usize> {
        (0..self.class_names.len())
            .filter(|&c| {
                self.positives[c].len() >= k_shot + q_query && self.negatives[c].len() >= k_shot
            })
            .collect()
    }
}

/// One class's slice of an episode.
#[derive(Debug, Clone)]
pub struct EpisodeClass {
    pub class_index: usize,
    pub support: Vec<Array2<f64>>,
    pub query: Vec<Array2<f64>>,
    pub negatives: Vec<Array2<f64>>,
    /// pool indices backing `support`/`query`, for disjointness checks
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub classes: Vec<EpisodeClass>,
}

/// Draw an N-way K-shot episode with Q queries per class, deterministically
/// for a given seed. Classes and patches are sampled uniformly without
/// replacement.
pub fn sample_episode(
    pools: &ClassPools,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    rng_seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || q_query == 0 {
        return Err(Error::InvalidConfig(
            "episode shape (N, K, Q) must be positive".into(),
        ));
    }
    let eligible = pools.eligible_classes(k_shot, q_query);
    if eligible.len() < n_way {
        return Err(Error::EpisodeCapacity(format!(
            "need {n_way} classes with >= {} positive and >= {k_shot} negative patches, \
             only {} of {} classes qualify",
            k_shot + q_query,
            eligible.len(),
            pools.class_names.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let chosen = rand::seq::index::sample(&mut rng, eligible.len(), n_way);

    let mut classes = Vec::with_capacity(n_way);
    for ci in chosen.iter() {
        let class_index = eligible[ci];
        let pos = &pools.positives[class_index];
        let neg = &pools.negatives[class_index];

        let picks = rand::seq::index::sample(&mut rng, pos.len(), k_shot + q_query);
        let ids: Vec<usize> = picks.iter().collect();
        let (support_ids, query_ids) = ids.split_at(k_shot);
        let neg_ids: Vec<usize> =
            rand::seq::index::sample(&mut rng, neg.len(), k_shot).iter().collect();

        classes.push(EpisodeClass {
            class_index,
            support: support_ids.iter().map(|&i| pos[i].clone()).collect(),
            query: query_ids.iter().map(|&i| pos[i].clone()).collect(),
            negatives: neg_ids.iter().map(|&i| neg[i].clone()).collect(),
            support_ids: support_ids.to_vec(),
            query_ids: query_ids.to_vec(),
        });
    }

    Ok(Episode {
        n_way,
        k_shot,
        q_query,
        classes,
    })
}

/// A recording and its sibling annotation file under the
/// `<root>/<subset>/<name>.wav` + `.csv` convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledFile {
    pub wav_path: PathBuf,
    pub csv_path: PathBuf,
    pub subset: String,
    pub stem: String,
}

/// Walk a dataset root and list its annotated recordings, sorted by
/// (subset, stem) for deterministic iteration.
pub fn discover_files(root: &Path) -> Result<Vec<LabeledFile>> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let io_err = |path: &Path, source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| io_err(root, e))? {
        let subdir = entry.map_err(|e| io_err(root, e))?.path();
        if !subdir.is_dir() {
            continue;
        }
        let subset = subdir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for entry in fs::read_dir(&subdir).map_err(|e| io_err(&subdir, e))? {
            let wav_path = entry.map_err(|e| io_err(&subdir, e))?.path();
            if wav_path.extension().and_then(|e| e.to_str()) != Some("wav") {
                continue;
            }
            let csv_path = wav_path.with_extension("csv");
            if !csv_path.is_file() {
                return Err(Error::MissingPath(csv_path));
            }
            let stem = wav_path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.push(LabeledFile {
                wav_path,
                csv_path,
                subset: subset.clone(),
                stem,
            });
        }
    }
    out.sort_by(|a, b| (a.subset.as_str(), a.stem.as_str()).cmp(&(b.subset.as_str(), b.stem.as_str())));
    if out.is_empty() {
        return Err(Error::MissingPath(root.join("<subset>/<file>.wav")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(dir: &Path, name: &str, content: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn features(frames: usize, dim: usize, hop_seconds: f64) -> FeatureMatrix {
        FeatureMatrix {
            values: Array2::from_shape_fn((frames, dim), |(t, c)| (t * dim + c) as f64),
            frame_hop_seconds: hop_seconds,
        }
    }

    fn single_class_table(events: &[(f64, f64, LabelValue)]) -> AnnotationTable {
        AnnotationTable {
            file: "a.wav".into(),
            class_set: vec!["Q".into()],
            events: events
                .iter()
                .map(|&(onset_s, offset_s, value)| AnnotationEvent {
                    onset_s,
                    offset_s,
                    class_name: "Q".into(),
                    value,
                })
                .collect(),
        }
    }

    #[test]
    fn parse_single_class_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "a.csv",
            "Audiofilename,Starttime,Endtime,Q\na.wav,1.00,1.50,POS\n",
        );
        let table = parse_annotations(&path).unwrap();
        assert_eq!(table.file, "a.wav");
        assert_eq!(table.class_set, vec!["Q"]);
        assert_eq!(
            table.events,
            vec![AnnotationEvent {
                onset_s: 1.0,
                offset_s: 1.5,
                class_name: "Q".into(),
                value: LabelValue::Pos,
            }]
        );
    }

    #[test]
    fn parse_multi_class_row_expands_per_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "m.csv",
            "Audiofilename,Starttime,Endtime,SpA,SpB,SpC\nm.wav,0.5,0.9,POS,UNK,NEG\n",
        );
        let table = parse_annotations(&path).unwrap();
        let values: Vec<(String, LabelValue)> = table
            .events
            .iter()
            .map(|e| (e.class_name.clone(), e.value))
            .collect();
        assert_eq!(
            values,
            vec![
                ("SpA".into(), LabelValue::Pos),
                ("SpB".into(), LabelValue::Unk),
                ("SpC".into(), LabelValue::Neg),
            ]
        );
    }

    #[test]
    fn parse_reversed_times_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "bad.csv",
            "Audiofilename,Starttime,Endtime,Q\na.wav,0.1,0.2,POS\na.wav,2.0,1.0,POS\n",
        );
        match parse_annotations(&path) {
            Err(Error::AnnotationParse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_unknown_token_and_bad_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "tok.csv",
            "Audiofilename,Starttime,Endtime,Q\na.wav,0.1,0.2,MAYBE\n",
        );
        assert!(matches!(
            parse_annotations(&path),
            Err(Error::AnnotationParse { row: 2, .. })
        ));
        let path = write_csv(
            dir.path(),
            "num.csv",
            "Audiofilename,Starttime,Endtime,Q\na.wav,abc,0.2,POS\n",
        );
        assert!(matches!(
            parse_annotations(&path),
            Err(Error::AnnotationParse { row: 2, .. })
        ));
    }

    #[test]
    fn parse_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "h.csv", "file,start,end,Q\na.wav,0.1,0.2,POS\n");
        assert!(matches!(
            parse_annotations(&path),
            Err(Error::AnnotationParse { row: 1, .. })
        ));
    }

    #[test]
    fn extract_event_of_exactly_patch_len_gives_one_patch() {
        let fm = features(100, 2, 0.1);
        // frames 10..18 with patch_frames 8
        let table = single_class_table(&[(1.0, 1.8, LabelValue::Pos)]);
        let pool = extract_patches(&fm, &table, 8).unwrap();
        assert_eq!(pool.count(0, Polarity::Positive), 1);
    }

    #[test]
    fn extract_double_length_event_gives_three_patches() {
        let fm = features(100, 2, 0.1);
        // frames 10..26: length 16 = 2T, hop T/2 = 4 -> starts 10, 14, 18
        let table = single_class_table(&[(1.0, 2.6, LabelValue::Pos)]);
        let pool = extract_patches(&fm, &table, 8).unwrap();
        assert_eq!(pool.count(0, Polarity::Positive), 3);
    }

    #[test]
    fn extract_no_pos_events_tiles_whole_file_with_negatives() {
        let fm = features(100, 2, 0.1);
        let table = single_class_table(&[]);
        let pool = extract_patches(&fm, &table, 8).unwrap();
        assert_eq!(pool.count(0, Polarity::Positive), 0);
        assert_eq!(pool.count(0, Polarity::Negative), 12); // floor(100 / 8)
    }

    #[test]
    fn extract_short_event_repeat_tiles_its_frames() {
        let fm = features(100, 2, 0.1);
        // frames 10..12 (length 2), patch_frames 5
        let table = single_class_table(&[(1.0, 1.2, LabelValue::Pos)]);
        let pool = extract_patches(&fm, &table, 5).unwrap();
        let pos: Vec<&PoolPatch> = pool
            .patches
            .iter()
            .filter(|p| p.polarity == Polarity::Positive)
            .collect();
        assert_eq!(pos.len(), 1);
        let patch = &pos[0].values;
        for j in 0..5 {
            let src = 10 + j % 2;
            for c in 0..2 {
                assert_eq!(patch[[j, c]], fm.values[[src, c]]);
            }
        }
    }

    #[test]
    fn extract_sub_frame_event_still_yields_patch() {
        let fm = features(100, 2, 0.1);
        // 30 ms inside frame 10
        let table = single_class_table(&[(1.01, 1.04, LabelValue::Pos)]);
        let pool = extract_patches(&fm, &table, 4).unwrap();
        let pos: Vec<&PoolPatch> = pool
            .patches
            .iter()
            .filter(|p| p.polarity == Polarity::Positive)
            .collect();
        assert_eq!(pos.len(), 1);
        for j in 0..4 {
            assert_eq!(pos[0].values[[j, 0]], fm.values[[10, 0]]);
        }
    }

    #[test]
    fn negatives_never_overlap_pos_or_unk() {
        let fm = features(200, 1, 0.1);
        let table = single_class_table(&[
            (1.0, 2.0, LabelValue::Pos),
            (5.0, 6.0, LabelValue::Unk),
            (10.0, 11.0, LabelValue::Pos),
        ]);
        let pool = extract_patches(&fm, &table, 6).unwrap();
        let mut masked = vec![false; 200];
        for (onset, offset) in table.masked_intervals("Q") {
            let (s, e) = event_frame_range(&fm, onset, offset);
            for m in masked.iter_mut().take(e).skip(s) {
                *m = true;
            }
        }
        for p in pool.patches.iter().filter(|p| p.polarity == Polarity::Negative) {
            // recover the start frame from the stored values (dim-1 ramp)
            let start = p.values[[0, 0]] as usize;
            for t in start..start + 6 {
                assert!(!masked[t], "negative patch covers masked frame {t}");
            }
        }
    }

    #[test]
    fn unk_is_excluded_from_positives() {
        let fm = features(100, 1, 0.1);
        let table = single_class_table(&[(1.0, 2.0, LabelValue::Unk)]);
        let pool = extract_patches(&fm, &table, 4).unwrap();
        assert_eq!(pool.count(0, Polarity::Positive), 0);
    }

    fn uniform_pools(n_classes: usize, pos_per_class: usize, neg_per_class: usize) -> ClassPools {
        let patch = |v: f64| Array2::from_elem((1, 1), v);
        ClassPools {
            class_names: (0..n_classes).map(|c| format!("class{c:02}")).collect(),
            positives: (0..n_classes)
                .map(|c| (0..pos_per_class).map(|i| patch((c * 100 + i) as f64)).collect())
                .collect(),
            negatives: (0..n_classes)
                .map(|c| (0..neg_per_class).map(|i| patch(-((c * 100 + i) as f64))).collect())
                .collect(),
            patch_frames: 1,
            dim: 1,
        }
    }

    #[test]
    fn episode_capacity_error_when_patches_short() {
        let pools = uniform_pools(3, 1, 5);
        match sample_episode(&pools, 1, 1, 1, 0) {
            Err(Error::EpisodeCapacity(_)) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn episode_same_seed_is_identical() {
        let pools = uniform_pools(8, 12, 12);
        let a = sample_episode(&pools, 4, 3, 2, 97).unwrap();
        let b = sample_episode(&pools, 4, 3, 2, 97).unwrap();
        for (ca, cb) in a.classes.iter().zip(&b.classes) {
            assert_eq!(ca.class_index, cb.class_index);
            assert_eq!(ca.support_ids, cb.support_ids);
            assert_eq!(ca.query_ids, cb.query_ids);
            assert_eq!(ca.support, cb.support);
        }
    }

    #[test]
    fn episode_support_and_query_are_disjoint() {
        let pools = uniform_pools(6, 10, 10);
        for seed in 0..50 {
            let ep = sample_episode(&pools, 3, 4, 3, seed).unwrap();
            assert_eq!(ep.classes.len(), 3);
            for class in &ep.classes {
                assert_eq!(class.support.len(), 4);
                assert_eq!(class.query.len(), 3);
                assert_eq!(class.negatives.len(), 4);
                for id in &class.query_ids {
                    assert!(!class.support_ids.contains(id));
                }
            }
        }
    }

    #[test]
    fn episode_classes_are_distinct() {
        let pools = uniform_pools(5, 6, 6);
        for seed in 0..30 {
            let ep = sample_episode(&pools, 5, 2, 2, seed).unwrap();
            let mut ids: Vec<usize> = ep.classes.iter().map(|c| c.class_index).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 5);
        }
    }

    /// Frequency oracle: with 20 eligible classes and N=5, each class should
    /// appear in a fraction N/20 of episodes, within 3 binomial sigma.
    #[test]
    fn episode_class_sampling_is_uniform() {
        let pools = uniform_pools(20, 4, 4);
        let (n_way, episodes) = (5usize, 10_000usize);
        let mut counts = vec![0usize; 20];
        for seed in 0..episodes as u64 {
            let ep = sample_episode(&pools, n_way, 2, 2, seed).unwrap();
            for class in &ep.classes {
                counts[class.class_index] += 1;
            }
        }
        let p = n_way as f64 / 20.0;
        let mean = episodes as f64 * p;
        let sigma = (episodes as f64 * p * (1.0 - p)).sqrt();
        for (c, &count) in counts.iter().enumerate() {
            let dev = (count as f64 - mean).abs();
            assert!(
                dev <= 3.0 * sigma,
                "class {c}: count {count}, expected {mean:.0} +- {:.0}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn merge_pools_unifies_class_names_across_files() {
        let fm = features(40, 1, 0.1);
        let table_a = AnnotationTable {
            file: "a.wav".into(),
            class_set: vec!["SpB".into(), "SpA".into()],
            events: vec![AnnotationEvent {
                onset_s: 0.0,
                offset_s: 1.0,
                class_name: "SpB".into(),
                value: LabelValue::Pos,
            }],
        };
        let table_b = AnnotationTable {
            file: "b.wav".into(),
            class_set: vec!["SpA".into()],
            events: vec![AnnotationEvent {
                onset_s: 0.0,
                offset_s: 1.0,
                class_name: "SpA".into(),
                value: LabelValue::Pos,
            }],
        };
        let pool_a = extract_patches(&fm, &table_a, 4).unwrap();
        let pool_b = extract_patches(&fm, &table_b, 4).unwrap();
        let merged = ClassPools::merge(&[(&table_a, &pool_a), (&table_b, &pool_b)]).unwrap();
        assert_eq!(merged.class_names, vec!["SpA", "SpB"]);
        let a = merged.class_names.iter().position(|n| n == "SpA").unwrap();
        let b = merged.class_names.iter().position(|n| n == "SpB").unwrap();
        assert!(merged.positives[a].len() >= 1); // from file b
        assert!(merged.positives[b].len() >= 1); // from file a
        assert!(merged.negatives[a].len() >= 1);
    }

    #[test]
    fn merge_pools_rejects_mismatched_shapes() {
        let fm_a = features(40, 1, 0.1);
        let fm_b = features(40, 2, 0.1);
        let table = single_class_table(&[(0.0, 1.0, LabelValue::Pos)]);
        let pool_a = extract_patches(&fm_a, &table, 4).unwrap();
        let pool_b = extract_patches(&fm_b, &table, 4).unwrap();
        assert!(matches!(
            ClassPools::merge(&[(&table, &pool_a), (&table, &pool_b)]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn discover_files_walks_subsets_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for (subset, stem) in [("b_set", "y"), ("a_set", "z"), ("a_set", "x")] {
            let sub = dir.path().join(subset);
            fs::create_dir_all(&sub).unwrap();
            fs::write(sub.join(format!("{stem}.wav")), b"").unwrap();
            fs::write(sub.join(format!("{stem}.csv")), b"").unwrap();
        }
        let files = discover_files(dir.path()).unwrap();
        let keys: Vec<(String, String)> =
            files.iter().map(|f| (f.subset.clone(), f.stem.clone())).collect();
        assert_eq!(
            keys,
            vec![
                ("a_set".into(), "x".into()),
                ("a_set".into(), "z".into()),
                ("b_set".into(), "y".into()),
            ]
        );
    }

    #[test]
    fn discover_files_requires_sibling_csv() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("set");
        fs::create_dir_all(&sub).unwrap();
        fs::write(sub.join("lonely.wav"), b"").unwrap();
        assert!(matches!(
            discover_files(dir.path()),
            Err(Error::MissingPath(_))
        ));
    }

    #[test]
    fn discover_files_missing_root() {
        assert!(matches!(
            discover_files(Path::new("/nonexistent/dataset")),
            Err(Error::MissingPath(_))
        ));
    }
}
