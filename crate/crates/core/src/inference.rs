//! Per-file five-shot detection: positive prototype from the file's first
//! labeled events, negative prototypes from randomly sampled background
//! segments (optionally ensembled over several sets), a sliding query
//! window, and interval post-processing.
//!
//! Only the first `n_shots` POS rows of a file's annotation are treated as
//! visible; later POS events are unlabeled from the detector's point of
//! view and may therefore leak into the negative pool, exactly as in the
//! five-shot evaluation protocol.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{event_frame_range, tile_patch, AnnotationTable, LabelValue};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::fnv1a64;
use crate::nn::optim::{AdamConfig, OptimizerState};
use crate::nn::{batch_from_patches, EmbeddingNetwork, Mode};
use crate::protonet::{compute_prototype, episode_loss, softmax_over_distances, DistanceFn, EpisodeEmbeddings};

/// Shortest and longest admissible query window, in frames. The lower bound
/// is what the embedding network accepts; the upper bound keeps very long
/// calls from producing a window that never fits the file.
pub const MIN_QUERY_FRAMES: usize = 8;
pub const MAX_QUERY_FRAMES: usize = 128;

const EMBED_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Transductive {
    Off,
    On { epochs: usize, lr: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub n_shots: usize,
    pub neg_segments_per_set: usize,
    pub n_negative_sets: usize,
    pub prob_threshold: f64,
    /// Minimum event length as a fraction of the mean shot duration.
    pub min_event_frac: f64,
    /// Sample negative prototypes from random subsets of the pool. When
    /// off, a single prototype is built from every pool segment.
    pub negative_hard_sampling: bool,
    pub transductive: Transductive,
    pub distance: DistanceFn,
    pub rng_seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            n_shots: 5,
            neg_segments_per_set: 150,
            n_negative_sets: 3,
            prob_threshold: 0.5,
            min_event_frac: 0.6,
            negative_hard_sampling: true,
            transductive: Transductive::Off,
            distance: DistanceFn::SquaredEuclidean,
            rng_seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_shots == 0 {
            return Err(Error::InvalidConfig("n_shots must be >= 1".into()));
        }
        if self.n_negative_sets == 0 || self.neg_segments_per_set == 0 {
            return Err(Error::InvalidConfig(
                "need at least one negative set of at least one segment".into(),
            ));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "prob_threshold ({}) must lie in (0, 1)",
                self.prob_threshold
            )));
        }
        if self.min_event_frac < 0.0 {
            return Err(Error::InvalidConfig("min_event_frac must be >= 0".into()));
        }
        if let Transductive::On { lr, .. } = self.transductive {
            if lr <= 0.0 {
                return Err(Error::InvalidConfig("transductive lr must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Detected events for one file, sorted and non-overlapping, all starting
/// at or after the last shot's offset.
#[derive(Debug, Clone, PartialEq)]
pub struct EventList {
    pub file: String,
    pub events: Vec<(f64, f64)>,
}

/// Shot geometry shared by detection and transductive adaptation.
struct ShotLayout {
    /// (onset, offset) of the visible shots, in seconds
    shots: Vec<(f64, f64)>,
    mean_shot_seconds: f64,
    last_shot_offset_s: f64,
    window_frames: usize,
}

fn shot_layout(
    features: &FeatureMatrix,
    table: &AnnotationTable,
    class: &str,
    cfg: &InferenceConfig,
) -> Result<ShotLayout> {
    let all_pos = table.pos_events(class);
    if all_pos.len() < cfg.n_shots {
        return Err(Error::InsufficientShots {
            file: table.file.clone(),
            needed: cfg.n_shots,
            found: all_pos.len(),
        });
    }
    let shots: Vec<(f64, f64)> = all_pos[..cfg.n_shots].to_vec();
    let mean_shot_seconds =
        shots.iter().map(|(on, off)| off - on).sum::<f64>() / shots.len() as f64;
    let raw = (mean_shot_seconds / features.frame_hop_seconds).round() as usize;
    Ok(ShotLayout {
        last_shot_offset_s: shots.last().expect("n_shots >= 1").1,
        shots,
        mean_shot_seconds,
        window_frames: raw.clamp(MIN_QUERY_FRAMES, MAX_QUERY_FRAMES),
    })
}

/// Window-length patches covering one shot: sliding with half-window hop
/// for long events, repeat-tiled for short ones.
fn shot_patches(features: &FeatureMatrix, shot: (f64, f64), window: usize) -> Vec<Array2<f64>> {
    let (start, end) = event_frame_range(features, shot.0, shot.1);
    let len = end - start;
    if len == 0 {
        return Vec::new();
    }
    if len < window {
        return vec![tile_patch(features, start, len, window)];
    }
    let hop = (window / 2).max(1);
    let mut out = Vec::new();
    let mut s0 = start;
    while s0 + window <= end {
        out.push(features.values.slice(s![s0..s0 + window, ..]).to_owned());
        s0 += hop;
    }
    out
}

/// Start frames of the negative pool: full windows tiled over every region
/// not covered by a visible shot or an UNK interval.
fn negative_pool_starts(
    features: &FeatureMatrix,
    table: &AnnotationTable,
    class: &str,
    shots: &[(f64, f64)],
    window: usize,
) -> Vec<usize> {
    let frames = features.frames();
    let mut masked = vec![false; frames];
    let mut mask = |on: f64, off: f64| {
        let (a, b) = event_frame_range(features, on, off);
        for m in &mut masked[a..b] {
            *m = true;
        }
    };
    for &(on, off) in shots {
        mask(on, off);
    }
    for ev in &table.events {
        if ev.class_name == class && ev.value == LabelValue::Unk {
            mask(ev.onset_s, ev.offset_s);
        }
    }

    let mut starts = Vec::new();
    let mut run_start = None;
    for f in 0..=frames {
        let clear = f < frames && !masked[f];
        match (clear, run_start) {
            (true, None) => run_start = Some(f),
            (false, Some(s0)) => {
                let mut p = s0;
                while p + window <= f {
                    starts.push(p);
                    p += window;
                }
                run_start = None;
            }
            _ => {}
        }
    }
    starts
}

/// Everything detection needs for one file, with all embeddings computed
/// up front so that repeated detection under different negative-set seeds
/// (ensembling experiments) costs almost nothing.
pub struct FileInferenceContext {
    pub file: String,
    pub class_name: String,
    pub window_frames: usize,
    pub mean_shot_seconds: f64,
    pub last_shot_offset_s: f64,
    pos_prototype: Array1<f32>,
    neg_pool: Array2<f32>,
    queries: Array2<f32>,
    query_spans: Vec<(f64, f64)>,
}

/// Embed equally-shaped patches in bounded chunks, eval mode.
fn embed_patches(
    net: &mut EmbeddingNetwork<f32>,
    patches: &[Array2<f64>],
) -> Result<Array2<f32>> {
    let mut rows: Option<Array2<f32>> = None;
    for chunk in patches.chunks(EMBED_CHUNK) {
        let batch = batch_from_patches::<f32>(chunk)?;
        let emb = net.forward(&batch, Mode::Eval)?;
        rows = Some(match rows {
            None => emb,
            Some(acc) => ndarray::concatenate(Axis(0), &[acc.view(), emb.view()])
                .expect("embedding stack"),
        });
    }
    rows.ok_or_else(|| Error::ShapeMismatch {
        expected: "at least one patch".into(),
        got: "0 patches".into(),
    })
}

pub fn build_context(
    features: &FeatureMatrix,
    table: &AnnotationTable,
    class: &str,
    net: &EmbeddingNetwork<f32>,
    cfg: &InferenceConfig,
) -> Result<FileInferenceContext> {
    cfg.validate()?;
    let layout = shot_layout(features, table, class, cfg)?;
    let window = layout.window_frames;

    let mut support: Vec<Array2<f64>> = Vec::new();
    for &shot in &layout.shots {
        support.extend(shot_patches(features, shot, window));
    }
    if support.is_empty() {
        return Err(Error::InsufficientShots {
            file: table.file.clone(),
            needed: cfg.n_shots,
            found: 0,
        });
    }

    let pool_starts = negative_pool_starts(features, table, class, &layout.shots, window);
    if pool_starts.is_empty() {
        return Err(Error::EmptyNegativePool {
            file: table.file.clone(),
        });
    }
    let pool: Vec<Array2<f64>> = pool_starts
        .iter()
        .map(|&s0| features.values.slice(s![s0..s0 + window, ..]).to_owned())
        .collect();

    let hop = features.frame_hop_seconds;
    let first_query = (layout.last_shot_offset_s / hop).ceil() as usize;
    let q_hop = (window / 2).max(1);
    let mut query_patches: Vec<Array2<f64>> = Vec::new();
    let mut query_spans = Vec::new();
    let mut s0 = first_query;
    while s0 + window <= features.frames() {
        query_patches.push(features.values.slice(s![s0..s0 + window, ..]).to_owned());
        query_spans.push((
            features.frame_to_seconds(s0),
            features.frame_to_seconds(s0 + window),
        ));
        s0 += q_hop;
    }

    let mut net = net.clone();
    let support_emb = embed_patches(&mut net, &support)?;
    let neg_pool = embed_patches(&mut net, &pool)?;
    let queries = if query_patches.is_empty() {
        Array2::zeros((0, support_emb.ncols()))
    } else {
        embed_patches(&mut net, &query_patches)?
    };

    Ok(FileInferenceContext {
        file: table.file.clone(),
        class_name: class.to_string(),
        window_frames: window,
        mean_shot_seconds: layout.mean_shot_seconds,
        last_shot_offset_s: layout.last_shot_offset_s,
        pos_prototype: compute_prototype(support_emb.view()),
        neg_pool,
        queries,
        query_spans,
    })
}

/// Mean across ensemble members, per position.
pub fn ensemble_average(members: &[Vec<f64>]) -> Vec<f64> {
    let m = members.len();
    assert!(m > 0, "ensemble needs at least one member");
    let len = members[0].len();
    assert!(
        members.iter().all(|v| v.len() == len),
        "ensemble members must be equal length"
    );
    let mut out = vec![0.0; len];
    for member in members {
        for (o, &p) in out.iter_mut().zip(member.iter()) {
            *o += p;
        }
    }
    for o in &mut out {
        *o /= m as f64;
    }
    out
}

/// Seed for one negative set. Depends on the file, the segment count, the
/// set index, and the run seed only, so models compared at equal counts
/// see identical sets.
pub fn negative_set_seed(rng_seed: u64, file: &str, count: usize, set_index: usize) -> u64 {
    fnv1a64(&[
        b"negative-set",
        &rng_seed.to_le_bytes(),
        file.as_bytes(),
        &(count as u64).to_le_bytes(),
        &(set_index as u64).to_le_bytes(),
    ])
}

impl FileInferenceContext {
    pub fn n_queries(&self) -> usize {
        self.query_spans.len()
    }

    /// Number of candidate windows the negative sets are drawn from.
    pub fn negative_pool_len(&self) -> usize {
        self.neg_pool.nrows()
    }

    /// Negative prototypes per the configuration: sampled subsets, or the
    /// whole pool as one prototype when hard sampling is off.
    fn negative_prototypes(&self, cfg: &InferenceConfig) -> Vec<Array1<f32>> {
        let pool_n = self.neg_pool.nrows();
        if !cfg.negative_hard_sampling {
            return vec![compute_prototype(self.neg_pool.view())];
        }
        let take = cfg.neg_segments_per_set.min(pool_n);
        (0..cfg.n_negative_sets)
            .map(|set_index| {
                let seed = negative_set_seed(cfg.rng_seed, &self.file, cfg.neg_segments_per_set, set_index);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let idx = rand::seq::index::sample(&mut rng, pool_n, take);
                let mut sum = Array1::<f32>::zeros(self.neg_pool.ncols());
                for i in idx.iter() {
                    sum += &self.neg_pool.row(i);
                }
                sum / take as f32
            })
            .collect()
    }

    /// Ensemble-averaged positive probability per query window.
    pub fn probabilities(&self, cfg: &InferenceConfig) -> Vec<f64> {
        let prototypes = self.negative_prototypes(cfg);
        let members: Vec<Vec<f64>> = prototypes
            .iter()
            .map(|neg| {
                self.queries
                    .rows()
                    .into_iter()
                    .map(|q| {
                        let d_pos = cfg.distance.distance(q, self.pos_prototype.view());
                        let d_neg = cfg.distance.distance(q, neg.view());
                        let (p_pos, _) = softmax_over_distances(&[d_pos], &[d_neg]);
                        p_pos[0] as f64
                    })
                    .collect()
            })
            .collect();
        ensemble_average(&members)
    }

    /// Threshold, merge consecutive positive windows, and drop events
    /// shorter than `min_event_frac` of the mean shot duration.
    pub fn events_from_probabilities(&self, probs: &[f64], cfg: &InferenceConfig) -> EventList {
        assert_eq!(probs.len(), self.query_spans.len());
        let mut intervals: Vec<(f64, f64)> = Vec::new();
        let mut run: Option<(f64, f64)> = None;
        for (i, &p) in probs.iter().enumerate() {
            let span = self.query_spans[i];
            if p >= cfg.prob_threshold {
                run = Some(match run {
                    None => span,
                    Some((on, _)) => (on, span.1),
                });
            } else if let Some(r) = run.take() {
                intervals.push(r);
            }
        }
        if let Some(r) = run {
            intervals.push(r);
        }

        let min_dur = cfg.min_event_frac * self.mean_shot_seconds;
        let events = merge_intervals(
            intervals
                .into_iter()
                .filter(|(on, off)| off - on >= min_dur)
                .collect(),
        );
        EventList {
            file: self.file.clone(),
            events,
        }
    }

    pub fn detect(&self, cfg: &InferenceConfig) -> EventList {
        self.events_from_probabilities(&self.probabilities(cfg), cfg)
    }
}

/// Coalesce overlapping or touching intervals; input need not be sorted.
pub fn merge_intervals(mut intervals: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    intervals.sort_by(|a, b| a.partial_cmp(b).expect("finite interval endpoints"));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
    for (on, off) in intervals {
        match out.last_mut() {
            Some(last) if on <= last.1 => last.1 = last.1.max(off),
            _ => out.push((on, off)),
        }
    }
    out
}

/// Run detection on one file. The checkpoint network is never mutated;
/// transductive adaptation fine-tunes a private copy.
pub fn detect_file(
    features: &FeatureMatrix,
    table: &AnnotationTable,
    class: &str,
    net: &EmbeddingNetwork<f32>,
    cfg: &InferenceConfig,
) -> Result<EventList> {
    cfg.validate()?;
    let adapted;
    let net = match cfg.transductive {
        Transductive::Off => net,
        Transductive::On { epochs, lr } => {
            adapted = transductive_adapt(net, features, table, class, cfg, epochs, lr)?;
            &adapted
        }
    };
    let ctx = build_context(features, table, class, net, cfg)?;
    Ok(ctx.detect(cfg))
}

/// Center crop of a shot at window length, repeat-tiled if too short.
fn shot_center_patch(features: &FeatureMatrix, shot: (f64, f64), window: usize) -> Option<Array2<f64>> {
    let (start, end) = event_frame_range(features, shot.0, shot.1);
    let len = end - start;
    if len == 0 {
        return None;
    }
    if len < window {
        return Some(tile_patch(features, start, len, window));
    }
    let s0 = start + (len - window) / 2;
    Some(features.values.slice(s![s0..s0 + window, ..]).to_owned())
}

/// Fine-tune a copy of the network on the file's own shots: one-way
/// episodes with the shots split into support and query halves and
/// negatives sampled fresh from the file's background each epoch.
pub fn transductive_adapt(
    net: &EmbeddingNetwork<f32>,
    features: &FeatureMatrix,
    table: &AnnotationTable,
    class: &str,
    cfg: &InferenceConfig,
    epochs: usize,
    lr: f64,
) -> Result<EmbeddingNetwork<f32>> {
    let mut net = net.clone();
    if epochs == 0 {
        return Ok(net);
    }
    let layout = shot_layout(features, table, class, cfg)?;
    let window = layout.window_frames;

    let shot_patches: Vec<Array2<f64>> = layout
        .shots
        .iter()
        .filter_map(|&s| shot_center_patch(features, s, window))
        .collect();
    if shot_patches.len() < 2 {
        return Ok(net); // nothing to hold out as a query
    }
    let pool_starts = negative_pool_starts(features, table, class, &layout.shots, window);
    if pool_starts.is_empty() {
        return Err(Error::EmptyNegativePool {
            file: table.file.clone(),
        });
    }

    let mut opt = OptimizerState::new(AdamConfig {
        base_lr: lr,
        decay_gamma: 1.0,
        ..AdamConfig::default()
    });
    let n_support = shot_patches.len() - (shot_patches.len() / 2).min(2).max(1);
    for epoch in 0..epochs {
        let seed = fnv1a64(&[
            b"transductive",
            &cfg.rng_seed.to_le_bytes(),
            table.file.as_bytes(),
            &(epoch as u64).to_le_bytes(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order = rand::seq::index::sample(&mut rng, shot_patches.len(), shot_patches.len());
        let order: Vec<usize> = order.into_iter().collect();
        let (support_ids, query_ids) = order.split_at(n_support);

        let k = support_ids.len();
        let neg_ids = rand::seq::index::sample(&mut rng, pool_starts.len(), k.min(pool_starts.len()));
        let mut batch: Vec<Array2<f64>> = Vec::new();
        for &i in support_ids {
            batch.push(shot_patches[i].clone());
        }
        let mut k_neg = 0;
        for i in neg_ids.iter() {
            let s0 = pool_starts[i];
            batch.push(features.values.slice(s![s0..s0 + window, ..]).to_owned());
            k_neg += 1;
        }
        while k_neg < k {
            // tiny pools: reuse segments so support and negatives stay balanced
            let s0 = pool_starts[k_neg % pool_starts.len()];
            batch.push(features.values.slice(s![s0..s0 + window, ..]).to_owned());
            k_neg += 1;
        }
        for &i in query_ids {
            batch.push(shot_patches[i].clone());
        }

        let q = query_ids.len();
        let input = batch_from_patches::<f32>(&batch)?;
        net.zero_grads();
        let emb_rows = net.forward(&input, Mode::Train)?;
        let emb = EpisodeEmbeddings {
            n_way: 1,
            k_shot: k,
            q_query: q,
            support: emb_rows.slice(s![..k, ..]).to_owned(),
            negatives: emb_rows.slice(s![k..2 * k, ..]).to_owned(),
            queries: emb_rows.slice(s![2 * k.., ..]).to_owned(),
        };
        let out = episode_loss(&emb, cfg.distance)?;
        let grad = ndarray::concatenate(
            Axis(0),
            &[out.d_support.view(), out.d_negatives.view(), out.d_queries.view()],
        )
        .expect("episode gradient stack");
        net.backward(&grad)?;
        opt.step(&mut net, 0)?;
    }
    Ok(net)
}

/// Write predictions in submission shape: one row per event.
pub fn write_predictions(path: &Path, lists: &[EventList]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(w, "Audiofilename,Starttime,Endtime").map_err(io_err)?;
    for list in lists {
        for &(on, off) in &list.events {
            writeln!(w, "{},{on:.6},{off:.6}", list.file).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a predictions CSV back into per-file event lists, sorted by file.
pub fn read_predictions(path: &Path) -> Result<Vec<EventList>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::AnnotationParse {
            path: path.to_path_buf(),
            row: 1,
            detail: e.to_string(),
        })?;
    let parse_err = |row: usize, detail: String| Error::AnnotationParse {
        path: path.to_path_buf(),
        row,
        detail,
    };
    {
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
        let expect = ["Audiofilename", "Starttime", "Endtime"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(parse_err(1, format!("expected header {expect:?}, got {got:?}")));
        }
    }

    let mut by_file: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != 3 {
            return Err(parse_err(row, format!("expected 3 fields, got {}", record.len())));
        }
        let time = |j: usize, name: &str| -> Result<f64> {
            record[j]
                .parse::<f64>()
                .map_err(|_| parse_err(row, format!("{name} {:?} is not a number", &record[j])))
        };
        let (on, off) = (time(1, "Starttime")?, time(2, "Endtime")?);
        if off <= on {
            return Err(parse_err(row, format!("event ends ({off}) before it starts ({on})")));
        }
        by_file.entry(record[0].to_string()).or_default().push((on, off));
    }
    Ok(by_file
        .into_iter()
        .map(|(file, mut events)| {
            events.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
            EventList { file, events }
        })
        .collect())
}
