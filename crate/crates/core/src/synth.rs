//! Synthetic bioacoustic corpus: three tone "species" over colored-noise
//! backgrounds, written as PCM16 WAV plus annotation CSV. Used by the
//! end-to-end tests and handy for smoke-testing the pipeline without data.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::write_wav_pcm16;
use crate::error::{Error, Result};
use crate::fnv1a64;

pub const SPECIES: [&str; 3] = ["ampmod", "upchirp", "trill"];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub n_train_files: usize,
    pub n_eval_files: usize,
    /// Labeled events per species in each training file.
    pub train_events_per_species: usize,
    /// Labeled events in each (single-species) eval file.
    pub eval_events: usize,
    pub seed: u64,
    /// Give eval files a different noise spectrum than training.
    pub shifted_background: bool,
    /// Scatter unlabeled confuser tones through eval backgrounds.
    pub distractors: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate: 22050,
            n_train_files: 10,
            n_eval_files: 4,
            train_events_per_species: 12,
            eval_events: 20,
            seed: 0,
            shifted_background: false,
            distractors: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusLayout {
    pub train_root: PathBuf,
    pub eval_root: PathBuf,
}

#[derive(Debug, Clone, Copy)]
struct ScheduledEvent {
    species: usize,
    onset_s: f64,
    offset_s: f64,
}

fn rms_normalize(samples: &mut [f32], target: f64) {
    let sum: f64 = samples.iter().map(|&s| s as f64 * s as f64).sum();
    let rms = (sum / samples.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let gain = (target / rms) as f32;
        for s in samples {
            *s *= gain;
        }
    }
}

/// Colored noise floor. Training files get low-passed noise; the shifted
/// variant is high-frequency-weighted with a mains-style hum underneath.
fn background(n: usize, sample_rate: f64, shifted: bool, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; n];
    if shifted {
        let mut prev = 0.0f64;
        for (i, o) in out.iter_mut().enumerate() {
            let x: f64 = rng.random_range(-1.0..1.0);
            *o = (0.5 * (x - prev)) as f32;
            prev = x;
            let t = i as f64 / sample_rate;
            *o += (0.45 * (2.0 * PI * 60.0 * t).sin() + 0.2 * (2.0 * PI * 120.0 * t).sin()) as f32;
        }
        rms_normalize(&mut out, 0.03);
    } else {
        let mut y = 0.0f64;
        for o in out.iter_mut() {
            let x: f64 = rng.random_range(-1.0..1.0);
            y = 0.95 * y + 0.05 * x;
            *o = y as f32;
        }
        rms_normalize(&mut out, 0.02);
    }
    out
}

/// One call of the given species: amplitude-modulated tone, rising chirp,
/// or gated trill, with short fades at both edges.
fn synth_event(species: usize, n: usize, sample_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dur = n as f64 / sample_rate;
    let amp = 0.25 * rng.random_range(0.85..1.15);
    let phase0: f64 = rng.random_range(0.0..2.0 * PI);
    let mut out = vec![0.0f32; n];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sample_rate;
        let v = match species {
            0 => (2.0 * PI * 900.0 * t + phase0).sin() * (0.65 + 0.35 * (2.0 * PI * 30.0 * t).sin()),
            1 => {
                let sweep = 2200.0 * t + 0.5 * (3200.0 - 2200.0) / dur * t * t;
                (2.0 * PI * sweep + phase0).sin()
            }
            _ => {
                let gate = 0.5 * (1.0 + (8.0 * (2.0 * PI * 25.0 * t).sin()).tanh());
                (2.0 * PI * 5000.0 * t + phase0).sin() * gate
            }
        };
        *o = (amp * v) as f32;
    }
    apply_fades(&mut out, sample_rate);
    out
}

/// Unlabeled confuser: a 1.5 kHz warble that shares texture with the
/// species without matching any of their frequency bands.
fn synth_distractor(n: usize, sample_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let amp = 0.2 * rng.random_range(0.85..1.15);
    let phase0: f64 = rng.random_range(0.0..2.0 * PI);
    let mut out = vec![0.0f32; n];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sample_rate;
        let v = (2.0 * PI * (1500.0 * t + 40.0 / (2.0 * PI * 3.0) * (2.0 * PI * 3.0 * t).sin())
            + phase0)
            .sin()
            * (0.7 + 0.3 * (2.0 * PI * 20.0 * t).sin());
        *o = (amp * v) as f32;
    }
    apply_fades(&mut out, sample_rate);
    out
}

fn apply_fades(samples: &mut [f32], sample_rate: f64) {
    let fade = ((0.01 * sample_rate) as usize).min(samples.len() / 2).max(1);
    for i in 0..fade {
        let w = 0.5 * (1.0 - (PI * i as f64 / fade as f64).cos());
        samples[i] *= w as f32;
        let j = samples.len() - 1 - i;
        samples[j] *= w as f32;
    }
}

fn mix_at(samples: &mut [f32], clip: &[f32], onset_s: f64, sample_rate: f64) {
    let start = (onset_s * sample_rate).round() as usize;
    for (i, &v) in clip.iter().enumerate() {
        if let Some(s) = samples.get_mut(start + i) {
            *s += v;
        }
    }
}

/// Lay out events left to right with random gaps. `species_of` picks the
/// species of the i-th event.
fn schedule_events(
    count: usize,
    species_of: impl Fn(usize) -> usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ScheduledEvent> {
    let mut events = Vec::with_capacity(count);
    let mut t = rng.random_range(0.8..1.2);
    for i in 0..count {
        let dur = rng.random_range(0.25..0.45);
        events.push(ScheduledEvent {
            species: species_of(i),
            onset_s: t,
            offset_s: t + dur,
        });
        t += dur + rng.random_range(0.6..1.5);
    }
    events
}

fn render_file(
    events: &[ScheduledEvent],
    cfg: &SynthConfig,
    shifted: bool,
    with_distractors: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let sr = cfg.sample_rate as f64;
    let total_s = events.last().map(|e| e.offset_s).unwrap_or(0.0) + 1.0;
    let mut samples = background((total_s * sr) as usize, sr, shifted, rng);
    for ev in events {
        let n = ((ev.offset_s - ev.onset_s) * sr) as usize;
        let clip = synth_event(ev.species, n, sr, rng);
        mix_at(&mut samples, &clip, ev.onset_s, sr);
    }
    if with_distractors {
        // Drop confusers into gaps that are wide enough to hold one.
        for pair in events.windows(2) {
            let gap_start = pair[0].offset_s + 0.15;
            let gap_end = pair[1].onset_s - 0.15;
            if gap_end - gap_start < 0.45 || rng.random_range(0.0..1.0) > 0.75 {
                continue;
            }
            let dur = rng.random_range(0.2..0.35);
            let onset = rng.random_range(gap_start..(gap_end - dur));
            let clip = synth_distractor((dur * sr) as usize, sr, rng);
            mix_at(&mut samples, &clip, onset, sr);
        }
    }
    samples
}

fn write_annotation_csv(
    path: &Path,
    wav_name: &str,
    columns: &[&str],
    events: &[ScheduledEvent],
) -> Result<()> {
    let mut text = String::from("Audiofilename,Starttime,Endtime");
    for c in columns {
        text.push(',');
        text.push_str(c);
    }
    text.push('\n');
    for ev in events {
        write!(text, "{wav_name},{:.6},{:.6}", ev.onset_s, ev.offset_s).expect("string write");
        for c in columns {
            let value = if SPECIES[ev.species] == *c { "POS" } else { "NEG" };
            text.push(',');
            text.push_str(value);
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Generate the full corpus under `dir`: `train/<subset>/` with
/// three-species files and `eval/<subset>/` with single-species files.
pub fn generate_corpus(dir: &Path, cfg: &SynthConfig) -> Result<CorpusLayout> {
    let train_subset = dir.join("train").join("synthtrain");
    let eval_subset = dir.join("eval").join("syntheval");
    for d in [&train_subset, &eval_subset] {
        std::fs::create_dir_all(d).map_err(|source| Error::Io {
            path: d.clone(),
            source,
        })?;
    }

    for fi in 0..cfg.n_train_files {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&[
            b"synth-train",
            &cfg.seed.to_le_bytes(),
            &(fi as u64).to_le_bytes(),
        ]));
        let count = cfg.train_events_per_species * SPECIES.len();
        let offset = fi; // rotate the species cycle between files
        let events = schedule_events(count, |i| (i + offset) % SPECIES.len(), &mut rng);
        let samples = render_file(&events, cfg, false, false, &mut rng);

        let wav_name = format!("train_{fi:02}.wav");
        write_wav_pcm16(&train_subset.join(&wav_name), &samples, cfg.sample_rate)?;
        write_annotation_csv(
            &train_subset.join(format!("train_{fi:02}.csv")),
            &wav_name,
            &SPECIES,
            &events,
        )?;
    }

    for fi in 0..cfg.n_eval_files {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&[
            b"synth-eval",
            &cfg.seed.to_le_bytes(),
            &(fi as u64).to_le_bytes(),
        ]));
        let species = fi % SPECIES.len();
        let events = schedule_events(cfg.eval_events, |_| species, &mut rng);
        let samples = render_file(
            &events,
            cfg,
            cfg.shifted_background,
            cfg.distractors,
            &mut rng,
        );

        let wav_name = format!("eval_{fi:02}.wav");
        write_wav_pcm16(&eval_subset.join(&wav_name), &samples, cfg.sample_rate)?;
        write_annotation_csv(
            &eval_subset.join(format!("eval_{fi:02}.csv")),
            &wav_name,
            &[SPECIES[species]],
            &events,
        )?;
    }

    Ok(CorpusLayout {
        train_root: dir.join("train"),
        eval_root: dir.join("eval"),
    })
}
