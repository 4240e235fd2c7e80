//! Acoustic feature extraction.
//!
//! Waveforms become frame-by-dimension matrices: Hann-windowed power STFT,
//! Slaney-style mel filterbank, log compression, orthonormal DCT-II MFCCs,
//! regression deltas and per-channel energy normalization (PCEN), plus the
//! stacked combinations used for feature comparisons.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Which feature stack to feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Mel,
    LogMel,
    LogMelMfcc,
    LogMelDeltaMfcc,
    Pcen,
    PcenMfcc,
    PcenDeltaMfcc,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 7] = [
        FeatureSet::Mel,
        FeatureSet::LogMel,
        FeatureSet::LogMelMfcc,
        FeatureSet::LogMelDeltaMfcc,
        FeatureSet::Pcen,
        FeatureSet::PcenMfcc,
        FeatureSet::PcenDeltaMfcc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Mel => "mel",
            FeatureSet::LogMel => "log_mel",
            FeatureSet::LogMelMfcc => "log_mel_mfcc",
            FeatureSet::LogMelDeltaMfcc => "log_mel_delta_mfcc",
            FeatureSet::Pcen => "pcen",
            FeatureSet::PcenMfcc => "pcen_mfcc",
            FeatureSet::PcenDeltaMfcc => "pcen_delta_mfcc",
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureSet::ALL
            .into_iter()
            .find(|fs| fs.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown feature set `{s}` (expected one of: {})",
                    FeatureSet::ALL.map(|f| f.name()).join(", ")
                ))
            })
    }
}

/// PCEN front-end parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcenParams {
    pub alpha: f64,
    pub delta: f64,
    pub r: f64,
    pub smoothing: f64,
    pub epsilon: f64,
}

impl Default for PcenParams {
    fn default() -> Self {
        PcenParams {
            alpha: 0.98,
            delta: 2.0,
            r: 0.5,
            smoothing: 0.025,
            epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub window_len: usize,
    pub hop_len: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub feature_set: FeatureSet,
    pub pcen: PcenParams,
    pub log_floor: f64,
    pub delta_width: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window_len: 1024,
            hop_len: 256,
            n_mels: 128,
            n_mfcc: 32,
            feature_set: FeatureSet::LogMel,
            pcen: PcenParams::default(),
            log_floor: 1e-10,
            delta_width: 9,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_len == 0 || self.window_len < self.hop_len {
            return Err(Error::InvalidConfig(format!(
                "window_len ({}) must be >= hop_len ({}) > 0",
                self.window_len, self.hop_len
            )));
        }
        if self.n_mfcc > self.n_mels {
            return Err(Error::InvalidConfig(format!(
                "n_mfcc ({}) must be <= n_mels ({})",
                self.n_mfcc, self.n_mels
            )));
        }
        if self.delta_width < 3 || self.delta_width % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "delta_width ({}) must be odd and >= 3",
                self.delta_width
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::InvalidConfig("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Feature dimension produced by `build_features`.
    pub fn feature_dim(&self) -> usize {
        match self.feature_set {
            FeatureSet::Mel | FeatureSet::LogMel | FeatureSet::Pcen => self.n_mels,
            _ => self.n_mels + self.n_mfcc,
        }
    }
}

/// A frames-by-dim real matrix plus the seconds spanned by one frame hop.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub frame_hop_seconds: f64,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn seconds_to_frame(&self, t: f64) -> usize {
        (t / self.frame_hop_seconds).floor().max(0.0) as usize
    }

    pub fn frame_to_seconds(&self, frame: usize) -> f64 {
        frame as f64 * self.frame_hop_seconds
    }
}

fn reflect_index(i: i64, len: usize) -> usize {
    // bounce reflection without repeating the edge sample
    let len = len as i64;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut j = i.rem_euclid(period);
    if j >= len {
        j = period - j;
    }
    j as usize
}

/// Hann-windowed, center-padded power spectrogram:
/// `1 + floor(len / hop)` frames by `window_len / 2 + 1` bins.
pub fn stft_power(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let n = cfg.window_len;
    let hop = cfg.hop_len;
    let len = clip.samples.len();
    if len == 0 {
        return Err(Error::EmptyAudio {
            path: clip.source_path.clone().into(),
        });
    }
    let n_frames = 1 + len / hop;
    let n_bins = n / 2 + 1;
    let pad = (n / 2) as i64;

    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut out = Array2::<f64>::zeros((n_frames, n_bins));
    for t in 0..n_frames {
        let start = (t * hop) as i64 - pad;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + i as i64, len);
            *b = Complex::new(clip.samples[idx] as f64 * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let mut row = out.row_mut(t);
        for (k, v) in row.iter_mut().enumerate() {
            *v = buf[k].norm_sqr();
        }
    }

    Ok(FeatureMatrix {
        values: out,
        frame_hop_seconds: hop as f64 / clip.sample_rate as f64,
    })
}

fn hz_to_mel(f: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * ((m - min_log_mel) * logstep).exp()
    } else {
        f_sp * m
    }
}

/// Triangular Slaney mel filterbank with area normalization,
/// `n_mels` rows by `n_fft / 2 + 1` columns, fmin = 0, fmax = Nyquist.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let fmax = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(fmax);
    let band_edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut fb = Array2::<f64>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (band_edges[m], band_edges[m + 1], band_edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            let w = rising.min(falling).max(0.0);
            fb[[m, k]] = w * norm;
        }
    }
    fb
}

/// Apply the mel filterbank to a power spectrogram.
pub fn mel_spectrogram(
    power: &FeatureMatrix,
    cfg: &FeatureConfig,
    sample_rate: u32,
) -> Result<FeatureMatrix> {
    let n_bins = cfg.window_len / 2 + 1;
    if power.dim() != n_bins {
        return Err(Error::ShapeMismatch {
            expected: format!("{n_bins} spectrum bins"),
            got: format!("{}", power.dim()),
        });
    }
    let fb = mel_filterbank(cfg.n_mels, cfg.window_len, sample_rate);
    Ok(FeatureMatrix {
        values: power.values.dot(&fb.t()),
        frame_hop_seconds: power.frame_hop_seconds,
    })
}

/// Elementwise `ln(x + log_floor)`.
pub fn log_mel(mel: &FeatureMatrix, cfg: &FeatureConfig) -> FeatureMatrix {
    FeatureMatrix {
        values: mel.values.mapv(|v| (v + cfg.log_floor).ln()),
        frame_hop_seconds: mel.frame_hop_seconds,
    }
}

/// Orthonormal DCT-II along the mel axis, keeping the first `n_mfcc`
/// coefficients.
pub fn mfcc(log_mel: &FeatureMatrix, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let n = log_mel.dim();
    if cfg.n_mfcc > n {
        return Err(Error::InvalidConfig(format!(
            "n_mfcc ({}) exceeds input dim ({n})",
            cfg.n_mfcc
        )));
    }
    let mut basis = Array2::<f64>::zeros((cfg.n_mfcc, n));
    for k in 0..cfg.n_mfcc {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for j in 0..n {
            basis[[k, j]] = scale
                * (std::f64::consts::PI * (2.0 * j as f64 + 1.0) * k as f64 / (2.0 * n as f64))
                    .cos();
        }
    }
    Ok(FeatureMatrix {
        values: log_mel.values.dot(&basis.t()),
        frame_hop_seconds: log_mel.frame_hop_seconds,
    })
}

/// Regression-window delta features with edge replication.
pub fn delta(features: &FeatureMatrix, width: usize) -> Result<FeatureMatrix> {
    if width < 3 || width % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "delta width ({width}) must be odd and >= 3"
        )));
    }
    let half = (width / 2) as i64;
    let denom: f64 = 2.0 * (1..=half).map(|d| (d * d) as f64).sum::<f64>();
    let (frames, dim) = (features.frames() as i64, features.dim());
    let x = &features.values;
    let clamp = |t: i64| t.clamp(0, frames - 1) as usize;

    let mut out = Array2::<f64>::zeros((frames as usize, dim));
    for t in 0..frames {
        for c in 0..dim {
            let mut acc = 0.0;
            for d in 1..=half {
                acc += d as f64 * (x[[clamp(t + d), c]] - x[[clamp(t - d), c]]);
            }
            out[[t as usize, c]] = acc / denom;
        }
    }
    Ok(FeatureMatrix {
        values: out,
        frame_hop_seconds: features.frame_hop_seconds,
    })
}

/// Per-channel energy normalization:
/// `((E / (eps + M)^alpha) + delta)^r - delta^r` with a first-order IIR
/// smoother `M(t) = (1 - s) M(t-1) + s E(t)`, `M(0) = E(0)`.
pub fn pcen(mel: &FeatureMatrix, cfg: &FeatureConfig) -> FeatureMatrix {
    let p = &cfg.pcen;
    let (frames, dim) = (mel.frames(), mel.dim());
    let mut out = Array2::<f64>::zeros((frames, dim));
    let delta_r = p.delta.powf(p.r);
    for c in 0..dim {
        let mut m = 0.0;
        for t in 0..frames {
            let e = mel.values[[t, c]];
            m = if t == 0 {
                e
            } else {
                (1.0 - p.smoothing) * m + p.smoothing * e
            };
            let gain = e / (p.epsilon + m).powf(p.alpha);
            out[[t, c]] = (gain + p.delta).powf(p.r) - delta_r;
        }
    }
    FeatureMatrix {
        values: out,
        frame_hop_seconds: mel.frame_hop_seconds,
    }
}

/// Full waveform-to-features pipeline for the configured feature set.
/// Stacked variants concatenate along the feature dimension.
pub fn build_features(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let power = stft_power(clip, cfg)?;
    let mel = mel_spectrogram(&power, cfg, clip.sample_rate)?;
    let out = match cfg.feature_set {
        FeatureSet::Mel => mel,
        FeatureSet::LogMel => log_mel(&mel, cfg),
        FeatureSet::LogMelMfcc => {
            let lm = log_mel(&mel, cfg);
            let mf = mfcc(&lm, cfg)?;
            concat_features(&lm, &mf)
        }
        FeatureSet::LogMelDeltaMfcc => {
            let lm = log_mel(&mel, cfg);
            let dm = delta(&mfcc(&lm, cfg)?, cfg.delta_width)?;
            concat_features(&lm, &dm)
        }
        FeatureSet::Pcen => pcen(&mel, cfg),
        FeatureSet::PcenMfcc => {
            let pc = pcen(&mel, cfg);
            let mf = mfcc(&log_mel(&mel, cfg), cfg)?;
            concat_features(&pc, &mf)
        }
        FeatureSet::PcenDeltaMfcc => {
            let pc = pcen(&mel, cfg);
            let dm = delta(&mfcc(&log_mel(&mel, cfg), cfg)?, cfg.delta_width)?;
            concat_features(&pc, &dm)
        }
    };
    Ok(out)
}

fn concat_features(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
    let (frames, da, db) = (a.frames(), a.dim(), b.dim());
    let mut values = Array2::<f64>::zeros((frames, da + db));
    values.slice_mut(s![.., ..da]).assign(&a.values);
    values.slice_mut(s![.., da..]).assign(&b.values);
    FeatureMatrix {
        values,
        frame_hop_seconds: a.frame_hop_seconds,
    }
}

/// Per-file standardization: each feature dimension to zero mean and unit
/// variance over the frame axis.
pub fn standardize(features: &FeatureMatrix) -> FeatureMatrix {
    let frames = features.frames() as f64;
    let mut values = features.values.clone();
    for mut col in values.columns_mut() {
        let mean = col.sum() / frames;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / frames;
        let inv_std = 1.0 / var.sqrt().max(1e-8);
        col.mapv_inplace(|v| (v - mean) * inv_std);
    }
    FeatureMatrix {
        values,
        frame_hop_seconds: features.frame_hop_seconds,
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"FSEDFM01";

/// Dump a feature matrix as little-endian binary:
/// magic `FSEDFM01`, frames u64, dim u64, hop-seconds f64, then row-major f64
/// values.
pub fn write_feature_matrix(path: &Path, fm: &FeatureMatrix) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    w.write_all(FEATURE_MAGIC).map_err(io_err)?;
    w.write_u64::<LittleEndian>(fm.frames() as u64)
        .map_err(io_err)?;
    w.write_u64::<LittleEndian>(fm.dim() as u64).map_err(io_err)?;
    w.write_f64::<LittleEndian>(fm.frame_hop_seconds)
        .map_err(io_err)?;
    for v in fm.values.iter() {
        w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut r = std::io::BufReader::new(fs::File::open(path).map_err(io_err)?);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::InvalidConfig(format!(
            "{}: not a feature dump (bad magic)",
            path.display()
        )));
    }
    let frames = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let dim = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let hop = r.read_f64::<LittleEndian>().map_err(io_err)?;
    let mut data = vec![0.0f64; frames * dim];
    for v in data.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
    }
    Ok(FeatureMatrix {
        values: Array2::from_shape_vec((frames, dim), data)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?,
        frame_hop_seconds: hop,
    })
}

/// Dump a feature matrix as CSV: a `frames,dim,hop_seconds` header pair of
/// lines, then one row per frame.
pub fn write_feature_matrix_csv(path: &Path, fm: &FeatureMatrix) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(w, "frames,dim,hop_seconds").map_err(io_err)?;
    writeln!(w, "{},{},{}", fm.frames(), fm.dim(), fm.frame_hop_seconds).map_err(io_err)?;
    for row in fm.values.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
