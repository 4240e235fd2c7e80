//! WAV decoding and band-limited resampling.
//!
//! Recordings are decoded to mono float clips and brought to the pipeline
//! sample rate (22 050 Hz by default) before feature extraction.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded mono audio clip. Amplitudes live in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_path: String,
}

impl AudioClip {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Decode a RIFF/WAV file to a mono clip.
///
/// PCM 8/16/24/32-bit and IEEE float 32/64-bit are accepted; multichannel
/// audio is averaged to mono and integer PCM is scaled to `[-1, 1]`.
pub fn decode_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_wav_bytes(&bytes, path)
}

fn malformed(path: &Path, detail: &str) -> Error {
    Error::MalformedWav {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

fn decode_wav_bytes(bytes: &[u8], path: &Path) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed(path, "missing RIFF/WAVE header"));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut off = 12usize;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let body_start = off + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(malformed(path, "chunk extends past end of file"));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => fmt = Some(parse_fmt(body, path)?),
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        off = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| malformed(path, "no fmt chunk"))?;
    let data = data.ok_or_else(|| malformed(path, "no data chunk"))?;
    if fmt.channels == 0 {
        return Err(malformed(path, "zero channels"));
    }
    if fmt.sample_rate == 0 {
        return Err(malformed(path, "zero sample rate"));
    }

    let bytes_per_sample = (fmt.bits_per_sample as usize).div_ceil(8);
    let frame_size = bytes_per_sample * fmt.channels as usize;
    if frame_size == 0 || data.len() < frame_size {
        return Err(Error::EmptyAudio {
            path: path.to_path_buf(),
        });
    }
    let n_frames = data.len() / frame_size;
    let channels = fmt.channels as usize;

    let decode_one: fn(&[u8]) -> f32 = match (fmt.format, fmt.bits_per_sample) {
        (FORMAT_PCM, 8) => |b| (b[0] as f32 - 128.0) / 128.0,
        (FORMAT_PCM, 16) => |b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0,
        (FORMAT_PCM, 24) => |b| {
            let v = ((b[2] as i32) << 24 | (b[1] as i32) << 16 | (b[0] as i32) << 8) >> 8;
            v as f32 / 8_388_608.0
        },
        (FORMAT_PCM, 32) => {
            |b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32 / 2_147_483_648.0
        }
        (FORMAT_IEEE_FLOAT, 32) => |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
        (FORMAT_IEEE_FLOAT, 64) => |b| {
            f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]) as f32
        },
        (format, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: format!("format tag {format}, {bits} bits per sample"),
            })
        }
    };

    let mut samples = Vec::with_capacity(n_frames);
    let inv_channels = 1.0f64 / channels as f64;
    for f in 0..n_frames {
        let frame = &data[f * frame_size..(f + 1) * frame_size];
        let mut acc = 0.0f64;
        for c in 0..channels {
            acc += decode_one(&frame[c * bytes_per_sample..]) as f64;
        }
        samples.push((acc * inv_channels).clamp(-1.0, 1.0) as f32);
    }

    Ok(AudioClip {
        samples,
        sample_rate: fmt.sample_rate,
        source_path: path.display().to_string(),
    })
}

fn parse_fmt(body: &[u8], path: &Path) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(malformed(path, "fmt chunk too short"));
    }
    let mut format = u16::from_le_bytes([body[0], body[1]]);
    let channels = u16::from_le_bytes([body[2], body[3]]);
    let sample_rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
    let bits_per_sample = u16::from_le_bytes([body[14], body[15]]);
    if format == FORMAT_EXTENSIBLE {
        // the real format code is the first word of the SubFormat GUID
        if body.len() < 26 {
            return Err(malformed(path, "extensible fmt chunk too short"));
        }
        format = u16::from_le_bytes([body[24], body[25]]);
    }
    Ok(FmtChunk {
        format,
        channels,
        sample_rate,
        bits_per_sample,
    })
}

/// Write a mono 16-bit PCM WAV file. Samples are clamped to `[-1, 1]`.
pub fn write_wav_pcm16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        // same 1/32768 scale the decoder uses, so a roundtrip only loses
        // the quantization half-step
        let v = (f64::from(s.clamp(-1.0, 1.0)) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Number of sinc zero crossings kept on each side of the kernel center.
const SINC_ZEROS: f64 = 24.0;
/// Kaiser shape parameter; stopband attenuation well past the -60 dB bound.
const KAISER_BETA: f64 = 12.0;
/// Transition-band headroom below the output Nyquist.
const ROLLOFF: f64 = 0.945;

/// Resample a clip with a Kaiser-windowed sinc (polyphase) filter.
///
/// Output length is `round(len * target / source)`; passing the clip's own
/// rate returns the samples unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidSampleRate(target_rate));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = clip.sample_rate as u64;
    let tgt = target_rate as u64;
    let g = gcd(src, tgt);
    // positions advance by m/l input samples per output sample
    let (m, l) = (src / g, tgt / g);

    let in_len = clip.samples.len() as u64;
    let out_len = ((in_len as u128 * tgt as u128 + (src as u128) / 2) / src as u128) as usize;

    // cutoff in cycles per input sample
    let fc = 0.5 * (tgt as f64 / src as f64).min(1.0) * ROLLOFF;
    let half = (SINC_ZEROS / (2.0 * fc)).ceil() as i64;

    // one tap table per output phase, each normalized to unit DC gain
    let n_phases = l as usize;
    let taps_per_phase = (2 * half + 2) as usize;
    let mut taps = vec![0.0f64; n_phases * taps_per_phase];
    for r in 0..n_phases {
        let frac = (r as u64 * m % l) as f64 / l as f64;
        let row = &mut taps[r * taps_per_phase..(r + 1) * taps_per_phase];
        let mut sum = 0.0;
        for (j, w) in row.iter_mut().enumerate() {
            let t = frac - (j as i64 - half) as f64;
            *w = windowed_sinc(t, fc, half as f64);
            sum += *w;
        }
        if sum != 0.0 {
            for w in row.iter_mut() {
                *w /= sum;
            }
        }
    }

    let x = &clip.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let num = n * m;
        let q = (num / l) as i64;
        let phase = (num % l) as usize;
        let row = &taps[phase * taps_per_phase..(phase + 1) * taps_per_phase];
        let mut acc = 0.0f64;
        for (j, &w) in row.iter().enumerate() {
            let k = q + j as i64 - half;
            if k >= 0 && (k as usize) < x.len() {
                acc += w * x[k as usize] as f64;
            }
        }
        out.push(acc as f32);
    }

    Ok(AudioClip {
        samples: out,
        sample_rate: target_rate,
        source_path: clip.source_path.clone(),
    })
}

fn windowed_sinc(t: f64, fc: f64, half: f64) -> f64 {
    if t.abs() > half {
        return 0.0;
    }
    let sinc = if t == 0.0 {
        1.0
    } else {
        let a = std::f64::consts::PI * 2.0 * fc * t;
        a.sin() / a
    };
    2.0 * fc * sinc * kaiser(t / half, KAISER_BETA)
}

fn kaiser(x: f64, beta: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - x * x).sqrt()) / bessel_i0(beta)
}

fn bessel_i0(x: f64) -> f64 {
    // power series; converges quickly for the argument range used here
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..=40 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f32>, rate: u32) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: rate,
            source_path: "test".into(),
        }
    }

    fn sine(freq: f64, rate: u32, len: usize, amp: f32) -> Vec<f32> {
        (0..len)
            .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / rate as f64).sin() as f32)
            .collect()
    }

    fn wav_bytes(channels: u16, bits: u16, format: u16, frames: &[Vec<i32>]) -> Vec<u8> {
        let bps = (bits as usize).div_ceil(8);
        let mut data = Vec::new();
        for frame in frames {
            for &v in frame {
                data.extend_from_slice(&v.to_le_bytes()[..bps]);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&44100u32.to_le_bytes());
        out.extend_from_slice(&(44100 * channels as u32 * bps as u32).to_le_bytes());
        out.extend_from_slice(&(channels * bps as u16).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(&data);
        out
    }

    #[test]
    fn pcm16_scaling() {
        let bytes = wav_bytes(1, 16, FORMAT_PCM, &[vec![16384]]);
        let c = decode_wav_bytes(&bytes, Path::new("t.wav")).unwrap();
        assert_eq!(c.samples, vec![0.5]);
        assert_eq!(c.sample_rate, 44100);
    }

    #[test]
    fn stereo_averages_to_mono() {
        // 0.2 and 0.4 in 16-bit PCM
        let a = (0.2f64 * 32768.0).round() as i32;
        let b = (0.4f64 * 32768.0).round() as i32;
        let bytes = wav_bytes(2, 16, FORMAT_PCM, &[vec![a, b]]);
        let c = decode_wav_bytes(&bytes, Path::new("t.wav")).unwrap();
        assert_eq!(c.samples.len(), 1);
        assert!((c.samples[0] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn truncated_header_is_error() {
        let bytes = wav_bytes(1, 16, FORMAT_PCM, &[vec![100], vec![-100]]);
        let err = decode_wav_bytes(&bytes[..10], Path::new("t.wav")).unwrap_err();
        assert!(matches!(err, Error::MalformedWav { .. }));
    }

    #[test]
    fn unsupported_encoding_is_distinct_error() {
        let bytes = wav_bytes(1, 16, 6 /* a-law */, &[vec![0]]);
        let err = decode_wav_bytes(&bytes, Path::new("t.wav")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedEncoding { .. }));
    }

    #[test]
    fn zero_length_audio_is_distinct_error() {
        let bytes = wav_bytes(1, 16, FORMAT_PCM, &[]);
        let err = decode_wav_bytes(&bytes, Path::new("t.wav")).unwrap_err();
        assert!(matches!(err, Error::EmptyAudio { .. }));
    }

    #[test]
    fn float32_and_pcm24_roundtrip() {
        let v = 0.25f32;
        let mut data = Vec::new();
        data.extend_from_slice(&v.to_le_bytes());
        let mut bytes = wav_bytes(1, 32, FORMAT_IEEE_FLOAT, &[]);
        let dlen = bytes.len();
        bytes[dlen - 4..].copy_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&data);
        let riff = (bytes.len() - 8) as u32;
        bytes[4..8].copy_from_slice(&riff.to_le_bytes());
        let c = decode_wav_bytes(&bytes, Path::new("t.wav")).unwrap();
        assert_eq!(c.samples, vec![0.25]);

        let bytes = wav_bytes(1, 24, FORMAT_PCM, &[vec![4_194_304]]);
        let c = decode_wav_bytes(&bytes, Path::new("t.wav")).unwrap();
        assert!((c.samples[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn wav_writer_roundtrips_through_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let samples = sine(440.0, 22050, 2205, 0.8);
        write_wav_pcm16(&path, &samples, 22050).unwrap();
        let c = decode_wav(&path).unwrap();
        assert_eq!(c.sample_rate, 22050);
        assert_eq!(c.samples.len(), samples.len());
        for (a, b) in c.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn resample_identity_when_rates_match() {
        let c = clip(sine(500.0, 22050, 1000, 0.5), 22050);
        let r = resample(&c, 22050).unwrap();
        assert_eq!(r.samples, c.samples);
    }

    #[test]
    fn resample_length_is_exact() {
        let c = clip(vec![0.0; 44100], 44100);
        let r = resample(&c, 22050).unwrap();
        assert_eq!(r.samples.len(), 22050);
        assert_eq!(r.sample_rate, 22050);

        let c = clip(vec![0.0; 48000], 48000);
        let r = resample(&c, 22050).unwrap();
        assert_eq!(r.samples.len(), 22050);
    }

    #[test]
    fn invalid_target_rate_rejected() {
        let c = clip(vec![0.0; 100], 44100);
        assert!(matches!(
            resample(&c, 0),
            Err(Error::InvalidSampleRate(0))
        ));
    }

    /// DFT oracle: a 1 kHz sine resampled 44100 -> 22050 keeps its peak at
    /// 1 kHz and spills less than -60 dB into far bins.
    #[test]
    fn resample_sine_spectrum_is_clean() {
        let c = clip(sine(1000.0, 44100, 44100, 0.8), 44100);
        let r = resample(&c, 22050).unwrap();
        // skip filter edge transients, window against leakage
        let trimmed = &r.samples[256..r.samples.len() - 256];
        let n = trimmed.len();
        let spec = blackman_harris_dft_power(trimmed);
        let peak_bin = spec
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let expect = 1000.0 * n as f64 / 22050.0;
        assert!((peak_bin as f64 - expect).abs() <= 1.0, "peak at {peak_bin}");
        let peak = spec[peak_bin];
        let worst = spec
            .iter()
            .enumerate()
            .filter(|(i, _)| (*i as i64 - peak_bin as i64).unsigned_abs() > 50)
            .map(|(_, &p)| p)
            .fold(0.0f64, f64::max);
        assert!(
            worst < peak * 1e-6,
            "sidelobe {:.1} dB",
            10.0 * (worst / peak).log10()
        );
    }

    #[test]
    fn resample_preserves_band_limited_energy() {
        let c = clip(sine(1000.0, 44100, 44100, 0.8), 44100);
        let r = resample(&c, 22050).unwrap();
        let mean_sq = |s: &[f32]| {
            let inner = &s[256..s.len() - 256];
            inner.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / inner.len() as f64
        };
        let p_in = mean_sq(&c.samples);
        let p_out = mean_sq(&r.samples);
        assert!((p_out / p_in - 1.0).abs() < 0.01, "ratio {}", p_out / p_in);
    }

    fn blackman_harris_dft_power(x: &[f32]) -> Vec<f64> {
        use rustfft::num_complex::Complex;
        let n = x.len();
        let (a0, a1, a2, a3) = (0.35875, 0.48829, 0.14128, 0.01168);
        let mut buf: Vec<Complex<f64>> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let w = a0 - a1 * t.cos() + a2 * (2.0 * t).cos() - a3 * (3.0 * t).cos();
                Complex::new(v as f64 * w, 0.0)
            })
            .collect();
        rustfft::FftPlanner::new()
            .plan_fft_forward(n)
            .process(&mut buf);
        buf[..n / 2].iter().map(|c| c.norm_sqr()).collect()
    }
}
