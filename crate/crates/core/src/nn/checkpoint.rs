//! Versioned binary checkpoints: network parameters, running stats, the
//! settings needed to rebuild the feature pipeline, and (optionally) the
//! optimizer state for exact training resumption.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, OptimizerState};
use super::EmbeddingNetwork;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;

const MAGIC: &[u8; 8] = b"FSEDCKPT";
const VERSION: u32 = 1;

/// Everything inference needs to rebuild the exact input pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub feature: FeatureConfig,
    pub patch_frames: usize,
    pub sample_rate: u32,
}

pub struct LoadedCheckpoint {
    pub net: EmbeddingNetwork<f32>,
    pub meta: CheckpointMeta,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn ck_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_string(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_tensor(w: &mut impl Write, data: &ArrayD<f32>) -> std::io::Result<()> {
    w.write_u8(data.ndim() as u8)?;
    for &d in data.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in data.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> std::io::Result<ArrayD<f32>> {
    let ndim = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0.0f32; len];
    for v in data.iter_mut() {
        *v = r.read_f32::<LittleEndian>()?;
    }
    ArrayD::from_shape_vec(shape, data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn save_checkpoint(
    path: &Path,
    net: &EmbeddingNetwork<f32>,
    meta: &CheckpointMeta,
    optimizer: Option<&OptimizerState<f32>>,
) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    let meta_toml =
        toml::to_string(meta).map_err(|e| ck_err(path, format!("meta encode: {e}")))?;

    let inner = (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_string(&mut w, &meta_toml)?;
        w.write_f64::<LittleEndian>(net.leaky_slope)?;
        w.write_u32::<LittleEndian>(net.channels().len() as u32)?;
        for &c in net.channels() {
            w.write_u32::<LittleEndian>(c as u32)?;
        }

        let tensors = net.named_tensors();
        w.write_u32::<LittleEndian>(tensors.len() as u32)?;
        for (name, data) in &tensors {
            write_string(&mut w, name)?;
            write_tensor(&mut w, data)?;
        }

        match optimizer {
            Some(opt) => {
                let (step, moments) = opt.raw_state();
                let moments = moments.unwrap_or(&[]);
                w.write_u8(1)?;
                w.write_f64::<LittleEndian>(opt.cfg.base_lr)?;
                w.write_f64::<LittleEndian>(opt.cfg.decay_gamma)?;
                w.write_u32::<LittleEndian>(opt.cfg.decay_interval as u32)?;
                w.write_f64::<LittleEndian>(opt.cfg.beta1)?;
                w.write_f64::<LittleEndian>(opt.cfg.beta2)?;
                w.write_f64::<LittleEndian>(opt.cfg.eps)?;
                w.write_u64::<LittleEndian>(step)?;
                w.write_u32::<LittleEndian>(moments.len() as u32)?;
                for (m, v) in moments {
                    write_tensor(&mut w, m)?;
                    write_tensor(&mut w, v)?;
                }
            }
            None => w.write_u8(0)?,
        }
        w.flush()
    })();
    inner.map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut r = BufReader::new(fs::File::open(path).map_err(io_err)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(ck_err(path, "not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }

    let meta_toml = read_string(&mut r).map_err(io_err)?;
    let meta: CheckpointMeta =
        toml::from_str(&meta_toml).map_err(|e| ck_err(path, format!("meta decode: {e}")))?;

    let leaky_slope = r.read_f64::<LittleEndian>().map_err(io_err)?;
    let n_blocks = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut channels = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        channels.push(r.read_u32::<LittleEndian>().map_err(io_err)? as usize);
    }

    let mut net = EmbeddingNetwork::<f32>::new(&channels, leaky_slope, 0);
    let n_tensors = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    for _ in 0..n_tensors {
        let name = read_string(&mut r).map_err(io_err)?;
        let data = read_tensor(&mut r).map_err(io_err)?;
        net.set_tensor(&name, data)?;
    }

    let optimizer = match r.read_u8().map_err(io_err)? {
        0 => None,
        1 => {
            let cfg = AdamConfig {
                base_lr: r.read_f64::<LittleEndian>().map_err(io_err)?,
                decay_gamma: r.read_f64::<LittleEndian>().map_err(io_err)?,
                decay_interval: r.read_u32::<LittleEndian>().map_err(io_err)? as usize,
                beta1: r.read_f64::<LittleEndian>().map_err(io_err)?,
                beta2: r.read_f64::<LittleEndian>().map_err(io_err)?,
                eps: r.read_f64::<LittleEndian>().map_err(io_err)?,
            };
            let step = r.read_u64::<LittleEndian>().map_err(io_err)?;
            let n = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let mut moments = Vec::with_capacity(n);
            for _ in 0..n {
                let m = read_tensor(&mut r).map_err(io_err)?;
                let v = read_tensor(&mut r).map_err(io_err)?;
                moments.push((m, v));
            }
            Some(OptimizerState::from_raw(cfg, step, moments))
        }
        other => return Err(ck_err(path, format!("bad optimizer flag {other}"))),
    };

    Ok(LoadedCheckpoint {
        net,
        meta,
        optimizer,
    })
}
