//! Episodic training: sample an episode, embed its patches in one batch,
//! apply the prototypical loss, and keep the checkpoint with the best
//! validation-episode accuracy.

use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_episode, ClassPools, Episode};
use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::nn::optim::{early_stopping, AdamConfig, OptimizerState};
use crate::nn::{batch_from_patches, EmbeddingNetwork, Mode};
use crate::protonet::{episode_loss, DistanceFn, EpisodeEmbeddings};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub episodes_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_episodes: usize,
    pub distance: DistanceFn,
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    pub base_lr: f64,
    pub decay_gamma: f64,
    pub decay_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_way: 10,
            k_shot: 5,
            q_query: 5,
            episodes_per_epoch: 100,
            max_epochs: 50,
            patience: 10,
            val_episodes: 20,
            distance: DistanceFn::SquaredEuclidean,
            channels: vec![64, 128, 64],
            leaky_slope: 0.01,
            base_lr: 0.001,
            decay_gamma: 0.65,
            decay_interval: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.q_query == 0 {
            return Err(Error::InvalidConfig("episode shape must be positive".into()));
        }
        if self.episodes_per_epoch == 0 || self.max_epochs == 0 || self.val_episodes == 0 {
            return Err(Error::InvalidConfig(
                "episodes_per_epoch, max_epochs, and val_episodes must be positive".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidConfig("need at least one conv block".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.base_lr,
            decay_gamma: self.decay_gamma,
            decay_interval: self.decay_interval,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub net: EmbeddingNetwork<f32>,
    pub best_epoch: usize,
    pub history: Vec<TrainEpoch>,
}

/// Flatten an episode into one forward batch:
/// all support patches, then all negatives, then all queries.
fn episode_batch(episode: &Episode) -> Vec<ndarray::Array2<f64>> {
    let mut patches = Vec::new();
    for class in &episode.classes {
        patches.extend(class.support.iter().cloned());
    }
    for class in &episode.classes {
        patches.extend(class.negatives.iter().cloned());
    }
    for class in &episode.classes {
        patches.extend(class.query.iter().cloned());
    }
    patches
}

/// Embed one episode and evaluate the prototypical loss.
/// Returns (loss, correct queries); in train mode also backpropagates.
fn run_episode(
    net: &mut EmbeddingNetwork<f32>,
    episode: &Episode,
    distance: DistanceFn,
    mode: Mode,
) -> Result<(f64, usize)> {
    let (n, k, q) = (episode.n_way, episode.k_shot, episode.q_query);
    let batch = batch_from_patches::<f32>(&episode_batch(episode))?;
    let embeddings = net.forward(&batch, mode)?;

    let nk = n * k;
    let emb = EpisodeEmbeddings {
        n_way: n,
        k_shot: k,
        q_query: q,
        support: embeddings.slice(s![..nk, ..]).to_owned(),
        negatives: embeddings.slice(s![nk..2 * nk, ..]).to_owned(),
        queries: embeddings.slice(s![2 * nk.., ..]).to_owned(),
    };
    let out = episode_loss(&emb, distance)?;

    if mode == Mode::Train {
        let grad = concatenate(
            Axis(0),
            &[out.d_support.view(), out.d_negatives.view(), out.d_queries.view()],
        )
        .expect("episode gradient stack");
        net.backward(&grad)?;
    }
    Ok((out.loss as f64, out.correct))
}

/// Accuracy over seeded validation episodes, eval-mode network.
fn validation_accuracy(
    net: &mut EmbeddingNetwork<f32>,
    pools: &ClassPools,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..cfg.val_episodes {
        let seed = fnv1a64(&[
            b"val-episode",
            &cfg.seed.to_le_bytes(),
            &(epoch as u64).to_le_bytes(),
            &(i as u64).to_le_bytes(),
        ]);
        let episode = sample_episode(pools, cfg.n_way, cfg.k_shot, cfg.q_query, seed)?;
        let (_, c) = run_episode(net, &episode, cfg.distance, Mode::Eval)?;
        correct += c;
        total += cfg.n_way * cfg.q_query;
    }
    Ok(correct as f64 / total as f64)
}

/// Train an embedding network episodically. Validation episodes come from
/// `val_pools` when given, otherwise from a held-out seed stream over the
/// training pools. The returned network is the best-accuracy checkpoint.
pub fn train_protonet(
    train_pools: &ClassPools,
    val_pools: Option<&ClassPools>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = EmbeddingNetwork::<f32>::new(&cfg.channels, cfg.leaky_slope, cfg.seed);
    let mut opt = OptimizerState::new(cfg.adam());
    let val_pools = val_pools.unwrap_or(train_pools);

    let mut history: Vec<TrainEpoch> = Vec::new();
    let mut accuracies: Vec<f64> = Vec::new();
    let mut best: Option<(usize, EmbeddingNetwork<f32>)> = None;

    for epoch in 0..cfg.max_epochs {
        let mut loss_sum = 0.0f64;
        for i in 0..cfg.episodes_per_epoch {
            let seed = fnv1a64(&[
                b"train-episode",
                &cfg.seed.to_le_bytes(),
                &(epoch as u64).to_le_bytes(),
                &(i as u64).to_le_bytes(),
            ]);
            let episode = sample_episode(train_pools, cfg.n_way, cfg.k_shot, cfg.q_query, seed)?;
            net.zero_grads();
            let (loss, _) = run_episode(&mut net, &episode, cfg.distance, Mode::Train)?;
            opt.step(&mut net, epoch)?;
            loss_sum += loss;
        }
        if !net.all_params_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite parameters after epoch {epoch}; lower the learning rate"
            )));
        }

        let val_accuracy = validation_accuracy(&mut net, val_pools, cfg, epoch)?;
        accuracies.push(val_accuracy);
        history.push(TrainEpoch {
            epoch,
            train_loss: loss_sum / cfg.episodes_per_epoch as f64,
            val_accuracy,
            lr: opt.lr_at(epoch),
        });

        let (best_epoch, stop) = early_stopping(&accuracies, cfg.patience);
        if best.as_ref().map(|(e, _)| *e) != Some(best_epoch) {
            best = Some((best_epoch, net.clone()));
        }
        if stop.is_some() {
            break;
        }
    }

    let (best_epoch, net) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        net,
        best_epoch,
        history,
    })
}

/// Per-epoch log as CSV: epoch, mean episode loss, validation accuracy, lr.
pub fn write_training_log(path: &Path, history: &[TrainEpoch]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(w, "epoch,train_loss,val_accuracy,lr").map_err(io_err)?;
    for row in history {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.8}",
            row.epoch, row.train_loss, row.val_accuracy, row.lr
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
