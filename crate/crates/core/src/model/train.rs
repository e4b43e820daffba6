use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::{grad, Adam, ModelParams, TrainConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::sampler::TrainingSample;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses seen during the epoch.
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub header: String,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# {}\nepoch\tmean_loss\twall_seconds\n", self.header);
        for e in &self.epochs {
            let _ = writeln!(out, "{}\t{:.10}\t{:.3}", e.epoch, e.mean_loss, e.wall_seconds);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains a freshly initialised network.
pub fn train(samples: &[TrainingSample], store: &FeatureStore, vocab: Vocabulary, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let params = ModelParams::init(vocab, cfg, seed::derive(cfg.seed, "init"));
    train_from(params, samples, store, cfg)
}

/// Continues training from `params`. Samples without negatives carry no signal
/// for the sampled softmax and are skipped.
pub fn train_from(mut params: ModelParams, samples: &[TrainingSample], store: &FeatureStore, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    params.check_config(cfg)?;
    let usable: Vec<&TrainingSample> = samples.iter().filter(|s| s.negative_count() > 0).collect();
    if usable.len() < samples.len() {
        log::info!("skipping {} samples without negatives", samples.len() - usable.len());
    }
    let mut log = TrainLog {
        header: format!(
            "d={} heads={} key_dim={} batch={} lr={} epochs={} samples={}",
            cfg.embedding_dim,
            cfg.heads,
            cfg.key_dim,
            cfg.batch_size,
            cfg.learning_rate,
            cfg.epochs,
            usable.len()
        ),
        ..TrainLog::default()
    };
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let shuffle_seed = seed::derive(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut seed::keyed_rng(shuffle_seed, epoch as u64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainingSample> = chunk.iter().map(|&i| usable[i].clone()).collect();
            let (loss, g) = grad(&params, store, &batch, cfg);
            if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            adam.step(&mut params.data, &g);
            loss_sum += loss * batch.len() as f64;
            log.batch_losses.push(loss);
        }
        let mean_loss = if usable.is_empty() { 0.0 } else { loss_sum / usable.len() as f64 };
        log::info!("epoch {epoch}: mean loss {mean_loss:.6}");
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, log))
}
