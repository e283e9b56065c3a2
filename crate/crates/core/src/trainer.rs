//! Episodic training loop.
//!
//! Each episode: sample → augment → embed support and query in one training
//! forward pass → prototypes → loss → backward. Every `meta_batch` episodes
//! the accumulated gradients are clipped per parameter and the optimizer
//! steps. Episode `e` draws sampling, augmentation and dropout randomness from
//! its own substreams, and validation rounds use a separate seed space, so
//! neither the validation schedule nor skipped episodes shift the randomness
//! of later episodes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugmentConfig, Dataset};
use crate::evaluator::{self, EvalError, EvalOptions};
use crate::optim::{clip_gradients, OptimConfig, OptimError, OptimState};
use crate::protonet::{self, DistanceMode, ProtoError};
use crate::rng::{Purpose, SeedStreams, DEFAULT_SEED};
use crate::sampler::{build_class_index, sample_episode, ClassIndex, EpisodeSpec, SamplerError};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};
use crate::vit::{Mode, ParamsError, ViTParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub spec: EpisodeSpec,
    pub eval_freq: usize,
    pub val_episodes: usize,
    pub clip_max_norm: f64,
    pub seed: u64,
    /// Episodes whose gradients are summed (each scaled by 1/meta_batch)
    /// before one optimizer step.
    pub meta_batch: usize,
    pub distance: DistanceMode,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    /// Largest tolerated fraction of skipped episodes.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            spec: EpisodeSpec::default(),
            eval_freq: 10,
            val_episodes: 50,
            clip_max_norm: 1.0,
            seed: DEFAULT_SEED,
            meta_batch: 1,
            distance: DistanceMode::Squared,
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            max_skip_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.spec.validate()?;
        self.optim.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.eval_freq == 0 || self.val_episodes == 0 || self.meta_batch == 0 {
            return bad("eval_freq, val_episodes and meta_batch must be positive");
        }
        if self.clip_max_norm.is_nan() || self.clip_max_norm <= 0.0 {
            return bad("clip_max_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return bad("max_skip_fraction must lie in [0, 1]");
        }
        self.augment.validate().map_err(TrainError::Config)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at episode {episode} (classes {classes:?})")]
    NonFiniteLoss { episode: usize, loss: f64, classes: Vec<usize> },
    #[error("{skipped} of {episodes} episodes skipped, above the {limit} limit")]
    TooManySkipped { skipped: usize, episodes: usize, limit: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("optimizer step after episode {episode}: {source}")]
    Optim { episode: usize, source: OptimError },
    #[error(transparent)]
    OptimConfig(#[from] OptimError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("validation: {0}")]
    Eval(#[from] EvalError),
}

/// One row of training history. `episode` counts from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub params: ViTParams<T>,
    pub history: Vec<EpisodeRecord>,
    pub skipped: Vec<usize>,
    pub optim: OptimState<T>,
}

/// `episode,loss,train_acc,val_acc` with an empty last field when no
/// validation ran after that episode.
pub fn history_csv(history: &[EpisodeRecord]) -> String {
    let mut out = String::from("episode,loss,train_acc,val_acc\n");
    for r in history {
        let _ = write!(out, "{},{},{}", r.episode, r.loss, r.train_acc);
        match r.val_acc {
            Some(v) => {
                let _ = writeln!(out, ",{v}");
            }
            None => out.push_str(",\n"),
        }
    }
    out
}

/// Loss and query accuracy of one training episode; gradients are left on
/// the trainable leaves of `params`.
struct EpisodeResult {
    loss: f64,
    acc: f64,
}

/// Loss, logits and local query targets of one episode.
type Forward<T> = (Tensor<T>, Tensor<T>, Vec<usize>);

fn run_episode<T: Real>(
    params: &ViTParams<T>,
    dataset: &Dataset,
    index: &ClassIndex,
    episode: usize,
    cfg: &TrainConfig,
    streams: &SeedStreams,
) -> Result<Option<EpisodeResult>, TrainError> {
    let e = episode as u64;
    let batch = match sample_episode(index, &cfg.spec, &mut streams.stream(Purpose::TrainSampling, e)) {
        Ok(b) => b,
        Err(err) => {
            log::warn!("episode {} skipped: {err}", episode + 1);
            return Ok(None);
        }
    };
    let all: Vec<usize> = batch.support_indices.iter().chain(&batch.query_indices).copied().collect();
    let images: Tensor<T> = dataset.batch(&all, &cfg.augment, Some(&mut streams.stream(Purpose::TrainAugment, e)));
    let mut dropout = streams.stream(Purpose::TrainDropout, e);
    let m = batch.support_indices.len();
    let mut forward = || -> Result<Forward<T>, TrainError> {
        let emb = params.forward_features(&images, Mode::Train(&mut dropout))?;
        let support = emb.narrow(0, 0, m)?;
        let query = emb.narrow(0, m, all.len() - m)?;
        let protos = protonet::compute_prototypes(&support, &batch.support_labels)?;
        let logits = protonet::logits(&query, &protos, cfg.distance)?;
        let targets = protonet::remap_labels(&batch.query_labels, &protos.labels)?;
        let loss = protonet::episodic_loss(&logits, &targets)?;
        Ok((loss, logits, targets))
    };
    let non_finite = |loss: f64| TrainError::NonFiniteLoss {
        episode: episode + 1,
        loss,
        classes: batch.classes.clone(),
    };
    // a NaN embedding trips softmax's input check before a loss exists
    let (loss, logits, targets) = match forward() {
        Err(TrainError::Tensor(TensorError::NonFinite { .. }))
        | Err(TrainError::Proto(ProtoError::Tensor(TensorError::NonFinite { .. }))) => return Err(non_finite(f64::NAN)),
        other => other?,
    };
    let value = loss.item().as_f64();
    if !value.is_finite() {
        return Err(non_finite(value));
    }
    let acc = protonet::accuracy(&protonet::predict(&logits), &targets);
    if cfg.meta_batch > 1 {
        loss.scale(1.0 / cfg.meta_batch as f64).backward()?;
    } else {
        loss.backward()?;
    }
    Ok(Some(EpisodeResult { loss: value, acc }))
}

/// Clips the accumulated gradients, steps the optimizer and returns fresh
/// trainable leaves holding the updated values.
fn apply_update<T: Real>(params: &ViTParams<T>, optim: &mut OptimState<T>, cfg: &TrainConfig, episode: usize) -> Result<ViTParams<T>, TrainError> {
    let named = params.named();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let mut grads: Vec<Vec<T>> = named
        .iter()
        .map(|(_, t)| t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]))
        .collect();
    let mut values: Vec<Vec<T>> = named.iter().map(|(_, t)| t.to_vec()).collect();
    clip_gradients(&mut grads, cfg.clip_max_norm);
    optim
        .step(&mut values, &grads, &names)
        .map_err(|source| TrainError::Optim { episode, source })?;
    let mut it = values.into_iter();
    Ok(params.map(|_, _, t| Tensor::param(t.shape(), it.next().expect("one buffer per tensor")))?)
}

/// Trains `init` episodically on `train_set`, validating on `val_set` (if
/// any) every `eval_freq` episodes.
pub fn train<T: Real>(
    init: &ViTParams<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if cfg.augment.target_size != init.config.image_size {
        return Err(TrainError::Config(format!(
            "augment target_size {} differs from model image_size {}",
            cfg.augment.target_size, init.config.image_size
        )));
    }
    let index = build_class_index(&train_set.labels);
    let classes = index.num_classes();
    if classes < cfg.spec.ways {
        return Err(SamplerError::InsufficientClasses {
            need: cfg.spec.ways,
            have: classes,
        }
        .into());
    }

    let streams = SeedStreams::new(cfg.seed);
    let sizes: Vec<usize> = init.tensors().iter().map(|t| t.numel()).collect();
    let mut optim = OptimState::new(cfg.optim, &sizes)?;
    let mut params = init.trainable();
    let mut history = Vec::with_capacity(cfg.episodes);
    let mut skipped = Vec::new();
    let skip_limit = (cfg.max_skip_fraction * cfg.episodes as f64).floor() as usize;
    let mut pending = 0;

    for e in 0..cfg.episodes {
        match run_episode(&params, train_set, &index, e, cfg, &streams)? {
            Some(r) => {
                pending += 1;
                history.push(EpisodeRecord {
                    episode: e + 1,
                    loss: r.loss,
                    train_acc: r.acc,
                    val_acc: None,
                });
            }
            None => {
                skipped.push(e + 1);
                if skipped.len() > skip_limit {
                    return Err(TrainError::TooManySkipped {
                        skipped: skipped.len(),
                        episodes: cfg.episodes,
                        limit: skip_limit,
                    });
                }
            }
        }
        if pending > 0 && (pending == cfg.meta_batch || e + 1 == cfg.episodes) {
            params = apply_update(&params, &mut optim, cfg, e + 1)?;
            pending = 0;
        }
        if (e + 1) % cfg.eval_freq == 0 {
            let window: Vec<f64> = history
                .iter()
                .rev()
                .take_while(|r| r.episode + cfg.eval_freq > e + 1)
                .map(|r| r.loss)
                .collect();
            if !window.is_empty() {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                log::info!("episode {}: mean train loss {:.4e}", e + 1, mean);
            }
            if let Some(val) = val_set {
                let opts = EvalOptions {
                    spec: cfg.spec,
                    episodes: cfg.val_episodes,
                    seed: streams.child(Purpose::Validation, e as u64).seed(),
                    workers: 1,
                    distance: cfg.distance,
                    augment: cfg.augment.clone(),
                };
                let report = evaluator::evaluate(&params, val, &opts)?;
                log::info!("episode {}: val_acc {:.4}", e + 1, report.mean_acc);
                if let Some(last) = history.last_mut().filter(|r| r.episode == e + 1) {
                    last.val_acc = Some(report.mean_acc);
                }
            }
        }
    }

    Ok(TrainOutcome {
        params: params.detached(),
        history,
        skipped,
        optim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_format() {
        let h = vec![
            EpisodeRecord {
                episode: 1,
                loss: 1.5,
                train_acc: 0.25,
                val_acc: None,
            },
            EpisodeRecord {
                episode: 2,
                loss: 1.25,
                train_acc: 0.5,
                val_acc: Some(0.75),
            },
        ];
        assert_eq!(history_csv(&h), "episode,loss,train_acc,val_acc\n1,1.5,0.25,\n2,1.25,0.5,0.75\n");
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            eval_freq: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
