//! Episodic evaluation and embedding export.
//!
//! Evaluation embeds every image an episode needs exactly once, in eval mode,
//! and then scores each episode from the cached rows. Eval-mode embeddings
//! are per-image and deterministic, so this equals embedding each episode
//! separately.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugmentConfig, Dataset};
use crate::protonet::{self, DistanceMode, ProtoError};
use crate::rng::{Purpose, SeedStreams, StreamRng};
use crate::sampler::{build_class_index, sample_episode, EpisodeBatch, EpisodeSpec};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};
use crate::vit::ViTParams;

/// Images per forward pass when embedding.
pub const EMBED_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no episodes evaluated ({attempted} attempted)")]
    NoEpisodes { attempted: usize },
    #[error("image size {data} does not match the model input {model}")]
    ImageSize { data: usize, model: usize },
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
    pub distance: DistanceMode,
    pub augment: AugmentConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            spec: EpisodeSpec::default(),
            episodes: 100,
            seed: crate::rng::DEFAULT_SEED,
            workers: 1,
            distance: DistanceMode::Squared,
            augment: AugmentConfig::default(),
        }
    }
}

/// Mean, sample standard deviation and 95% half-width of a list of accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std_dev: f64,
    pub ci95: f64,
}

/// Statistics over `accs`. A single value has zero spread.
pub fn summarize(accs: &[f64]) -> Option<Stats> {
    let n = accs.len();
    if n == 0 {
        return None;
    }
    let mean = accs.iter().sum::<f64>() / n as f64;
    let std_dev = if n > 1 {
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Stats {
        mean,
        std_dev,
        ci95: 1.96 * std_dev / (n as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_episode_acc: Vec<f64>,
    pub mean_acc: f64,
    pub std_dev: f64,
    pub ci95_halfwidth: f64,
    pub episodes_attempted: usize,
    pub episodes_completed: usize,
    pub spec: EpisodeSpec,
    pub distance: DistanceMode,
    pub seed: u64,
}

impl EvalReport {
    /// Two-line summary in percent.
    pub fn render(&self) -> String {
        format!(
            "Average Accuracy: {:.2}%\n95% CI: ±{:.2}%\n",
            100.0 * self.mean_acc,
            100.0 * self.ci95_halfwidth
        )
    }
}

/// Reports from several seeds plus both ways of combining them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub reports: Vec<EvalReport>,
    /// Mean of the per-repeat mean accuracies.
    pub mean_of_means: f64,
    /// Mean of the per-repeat CI half-widths.
    pub mean_ci95: f64,
    /// Statistics over all episodes of all repeats pooled together.
    pub pooled: Stats,
}

impl RepeatSummary {
    pub fn from_reports(reports: Vec<EvalReport>) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let r = reports.len() as f64;
        let pooled_accs: Vec<f64> = reports.iter().flat_map(|x| x.per_episode_acc.iter().copied()).collect();
        Some(Self {
            mean_of_means: reports.iter().map(|x| x.mean_acc).sum::<f64>() / r,
            mean_ci95: reports.iter().map(|x| x.ci95_halfwidth).sum::<f64>() / r,
            pooled: summarize(&pooled_accs)?,
            reports,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.reports.iter().enumerate() {
            let _ = writeln!(out, "Repeat {} (seed {}):", i + 1, r.seed);
            out.push_str(&r.render());
        }
        let _ = writeln!(
            out,
            "Mean over repeats: {:.2}% (mean 95% CI ±{:.2}%)",
            100.0 * self.mean_of_means,
            100.0 * self.mean_ci95
        );
        let _ = writeln!(
            out,
            "Pooled {} episodes: {:.2}% ± {:.2}%",
            self.reports.iter().map(|r| r.episodes_completed).sum::<usize>(),
            100.0 * self.pooled.mean,
            100.0 * self.pooled.ci95
        );
        out
    }
}

/// Eval-mode embeddings `[n,d]` for the dataset rows in `indices`.
///
/// With more than one worker, chunks are embedded on scoped threads; each
/// chunk's rows are computed independently, so results do not depend on the
/// worker count.
pub fn embed_indices<T: Real>(
    params: &ViTParams<T>,
    dataset: &Dataset,
    indices: &[usize],
    augment: &AugmentConfig,
    workers: usize,
) -> Result<Tensor<T>, EvalError> {
    if augment.target_size != params.config.image_size {
        return Err(EvalError::ImageSize {
            data: augment.target_size,
            model: params.config.image_size,
        });
    }
    let frozen = params.detached();
    let chunks: Vec<&[usize]> = indices.chunks(EMBED_CHUNK).collect();
    let run = |chunk: &[usize]| -> Result<Tensor<T>, EvalError> {
        let images = dataset.batch::<T, StreamRng>(chunk, augment, None);
        Ok(frozen.embed(&images, EMBED_CHUNK)?)
    };
    let parts: Vec<Tensor<T>> = if workers <= 1 || chunks.len() <= 1 {
        chunks.iter().map(|c| run(c)).collect::<Result<_, _>>()?
    } else {
        let per = chunks.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(|| group.iter().map(|c| run(c)).collect::<Result<Vec<_>, _>>()))
                .collect();
            let mut out = Vec::new();
            for h in handles {
                out.extend(h.join().expect("embedding worker panicked")?);
            }
            Ok::<_, EvalError>(out)
        })?
    };
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, params.config.embed_dim]));
    }
    Ok(Tensor::concat(&parts, 0)?)
}

/// Accuracy of one episode given embeddings for its support and query rows.
pub fn score_episode<T: Real>(
    support: &Tensor<T>,
    query: &Tensor<T>,
    episode: &EpisodeBatch,
    distance: DistanceMode,
) -> Result<f64, ProtoError> {
    let protos = protonet::compute_prototypes(support, &episode.support_labels)?;
    let logits = protonet::logits(query, &protos, distance)?;
    let targets = protonet::remap_labels(&episode.query_labels, &protos.labels)?;
    Ok(protonet::accuracy(&protonet::predict(&logits), &targets))
}

/// Runs `opts.episodes` episodes; episode `e` samples from its own substream.
///
/// Episodes whose sampling fails are skipped and counted; statistics cover
/// the completed ones.
pub fn evaluate<T: Real>(params: &ViTParams<T>, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let streams = SeedStreams::new(opts.seed);
    let index = build_class_index(&dataset.labels);
    let mut episodes = Vec::with_capacity(opts.episodes);
    for e in 0..opts.episodes {
        match sample_episode(&index, &opts.spec, &mut streams.stream(Purpose::Evaluation, e as u64)) {
            Ok(ep) => episodes.push(ep),
            Err(err) => log::warn!("evaluation episode {e} skipped: {err}"),
        }
    }
    if episodes.is_empty() {
        return Err(EvalError::NoEpisodes {
            attempted: opts.episodes,
        });
    }

    let needed: Vec<usize> = episodes
        .iter()
        .flat_map(|ep| ep.support_indices.iter().chain(&ep.query_indices).copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let table = embed_indices(params, dataset, &needed, &opts.augment, opts.workers)?;
    let row = |i: usize| needed.binary_search(&i).expect("embedded");

    let mut accs = Vec::with_capacity(episodes.len());
    for ep in &episodes {
        let s: Vec<usize> = ep.support_indices.iter().map(|&i| row(i)).collect();
        let q: Vec<usize> = ep.query_indices.iter().map(|&i| row(i)).collect();
        accs.push(score_episode(&table.gather_rows(&s)?, &table.gather_rows(&q)?, ep, opts.distance)?);
    }
    let stats = summarize(&accs).expect("non-empty");
    Ok(EvalReport {
        per_episode_acc: accs,
        mean_acc: stats.mean,
        std_dev: stats.std_dev,
        ci95_halfwidth: stats.ci95,
        episodes_attempted: opts.episodes,
        episodes_completed: episodes.len(),
        spec: opts.spec,
        distance: opts.distance,
        seed: opts.seed,
    })
}

/// Writes `index,label,e0,…` rows (after a header) for every dataset sample.
pub fn export_embeddings<T: Real>(
    params: &ViTParams<T>,
    dataset: &Dataset,
    augment: &AugmentConfig,
    out: &Path,
) -> Result<(), EvalError> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let table = embed_indices(params, dataset, &all, augment, 1)?;
    let d = params.config.embed_dim;
    let mut text = String::from("index,label");
    for k in 0..d {
        let _ = write!(text, ",e{k}");
    }
    text.push('\n');
    for (i, row) in table.data().chunks(d.max(1)).enumerate() {
        let _ = write!(text, "{i},{}", dataset.labels[i]);
        for v in row {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    let io_err = |source| EvalError::Io {
        path: out.display().to_string(),
        source,
    };
    let mut f = fs::File::create(out).map_err(io_err)?;
    f.write_all(text.as_bytes()).map_err(io_err)
}
