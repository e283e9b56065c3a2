//! N-way K-shot episode construction.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protonet::Label;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplerError {
    #[error("insufficient classes: need {need}, have {have}")]
    InsufficientClasses { need: usize, have: usize },
    #[error("not enough samples for class {class} (need {need}, have {have})")]
    NotEnoughSamples { class: Label, need: usize, have: usize },
    #[error("invalid episode spec: {0}")]
    InvalidSpec(String),
}

/// Episode shape: `ways` classes, `shots` support and `queries` query
/// examples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 5,
            queries: 15,
        }
    }
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Result<Self, SamplerError> {
        let spec = Self { ways, shots, queries };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.ways < 2 {
            return Err(SamplerError::InvalidSpec(format!("ways must be at least 2, got {}", self.ways)));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(SamplerError::InvalidSpec("shots and queries must be positive".into()));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.shots + self.queries
    }
}

/// Label → ascending sample indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassIndex {
    classes: BTreeMap<Label, Vec<usize>>,
}

impl ClassIndex {
    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.classes.keys().copied()
    }

    pub fn indices(&self, label: Label) -> Option<&[usize]> {
        self.classes.get(&label).map(Vec::as_slice)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &[usize])> + '_ {
        self.classes.iter().map(|(&l, v)| (l, v.as_slice()))
    }
}

/// Groups sample positions by label.
pub fn build_class_index(labels: &[Label]) -> ClassIndex {
    let mut classes: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    ClassIndex { classes }
}

/// One sampled task. Support and query lists are grouped by class in the
/// order of `classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeBatch {
    pub support_indices: Vec<usize>,
    pub support_labels: Vec<Label>,
    pub query_indices: Vec<usize>,
    pub query_labels: Vec<Label>,
    pub classes: Vec<Label>,
}

/// Draws `ways` classes without replacement, then `shots + queries` samples
/// without replacement from each; the first `shots` go to the support set.
///
/// The per-class size check runs after class selection, so an undersized
/// class only fails the episodes that happen to pick it.
pub fn sample_episode<R: Rng + ?Sized>(
    index: &ClassIndex,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<EpisodeBatch, SamplerError> {
    spec.validate()?;
    let labels: Vec<Label> = index.labels().collect();
    if labels.len() < spec.ways {
        return Err(SamplerError::InsufficientClasses {
            need: spec.ways,
            have: labels.len(),
        });
    }
    let classes: Vec<Label> = index::sample(rng, labels.len(), spec.ways)
        .into_iter()
        .map(|i| labels[i])
        .collect();

    let need = spec.per_class();
    let mut batch = EpisodeBatch {
        support_indices: Vec::with_capacity(spec.ways * spec.shots),
        support_labels: Vec::with_capacity(spec.ways * spec.shots),
        query_indices: Vec::with_capacity(spec.ways * spec.queries),
        query_labels: Vec::with_capacity(spec.ways * spec.queries),
        classes: classes.clone(),
    };
    for &cls in &classes {
        let pool = &index.classes[&cls];
        if pool.len() < need {
            return Err(SamplerError::NotEnoughSamples {
                class: cls,
                need,
                have: pool.len(),
            });
        }
        let chosen = index::sample(rng, pool.len(), need);
        for (k, i) in chosen.into_iter().enumerate() {
            if k < spec.shots {
                batch.support_indices.push(pool[i]);
                batch.support_labels.push(cls);
            } else {
                batch.query_indices.push(pool[i]);
                batch.query_labels.push(cls);
            }
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, SeedStreams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn balanced(classes: usize, per: usize) -> ClassIndex {
        build_class_index(&(0..classes * per).map(|i| i % classes).collect::<Vec<_>>())
    }

    #[test]
    fn grouping() {
        let idx = build_class_index(&[4, 9, 4]);
        assert_eq!(idx.indices(4).unwrap(), &[0, 2]);
        assert_eq!(idx.indices(9).unwrap(), &[1]);
        assert!(build_class_index(&[]).is_empty());
    }

    #[test]
    fn grouping_partitions_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<Label> = (0..1000).map(|_| rng.random_range(0..37)).collect();
        let idx = build_class_index(&labels);
        let mut all: Vec<usize> = idx.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        for (l, v) in idx.iter() {
            assert!(v.windows(2).all(|w| w[0] < w[1]));
            assert!(v.iter().all(|&i| labels[i] == l));
        }
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn default_spec_sizes() {
        let idx = balanced(10, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&idx, &EpisodeSpec::default(), &mut rng).unwrap();
        assert_eq!(ep.support_indices.len(), 25);
        assert_eq!(ep.query_indices.len(), 75);
        assert_eq!(ep.classes.len(), 5);
    }

    #[test]
    fn undersized_class_is_named() {
        let mut labels: Vec<Label> = (0..5 * 20).map(|i| i % 5).collect();
        labels.extend(std::iter::repeat_n(77, 19));
        let idx = build_class_index(&labels);
        let spec = EpisodeSpec::new(6, 5, 15).unwrap();
        let err = sample_episode(&idx, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap_err();
        assert_eq!(err, SamplerError::NotEnoughSamples { class: 77, need: 20, have: 19 });
        assert_eq!(err.to_string(), "not enough samples for class 77 (need 20, have 19)");
    }

    #[test]
    fn too_few_classes() {
        let idx = balanced(3, 30);
        let err = sample_episode(&idx, &EpisodeSpec::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap_err();
        assert_eq!(err, SamplerError::InsufficientClasses { need: 5, have: 3 });
    }

    #[test]
    fn invalid_specs() {
        assert!(EpisodeSpec::new(1, 5, 15).is_err());
        assert!(EpisodeSpec::new(5, 0, 15).is_err());
        assert!(EpisodeSpec::new(5, 5, 0).is_err());
    }

    #[test]
    fn disjoint_support_and_query() {
        let idx = balanced(12, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let ep = sample_episode(&idx, &EpisodeSpec::default(), &mut rng).unwrap();
            let distinct: HashSet<_> = ep.classes.iter().collect();
            assert_eq!(distinct.len(), 5);
            for &c in &ep.classes {
                let s: HashSet<usize> = ep.support_indices.iter().zip(&ep.support_labels).filter(|(_, &l)| l == c).map(|(&i, _)| i).collect();
                let q: HashSet<usize> = ep.query_indices.iter().zip(&ep.query_labels).filter(|(_, &l)| l == c).map(|(&i, _)| i).collect();
                assert_eq!(s.len(), 5);
                assert_eq!(q.len(), 15);
                assert!(s.is_disjoint(&q));
            }
        }
    }

    #[test]
    fn same_stream_same_episodes() {
        let idx = balanced(20, 25);
        let streams = SeedStreams::new(42);
        let run = || -> Vec<EpisodeBatch> {
            (0..20)
                .map(|e| sample_episode(&idx, &EpisodeSpec::default(), &mut streams.stream(Purpose::TrainSampling, e)).unwrap())
                .collect()
        };
        assert_eq!(run(), run());
    }
}
