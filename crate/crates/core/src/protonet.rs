//! Prototypical-network head: class prototypes, distance logits, loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

/// Global (dataset-wide) class label.
pub type Label = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtoError {
    #[error("no support embeddings")]
    EmptySupport,
    #[error("{labels} labels for {rows} embeddings")]
    LabelCount { rows: usize, labels: usize },
    #[error("query label {0} has no prototype in this episode")]
    UnknownLabel(Label),
    #[error("local label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How query-to-prototype distances become logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// `-‖q − p‖²`
    #[default]
    Squared,
    /// `-‖q − p‖`
    Unsquared,
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMode::Squared => "squared",
            DistanceMode::Unsquared => "unsquared",
        })
    }
}

impl FromStr for DistanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared" => Ok(Self::Squared),
            "unsquared" => Ok(Self::Unsquared),
            other => Err(format!("unknown distance mode {other:?} (expected squared or unsquared)")),
        }
    }
}

/// Per-class mean embeddings. Row `i` belongs to `labels[i]`; labels are
/// distinct and ascending, so the row index is the episode-local label.
#[derive(Debug, Clone)]
pub struct Prototypes<T: Real> {
    pub matrix: Tensor<T>,
    pub labels: Vec<Label>,
}

impl<T: Real> Prototypes<T> {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

/// Class-mean prototypes from `[M,d]` support embeddings.
///
/// Each row averages its class's embeddings in ascending support index order.
pub fn compute_prototypes<T: Real>(support: &Tensor<T>, labels: &[Label]) -> Result<Prototypes<T>, ProtoError> {
    if support.rank() != 2 || support.shape()[0] == 0 {
        return Err(ProtoError::EmptySupport);
    }
    if labels.len() != support.shape()[0] {
        return Err(ProtoError::LabelCount {
            rows: support.shape()[0],
            labels: labels.len(),
        });
    }
    let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let rows = groups
        .values()
        .map(|idx| support.gather_rows(idx)?.mean_axis(0, true))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Prototypes {
        matrix: Tensor::concat(&rows, 0)?,
        labels: groups.into_keys().collect(),
    })
}

/// Pairwise squared Euclidean distances `[B,N]` between `[B,d]` queries and
/// `[N,d]` prototypes.
pub fn sq_euclidean<T: Real>(queries: &Tensor<T>, protos: &Tensor<T>) -> Result<Tensor<T>, ProtoError> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "sq_euclidean",
        lhs: queries.shape().to_vec(),
        rhs: protos.shape().to_vec(),
    };
    if queries.rank() != 2 || protos.rank() != 2 || queries.shape()[1] != protos.shape()[1] {
        return Err(mismatch().into());
    }
    let (b, n, d) = (queries.shape()[0], protos.shape()[0], queries.shape()[1]);
    let diff = queries.reshape(&[b, 1, d])?.sub(&protos.reshape(&[1, n, d])?)?;
    Ok(diff.mul(&diff)?.sum_axis(-1, false)?)
}

/// Negative-distance logits `[B,N]`.
pub fn logits<T: Real>(queries: &Tensor<T>, protos: &Prototypes<T>, mode: DistanceMode) -> Result<Tensor<T>, ProtoError> {
    let d2 = sq_euclidean(queries, &protos.matrix)?;
    Ok(match mode {
        DistanceMode::Squared => d2.neg(),
        DistanceMode::Unsquared => d2.sqrt().neg(),
    })
}

/// Replaces each global query label with its prototype row index.
pub fn remap_labels(query_labels: &[Label], proto_labels: &[Label]) -> Result<Vec<usize>, ProtoError> {
    let lookup: BTreeMap<Label, usize> = proto_labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    query_labels
        .iter()
        .map(|l| lookup.get(l).copied().ok_or(ProtoError::UnknownLabel(*l)))
        .collect()
}

/// Mean negative log-likelihood of the true local class under a row softmax.
pub fn episodic_loss<T: Real>(logits: &Tensor<T>, local_labels: &[usize]) -> Result<Tensor<T>, ProtoError> {
    if logits.rank() != 2 || logits.shape()[0] != local_labels.len() {
        return Err(ProtoError::LabelCount {
            rows: logits.shape().first().copied().unwrap_or(0),
            labels: local_labels.len(),
        });
    }
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    let mut onehot = vec![T::zero(); b * n];
    for (i, &y) in local_labels.iter().enumerate() {
        if y >= n {
            return Err(ProtoError::LabelOutOfRange { label: y, classes: n });
        }
        onehot[i * n + y] = T::one();
    }
    let picked = logits.log_softmax(-1)?.mul(&Tensor::from_vec(&[b, n], onehot)?)?;
    Ok(picked.sum_all().scale(-1.0 / b as f64))
}

/// Row-wise argmax; ties go to the lowest index.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let n = logits.shape().last().copied().unwrap_or(0);
    if n == 0 {
        return Vec::new();
    }
    logits
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of predictions equal to the targets.
pub fn accuracy(predictions: &[usize], targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    correct as f64 / targets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn prototype_of_single_support() {
        let p = compute_prototypes(&t(&[1, 3], vec![1.0, 2.0, 3.0]), &[7]).unwrap();
        assert_eq!(p.matrix.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(p.labels, vec![7]);
    }

    #[test]
    fn prototype_is_mean_and_rows_ascend() {
        let s = t(&[3, 2], vec![5.0, 5.0, 0.0, 0.0, 2.0, 4.0]);
        let p = compute_prototypes(&s, &[9, 4, 4]).unwrap();
        assert_eq!(p.labels, vec![4, 9]);
        assert_eq!(p.matrix.data(), &[1.0, 2.0, 5.0, 5.0]);
    }

    #[test]
    fn prototype_errors() {
        assert_eq!(compute_prototypes(&Tensor::<f64>::zeros(&[0, 3]), &[]).unwrap_err(), ProtoError::EmptySupport);
        assert!(matches!(
            compute_prototypes(&Tensor::<f64>::zeros(&[2, 3]), &[1]),
            Err(ProtoError::LabelCount { rows: 2, labels: 1 })
        ));
    }

    #[test]
    fn prototypes_match_accumulate_divide_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (ways, shots, d) = (5, 5, 16);
        let s = random(&mut rng, &[ways * shots, d]);
        let mut labels: Vec<Label> = (0..ways * shots).map(|i| 10 + i % ways).collect();
        labels.shuffle(&mut rng);
        let p = compute_prototypes(&s, &labels).unwrap();
        for (row, &cls) in p.labels.iter().enumerate() {
            for j in 0..d {
                let mut acc = 0.0;
                let mut count = 0.0;
                for (i, &l) in labels.iter().enumerate() {
                    if l == cls {
                        acc += s.data()[i * d + j];
                        count += 1.0;
                    }
                }
                let got = p.matrix.data()[row * d + j];
                assert!((got - acc / count).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn distance_cases() {
        let q = t(&[1, 2], vec![0.0, 0.0]);
        let p = t(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(sq_euclidean(&q, &p).unwrap().data(), &[25.0, 0.0]);
        assert!(sq_euclidean(&q, &t(&[1, 3], vec![0.0; 3])).is_err());
    }

    #[test]
    fn distance_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random(&mut rng, &[8, 16]);
        let p = random(&mut rng, &[5, 16]);
        let d = sq_euclidean(&q, &p).unwrap();
        for i in 0..8 {
            for c in 0..5 {
                let mut acc = 0.0;
                for j in 0..16 {
                    let diff = q.data()[i * 16 + j] - p.data()[c * 16 + j];
                    acc += diff * diff;
                }
                let got = d.data()[i * 5 + c];
                assert!((got - acc).abs() <= 1e-5 * acc.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn query_equal_to_prototype_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pm = random(&mut rng, &[5, 8]);
        let protos = Prototypes {
            matrix: pm.clone(),
            labels: (0..5).collect(),
        };
        let q = pm.gather_rows(&[2]).unwrap();
        for mode in [DistanceMode::Squared, DistanceMode::Unsquared] {
            assert_eq!(predict(&logits(&q, &protos, mode).unwrap()), vec![2]);
        }
    }

    #[test]
    fn equidistant_prototypes_tie() {
        let protos = Prototypes {
            matrix: t(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            labels: vec![0, 1, 2, 3],
        };
        let l = logits(&t(&[1, 2], vec![0.0, 0.0]), &protos, DistanceMode::Squared).unwrap();
        assert!(l.data().iter().all(|&v| v == l.data()[0]));
        assert_eq!(predict(&l), vec![0]);
    }

    #[test]
    fn remap_cases() {
        assert_eq!(remap_labels(&[9, 3, 41, 9], &[3, 9, 41]).unwrap(), vec![1, 0, 2, 1]);
        assert_eq!(remap_labels(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]).unwrap(), vec![0, 1, 2, 3, 4]);
        let err = remap_labels(&[5], &[3, 9]).unwrap_err();
        assert_eq!(err, ProtoError::UnknownLabel(5));
        assert!(err.to_string().contains('5'));
    }

    #[test]
    fn remap_inverts_through_proto_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let mut pool: Vec<Label> = (0..100).collect();
            pool.shuffle(&mut rng);
            let mut protos: Vec<Label> = pool[..7].to_vec();
            protos.sort();
            let queries: Vec<Label> = (0..30).map(|_| protos[rng.random_range(0..7)]).collect();
            let local = remap_labels(&queries, &protos).unwrap();
            let back: Vec<Label> = local.iter().map(|&i| protos[i]).collect();
            assert_eq!(back, queries);
        }
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let l = Tensor::<f64>::zeros(&[3, 5]);
        let loss = episodic_loss(&l, &[0, 2, 4]).unwrap().item();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_loss_vanishes() {
        let l = t(&[1, 3], vec![-100.0, 0.0, -100.0]);
        assert!(episodic_loss(&l, &[1]).unwrap().item() < 1e-40);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let l = random(&mut rng, &[6, 5]).scale(4.0);
        let y: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let got = episodic_loss(&l, &y).unwrap().item();
        let mut expected = 0.0;
        for i in 0..6 {
            let row = &l.data()[i * 5..(i + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[y[i]].exp() / z).ln();
        }
        expected /= 6.0;
        assert!((got - expected).abs() < 1e-6);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let l = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(
            episodic_loss(&l, &[0, 3]).unwrap_err(),
            ProtoError::LabelOutOfRange { label: 3, classes: 3 }
        );
        assert!(episodic_loss(&l, &[0]).is_err());
    }

    #[test]
    fn predict_cases() {
        let l = t(&[2, 3], vec![-1.0, -5.0, -2.0, -2.0, -2.0, -9.0]);
        assert_eq!(predict(&l), vec![0, 0]);
    }

    #[test]
    fn squared_and_unsquared_agree_on_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..200 {
            let protos = Prototypes {
                matrix: random(&mut rng, &[5, 8]),
                labels: (0..5).collect(),
            };
            let q = random(&mut rng, &[15, 8]);
            let a = predict(&logits(&q, &protos, DistanceMode::Squared).unwrap());
            let b = predict(&logits(&q, &protos, DistanceMode::Unsquared).unwrap());
            assert_eq!(a, b);
            // argmax of -d² is argmin of d²
            let d = sq_euclidean(&q, &protos.matrix).unwrap();
            let argmin: Vec<usize> = d.data().chunks(5).map(|r| predict(&t(&[1, 5], r.iter().map(|v| -v).collect()))[0]).collect();
            assert_eq!(a, argmin);
        }
    }

    #[test]
    fn loss_gradient_reaches_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = random(&mut rng, &[4, 3]).requires_grad();
        let protos = compute_prototypes(&random(&mut rng, &[4, 3]), &[0, 1, 0, 1]).unwrap();
        let l = logits(&q, &protos, DistanceMode::Squared).unwrap();
        episodic_loss(&l, &[0, 1, 1, 0]).unwrap().backward().unwrap();
        assert!(q.grad().unwrap().iter().any(|v| *v != 0.0));
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative(vals in prop::collection::vec(-50.0f64..50.0, 10), y in prop::collection::vec(0usize..5, 2)) {
            let l = t(&[2, 5], vals);
            prop_assert!(episodic_loss(&l, &y).unwrap().item() >= 0.0);
        }

        #[test]
        fn scaling_embeddings_scales_distance(seed in 0u64..1000, s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&mut rng, &[6, 4]);
            let p = random(&mut rng, &[3, 4]);
            let d = sq_euclidean(&q, &p).unwrap();
            let ds = sq_euclidean(&q.scale(s), &p.scale(s)).unwrap();
            for (a, b) in d.data().iter().zip(ds.data()) {
                prop_assert!((a * s * s - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
            let protos = Prototypes { matrix: p.clone(), labels: vec![0, 1, 2] };
            let scaled = Prototypes { matrix: p.scale(s), labels: vec![0, 1, 2] };
            prop_assert_eq!(
                predict(&logits(&q, &protos, DistanceMode::Squared).unwrap()),
                predict(&logits(&q.scale(s), &scaled, DistanceMode::Squared).unwrap())
            );
        }

        #[test]
        fn support_order_does_not_change_predictions(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(&mut rng, &[15, 8]);
            let labels: Vec<Label> = (0..15).map(|i| i % 3).collect();
            let mut order: Vec<usize> = (0..15).collect();
            order.shuffle(&mut rng);
            let s2 = s.gather_rows(&order).unwrap();
            let l2: Vec<Label> = order.iter().map(|&i| labels[i]).collect();
            let p1 = compute_prototypes(&s, &labels).unwrap();
            let p2 = compute_prototypes(&s2, &l2).unwrap();
            for (a, b) in p1.matrix.data().iter().zip(p2.matrix.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
            let q = random(&mut rng, &[10, 8]);
            prop_assert_eq!(
                predict(&logits(&q, &p1, DistanceMode::Squared).unwrap()),
                predict(&logits(&q, &p2, DistanceMode::Squared).unwrap())
            );
        }
    }
}
