//! Frozen-feature linear probe, accuracy and mean average precision.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Linear classifier on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    /// `[D, C]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl ProbeHead {
    pub fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.n_classes();
        let mut out = self.bias.clone();
        for (i, &v) in x.iter().enumerate() {
            let z = (v - self.feature_mean[i]) / self.feature_std[i];
            for (o, &w) in out.iter_mut().zip(&self.weight[i * c..(i + 1) * c]) {
                *o += z * w;
            }
        }
        out
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, k| if l[k] > l[best] { k } else { best })
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let d = features
        .first()
        .map(|f| f.len())
        .ok_or_else(|| Error::InvalidArgument("no features".into()))?;
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::dim(
            "features",
            "feature vectors must share one positive width",
        ));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features".into()));
    }
    Ok(d)
}

/// Full-batch gradient descent on mean softmax cross-entropy.
///
/// The head starts from small seeded weights, so zero epochs gives a random
/// head. Features are standardized with statistics of the training set.
pub fn train_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeHead> {
    let d = check_features(features)?;
    if labels.len() != features.len() {
        return Err(Error::dim(
            "samples",
            format!("{} labels for {} features", labels.len(), features.len()),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {l} outside {n_classes} classes"
        )));
    }
    let mut present = vec![false; n_classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidArgument(
            "probe needs at least two classes in the training set".into(),
        ));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; d];
    for f in features {
        std.iter_mut()
            .zip(f)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    // Constant features contribute nothing; a unit scale avoids dividing by zero.
    let std: Vec<f64> = std
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Tensor::<f64>::randn(&[d, n_classes], 0.01, &mut rng);
    let mut head = ProbeHead {
        weight: init.into_data(),
        bias: vec![0.0; n_classes],
        feature_mean: mean,
        feature_std: std,
    };
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            (0..d)
                .map(|i| (f[i] - head.feature_mean[i]) / head.feature_std[i])
                .collect()
        })
        .collect();
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; d * n_classes];
        let mut gb = vec![0.0; n_classes];
        for (x, (f, &y)) in z.iter().zip(features.iter().zip(labels)) {
            let mut p = softmax(&head.logits(f));
            p[y] -= 1.0;
            for (i, &xi) in x.iter().enumerate() {
                for (g, &pk) in gw[i * n_classes..(i + 1) * n_classes].iter_mut().zip(&p) {
                    *g += xi * pk / n;
                }
            }
            gb.iter_mut().zip(&p).for_each(|(g, pk)| *g += pk / n);
        }
        head.weight
            .iter_mut()
            .zip(&gw)
            .for_each(|(w, g)| *w -= cfg.lr * g);
        head.bias
            .iter_mut()
            .zip(&gb)
            .for_each(|(b, g)| *b -= cfg.lr * g);
    }
    Ok(head)
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn accuracy(head: &ProbeHead, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::dim(
            "samples",
            "accuracy needs matching, non-empty features and labels",
        ));
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, &l)| head.predict(f) == l)
        .count();
    Ok(correct as f64 / features.len() as f64)
}

/// Per-class train/test split with the same test fraction in every class.
pub fn balanced_split(
    labels: &[usize],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} is outside (0, 1)"
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * test_fraction).round() as usize)
            .clamp(1, idx.len().saturating_sub(1).max(1));
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Precision averaged over every positive of the score-descending ranking.
/// Equal scores keep their original index order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: Option<f64>,
    pub map: f64,
    /// `None` for classes with no positive sample, which are left out of the mean.
    pub per_class_ap: Vec<Option<f64>>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn skipped_classes(&self) -> Vec<usize> {
        (0..self.per_class_ap.len())
            .filter(|&c| self.per_class_ap[c].is_none())
            .collect()
    }
}

/// One `key=value` pair per line.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(a) = self.accuracy {
            writeln!(f, "accuracy={a:.6}")?;
        }
        writeln!(f, "map={:.6}", self.map)?;
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => writeln!(f, "ap.{c}={v:.6}")?,
                None => writeln!(f, "ap.{c}=skipped")?,
            }
        }
        write!(f, "n_samples={}", self.n_samples)
    }
}

/// `scores` and `labels` are `n x c`, row per sample.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<EvalReport> {
    let n = scores.len();
    let c = scores.first().map_or(0, |r| r.len());
    if n == 0 || c == 0 {
        return Err(Error::InvalidArgument(
            "mean average precision of empty input".into(),
        ));
    }
    if labels.len() != n
        || scores.iter().any(|r| r.len() != c)
        || labels.iter().any(|r| r.len() != c)
    {
        return Err(Error::dim("scores", "scores and labels must both be n x c"));
    }
    let per_class_ap: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
            average_precision(&s, &l)
        })
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument(
            "no class has a positive sample".into(),
        ));
    }
    Ok(EvalReport {
        accuracy: None,
        map: present.iter().sum::<f64>() / present.len() as f64,
        per_class_ap,
        n_samples: n,
    })
}

/// Accuracy plus one-vs-rest mAP of the probe's softmax scores.
pub fn evaluate_probe(
    head: &ProbeHead,
    features: &[Vec<f64>],
    labels: &[usize],
) -> Result<EvalReport> {
    let acc = accuracy(head, features, labels)?;
    let scores: Vec<Vec<f64>> = features.iter().map(|f| softmax(&head.logits(f))).collect();
    let onehot: Vec<Vec<bool>> = labels
        .iter()
        .map(|&l| (0..head.n_classes()).map(|k| k == l).collect())
        .collect();
    let mut report = mean_average_precision(&scores, &onehot)?;
    report.accuracy = Some(acc);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_is_five_sixths() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn worst_rank_single_positive() {
        for n in 1..10 {
            let scores: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
            let mut labels = vec![false; n];
            labels[n - 1] = true;
            assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0 / n as f64);
        }
    }

    #[test]
    fn ties_keep_index_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn classes_without_positives_are_skipped() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3]];
        let labels = vec![vec![true, false], vec![false, false]];
        let r = mean_average_precision(&scores, &labels).unwrap();
        assert_eq!(r.skipped_classes(), vec![1]);
        assert_eq!(r.map, 1.0);
        assert!(r.to_string().contains("ap.1=skipped"));
        assert!(mean_average_precision(&[], &[]).is_err());
    }

    #[test]
    fn separable_toy_reaches_full_training_accuracy() {
        let features: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 } + 0.01 * i as f64, 0.3])
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let head = train_probe(&features, &labels, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(accuracy(&head, &features, &labels).unwrap(), 1.0);
        assert!(train_probe(&features, &[1; 20], 2, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn balanced_split_keeps_every_class_on_both_sides() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let (train, test) = balanced_split(&labels, 0.2, 3).unwrap();
        assert_eq!(train.len() + test.len(), 40);
        for c in 0..4 {
            assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
    }
}
