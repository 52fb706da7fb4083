//! Training statistics and the post-training cluster audit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::synthdata::Dataset;
use crate::tensor::{Matrix, Real};

/// Mean of the per-row maximum probability over all views and samples.
pub fn confidence<T: Real>(views: &[Matrix<T>]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for p in views {
        for r in 0..p.rows() {
            total += p.row(r).iter().fold(T::neg_infinity(), |m, &x| m.max(x)).to_f64_lossy();
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

/// Fraction of ordered view pairs `(v, w)`, `v ≠ w`, whose hard assignments
/// agree, averaged over samples. `assignments[v][n]` is the cluster of sample
/// `n` in view `v`.
pub fn agreement(assignments: &[Vec<usize>]) -> Result<f64> {
    let (matches, pairs) = agreement_counts(assignments)?;
    Ok(if pairs == 0 {
        0.0
    } else {
        matches as f64 / pairs as f64
    })
}

/// `(matching ordered pairs, total ordered pairs)`.
pub fn agreement_counts(assignments: &[Vec<usize>]) -> Result<(u64, u64)> {
    let views = assignments.len();
    if views < 2 {
        return Err(Error::Parameter(format!(
            "agreement needs at least 2 views, got {views}"
        )));
    }
    let n = assignments[0].len();
    if assignments.iter().any(|a| a.len() != n) {
        return Err(Error::shape("agreement", "views have different sample counts"));
    }
    let mut matches = 0u64;
    for s in 0..n {
        for v in 0..views {
            for w in 0..views {
                if v != w && assignments[v][s] == assignments[w][s] {
                    matches += 1;
                }
            }
        }
    }
    Ok((matches, (n * views * (views - 1)) as u64))
}

/// Teacher-probability convenience wrapper around [`agreement`].
pub fn agreement_from_probabilities<T: Real>(views: &[Matrix<T>]) -> Result<f64> {
    let a: Vec<Vec<usize>> = views.iter().map(Matrix::argmax_rows).collect();
    agreement(&a)
}

/// Contingency table `counts[cluster][class]`.
pub fn contingency(assignments: &[usize], labels: &[usize]) -> Result<Vec<Vec<u64>>> {
    if assignments.len() != labels.len() {
        return Err(Error::shape(
            "purity",
            format!("{} assignments, {} labels", assignments.len(), labels.len()),
        ));
    }
    let clusters = assignments.iter().max().map_or(0, |m| m + 1);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; classes]; clusters];
    for (&a, &l) in assignments.iter().zip(labels) {
        table[a][l] += 1;
    }
    Ok(table)
}

/// `(1/N)·Σ_clusters max_class |cluster ∩ class|`.
pub fn purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.is_empty() {
        return Err(Error::Parameter("purity of an empty assignment".into()));
    }
    let majority = purity_majority(assignments, labels)?;
    Ok(majority as f64 / assignments.len() as f64)
}

/// Numerator of [`purity`].
pub fn purity_majority(assignments: &[usize], labels: &[usize]) -> Result<u64> {
    let table = contingency(assignments, labels)?;
    Ok(table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum())
}

/// Relative cluster sizes (`count·K/N`) summarized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub min_rel: f64,
    pub max_rel: f64,
    pub empty_frac: f64,
    pub counts: Vec<u64>,
}

pub fn cluster_counts(assignments: &[usize], clusters: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; clusters];
    for &a in assignments {
        if a >= clusters {
            return Err(Error::shape(
                "size_stats",
                format!("assignment {a} out of range for {clusters} clusters"),
            ));
        }
        counts[a] += 1;
    }
    Ok(counts)
}

/// Min/max relative size over all clusters (empty ones included) and the
/// fraction of empty clusters.
pub fn size_stats(assignments: &[usize], clusters: usize) -> Result<SizeStats> {
    let counts = cluster_counts(assignments, clusters)?;
    size_stats_from_counts(counts)
}

pub fn size_stats_from_counts(counts: Vec<u64>) -> Result<SizeStats> {
    let n: u64 = counts.iter().sum();
    if n == 0 || counts.is_empty() {
        return Err(Error::Parameter("size statistics need at least one sample".into()));
    }
    let k = counts.len() as f64;
    let rel = |c: u64| c as f64 * k / n as f64;
    let min = counts.iter().copied().min().unwrap_or(0);
    let max = counts.iter().copied().max().unwrap_or(0);
    let empty = counts.iter().filter(|&&c| c == 0).count();
    Ok(SizeStats {
        min_rel: rel(min),
        max_rel: rel(max),
        empty_frac: empty as f64 / k,
        counts,
    })
}

/// Spearman rank correlation between `values` and their index (0, 1, 2, …).
/// Ties receive average ranks. `None` when fewer than two points or the
/// values are constant.
pub fn spearman_trend(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let ranks = average_ranks(values);
    let index: Vec<f64> = (0..n).map(|i| i as f64).collect();
    pearson(&index, &ranks)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// One epoch of training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub confidence: f64,
    pub agreement: f64,
    pub purity: f64,
    pub min_rel_size: f64,
    pub max_rel_size: f64,
    pub empty_frac: f64,
}

/// Running sums for [`EpochStats`], fed with the balanced teacher targets of
/// each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAccumulator {
    pub steps: u64,
    pub loss_sum: f64,
    pub confidence_sum: f64,
    pub confidence_rows: u64,
    pub agreement_matches: u64,
    pub agreement_pairs: u64,
    /// `contingency[cluster][class]` over all global-view assignments.
    pub contingency: Vec<Vec<u64>>,
}

impl EpochAccumulator {
    pub fn new(clusters: usize, classes: usize) -> Self {
        Self {
            steps: 0,
            loss_sum: 0.0,
            confidence_sum: 0.0,
            confidence_rows: 0,
            agreement_matches: 0,
            agreement_pairs: 0,
            contingency: vec![vec![0; classes]; clusters],
        }
    }

    pub fn record<T: Real>(&mut self, loss: f64, targets: &[Matrix<T>], labels: &[usize]) -> Result<()> {
        let assignments: Vec<Vec<usize>> = targets.iter().map(Matrix::argmax_rows).collect();
        for view in &assignments {
            if view.len() != labels.len() {
                return Err(Error::shape("epoch_stats", "labels and targets differ in length"));
            }
            for (&a, &l) in view.iter().zip(labels) {
                let row = self
                    .contingency
                    .get_mut(a)
                    .ok_or_else(|| Error::shape("epoch_stats", "cluster out of range"))?;
                *row.get_mut(l)
                    .ok_or_else(|| Error::shape("epoch_stats", "class out of range"))? += 1;
            }
        }
        let rows: usize = targets.iter().map(Matrix::rows).sum();
        self.confidence_sum += confidence(targets) * rows as f64;
        self.confidence_rows += rows as u64;
        if assignments.len() >= 2 {
            let (m, p) = agreement_counts(&assignments)?;
            self.agreement_matches += m;
            self.agreement_pairs += p;
        }
        self.loss_sum += loss;
        self.steps += 1;
        Ok(())
    }

    pub fn finish(&self, epoch: usize) -> Result<EpochStats> {
        let counts: Vec<u64> = self.contingency.iter().map(|r| r.iter().sum()).collect();
        let total: u64 = counts.iter().sum();
        if total == 0 || self.steps == 0 {
            return Err(Error::State("epoch finished without any recorded step".into()));
        }
        let majority: u64 = self
            .contingency
            .iter()
            .map(|r| r.iter().copied().max().unwrap_or(0))
            .sum();
        let sizes = size_stats_from_counts(counts)?;
        Ok(EpochStats {
            epoch,
            loss: self.loss_sum / self.steps as f64,
            confidence: self.confidence_sum / self.confidence_rows as f64,
            agreement: if self.agreement_pairs == 0 {
                0.0
            } else {
                self.agreement_matches as f64 / self.agreement_pairs as f64
            },
            purity: majority as f64 / total as f64,
            min_rel_size: sizes.min_rel,
            max_rel_size: sizes.max_rel,
            empty_frac: sizes.empty_frac,
        })
    }
}

/// Cluster distribution of a frozen teacher under plain inference (raw
/// argmax, no balancing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    pub clusters: usize,
    pub sizes: SizeStats,
    /// Relative sizes sorted in decreasing order.
    pub sorted_relative_sizes: Vec<f64>,
    pub purity: f64,
}

pub fn posttrain_audit<T: Real>(teacher: &Network<T>, data: &Dataset<T>) -> Result<AuditReport> {
    let assignments = teacher.assign(&data.points)?;
    let k = teacher.clusters();
    let sizes = size_stats(&assignments, k)?;
    let n = assignments.len() as f64;
    let mut sorted: Vec<f64> = sizes
        .counts
        .iter()
        .map(|&c| c as f64 * k as f64 / n)
        .collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(AuditReport {
        samples: assignments.len(),
        clusters: k,
        purity: purity(&assignments, &data.labels)?,
        sizes,
        sorted_relative_sizes: sorted,
    })
}
