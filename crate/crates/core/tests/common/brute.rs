//! Scalar-loop reference implementations of the metrics.

use clusterbal::metrics::{agreement, confidence, purity, size_stats};
use clusterbal::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_simplex(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let mut m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0));
    for r in 0..rows {
        let s: f64 = m.row(r).iter().sum();
        m.row_mut(r).iter_mut().for_each(|x| *x /= s);
    }
    m
}

pub fn oracle_confidence(views: &[Matrix<f64>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for v in views {
        for r in 0..v.rows() {
            let mut best = f64::NEG_INFINITY;
            for c in 0..v.cols() {
                if v.get(r, c) > best {
                    best = v.get(r, c);
                }
            }
            total += best;
            n += 1;
        }
    }
    total / n as f64
}

pub fn oracle_agreement(a: &[Vec<usize>]) -> f64 {
    let mut hits = 0;
    let mut pairs = 0;
    for n in 0..a[0].len() {
        for i in 0..a.len() {
            for j in 0..a.len() {
                if i != j {
                    pairs += 1;
                    if a[i][n] == a[j][n] {
                        hits += 1;
                    }
                }
            }
        }
    }
    hits as f64 / pairs as f64
}

pub fn oracle_purity(assign: &[usize], labels: &[usize]) -> f64 {
    let mut total = 0;
    for k in 0..=*assign.iter().max().unwrap() {
        let mut best = 0;
        for c in 0..=*labels.iter().max().unwrap() {
            let count = assign
                .iter()
                .zip(labels)
                .filter(|(&a, &l)| a == k && l == c)
                .count();
            best = best.max(count);
        }
        total += best;
    }
    total as f64 / assign.len() as f64
}

pub fn oracle_sizes(assign: &[usize], k: usize) -> (f64, f64, f64) {
    let n = assign.len() as f64;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut empty = 0;
    for c in 0..k {
        let count = assign.iter().filter(|&&a| a == c).count();
        let rel = count as f64 * k as f64 / n;
        lo = lo.min(rel);
        hi = hi.max(rel);
        if count == 0 {
            empty += 1;
        }
    }
    (lo, hi, empty as f64 / k as f64)
}

pub fn first_max(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Largest absolute gap between library metrics and the scalar oracles over
/// `instances` random small problems. Structural mismatches (counts not
/// summing to N, non-integer empty counts) are errors.
pub fn metric_gap(seed: u64, instances: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(1..=16);
        let k = rng.gen_range(2..=8);
        let g = rng.gen_range(2..=3);
        let views: Vec<_> = (0..g).map(|_| random_simplex(n, k, &mut rng)).collect();
        worst = worst.max((confidence(&views) - oracle_confidence(&views)).abs());

        let assigns: Vec<Vec<usize>> = views
            .iter()
            .map(|v| (0..n).map(|r| first_max(v.row(r))).collect())
            .collect();
        let a_lib = agreement(&assigns).map_err(|e| e.to_string())?;
        worst = worst.max((a_lib - oracle_agreement(&assigns)).abs());

        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let a = &assigns[0];
        let p_lib = purity(a, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((p_lib - oracle_purity(a, &labels)).abs());

        let s = size_stats(a, k).map_err(|e| e.to_string())?;
        let (lo, hi, empty) = oracle_sizes(a, k);
        worst = worst
            .max((s.min_rel - lo).abs())
            .max((s.max_rel - hi).abs())
            .max((s.empty_frac - empty).abs());
        if s.counts.iter().sum::<u64>() != n as u64 {
            return Err(format!("counts sum to {:?}, expected {n}", s.counts));
        }
        let scaled = s.empty_frac * k as f64;
        if (scaled - scaled.round()).abs() > 1e-12 {
            return Err(format!("empty fraction {} is not a multiple of 1/{k}", s.empty_frac));
        }
    }
    Ok(worst)
}
