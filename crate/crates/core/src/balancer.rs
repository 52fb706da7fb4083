//! Online cluster-size tracking and similarity rebalancing.
//!
//! The teacher's hard assignments on each batch give an in-batch share vector
//! `s_B`; an exponential moving average of those shares, `s`, estimates how
//! large each cluster is across the stream. Teacher similarities are then
//! remapped per cluster: similarities to undersized clusters (`s·K < 1`) are
//! pulled toward 1, similarities to oversized clusters (`s·K > 1`) toward -1,
//! and balanced clusters pass through unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Slack allowed on the cosine range before a similarity is rejected.
pub const SIMILARITY_SLACK: f64 = 1e-6;

/// Tolerance used when checking that a share vector lies on the simplex.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Shape of the remapping applied to undersized clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalancerVariant {
    /// `1 - (1 - z)·sK`
    #[default]
    Linear,
    /// `1 - (1 - z)·(sK)²`
    Exponential,
}

/// Which hard assignments feed the batch shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareSource {
    /// Argmax of the teacher's raw similarities.
    #[default]
    Raw,
    /// Argmax of the balanced similarities, i.e. of the teacher targets.
    /// Needs `BalanceThenUpdate`, since the batch must be balanced first.
    Balanced,
}

/// Whether the current batch's shares enter `s` before or after the batch is balanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    /// Update `s` with the batch, then balance the batch with the new `s`.
    #[default]
    UpdateThenBalance,
    /// Balance the batch with the previous `s`, then fold the batch in.
    BalanceThenUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancerConfig {
    #[serde(default = "default_enabled")]
    pub enabled: bool,
    #[serde(default)]
    pub variant: BalancerVariant,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub order: UpdateOrder,
    #[serde(default)]
    pub shares_from: ShareSource,
}

fn default_enabled() -> bool {
    true
}

fn default_momentum() -> f64 {
    0.999
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            variant: BalancerVariant::Linear,
            momentum: default_momentum(),
            order: UpdateOrder::UpdateThenBalance,
            shares_from: ShareSource::Raw,
        }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "balancer momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.shares_from == ShareSource::Balanced && self.order == UpdateOrder::UpdateThenBalance {
            return Err(Error::Parameter(
                "balanced shares need order = \"balance-then-update\"".into(),
            ));
        }
        Ok(())
    }
}

/// EMA estimate of the share of samples each cluster receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeSizes {
    shares: Vec<f64>,
    momentum: f64,
}

impl RelativeSizes {
    /// Uniform shares `1/K`.
    pub fn uniform(clusters: usize, momentum: f64) -> Result<Self> {
        if clusters < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 clusters, got {clusters}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!(
                "size momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            shares: vec![1.0 / clusters as f64; clusters],
            momentum,
        })
    }

    /// Rebuilds a state from stored shares, e.g. when loading a checkpoint.
    pub fn from_shares(shares: Vec<f64>, momentum: f64) -> Result<Self> {
        let mut state = Self::uniform(shares.len(), momentum)?;
        check_simplex(&shares, "from_shares")?;
        state.shares = shares;
        Ok(state)
    }

    pub fn shares(&self) -> &[f64] {
        &self.shares
    }

    pub fn clusters(&self) -> usize {
        self.shares.len()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `s ← s·m_s + s_B·(1 - m_s)`.
    pub fn update(&mut self, batch_shares: &[f64]) -> Result<()> {
        if batch_shares.len() != self.shares.len() {
            return Err(Error::shape(
                "update_sizes",
                format!(
                    "{} batch shares for {} clusters",
                    batch_shares.len(),
                    self.shares.len()
                ),
            ));
        }
        check_simplex(batch_shares, "update_sizes")?;
        let m = self.momentum;
        for (s, &b) in self.shares.iter_mut().zip(batch_shares) {
            *s = *s * m + b * (1.0 - m);
        }
        Ok(())
    }

    /// Largest deviation of `Σ s` from 1.
    pub fn simplex_error(&self) -> f64 {
        (self.shares.iter().sum::<f64>() - 1.0).abs()
    }

    /// `s_k·K` for every cluster.
    pub fn scaled(&self) -> Vec<f64> {
        let k = self.shares.len() as f64;
        self.shares.iter().map(|s| s * k).collect()
    }
}

fn check_simplex(shares: &[f64], op: &'static str) -> Result<()> {
    if shares.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
        return Err(Error::Domain {
            op,
            detail: "shares must lie in [0, 1]".into(),
        });
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Domain {
            op,
            detail: format!("shares sum to {total}, not 1"),
        });
    }
    Ok(())
}

/// Fraction of hard assignments per cluster.
pub fn shares_from_assignments(assignments: &[usize], clusters: usize) -> Result<Vec<f64>> {
    if assignments.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let mut counts = vec![0usize; clusters];
    for &a in assignments {
        if a >= clusters {
            return Err(Error::shape(
                "batch_shares",
                format!("assignment {a} out of range for {clusters} clusters"),
            ));
        }
        counts[a] += 1;
    }
    let n = assignments.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// In-batch shares `s_B` from row-wise argmax of assignment scores
/// (probabilities or raw similarities; argmax is the same). Ties go to the
/// lowest index.
pub fn batch_shares<T: Real>(scores: &Matrix<T>) -> Result<Vec<f64>> {
    shares_from_assignments(&scores.argmax_rows(), scores.cols())
}

/// Remaps one similarity `z` given the scaled size `sK = s·K`.
pub fn balance_scalar(z: f64, scaled_size: f64, variant: BalancerVariant) -> f64 {
    let sk = scaled_size;
    if sk < 1.0 {
        let factor = match variant {
            BalancerVariant::Linear => sk,
            BalancerVariant::Exponential => sk * sk,
        };
        1.0 - (1.0 - z) * factor
    } else if sk > 1.0 {
        (1.0 + z) / sk - 1.0
    } else {
        z
    }
}

/// Clamp-based form of [`balance_scalar`] with no data-dependent branches:
///
/// ```text
/// zB = z  + (1 - z)·(1 - (1 - relu(1 - sK))^p)     p = 1 linear, 2 exponential
/// zB = zB - (1 + zB)·relu(1 - 1/(sK))
/// ```
///
/// Algebraically `1 - (1 - z)(1 - relu(1 - sK))` followed by
/// `(1 + zB)(1 - relu(1 - 1/(sK))) - 1`, rearranged so that inactive clamps
/// leave `z` untouched bit for bit.
pub fn balance_branchfree_scalar(z: f64, scaled_size: f64, variant: BalancerVariant) -> f64 {
    let relu = |x: f64| x.max(0.0);
    let under = 1.0 - relu(1.0 - scaled_size);
    let under = match variant {
        BalancerVariant::Linear => under,
        BalancerVariant::Exponential => under * under,
    };
    let zb = z + (1.0 - z) * (1.0 - under);
    zb - (1.0 + zb) * relu(1.0 - 1.0 / scaled_size)
}

fn balance_with<T: Real>(
    z: &Matrix<T>,
    state: &RelativeSizes,
    variant: BalancerVariant,
    f: fn(f64, f64, BalancerVariant) -> f64,
) -> Result<Matrix<T>> {
    if z.cols() != state.clusters() {
        return Err(Error::shape(
            "balance",
            format!(
                "{} similarity columns for {} clusters",
                z.cols(),
                state.clusters()
            ),
        ));
    }
    if let Some(k) = state.shares().iter().position(|&s| !(s >= 0.0)) {
        return Err(Error::StateCorruption(format!(
            "cluster {k} has share {}",
            state.shares()[k]
        )));
    }
    let scaled = state.scaled();
    let limit = 1.0 + SIMILARITY_SLACK;
    let mut out = z.clone();
    for r in 0..z.rows() {
        for (c, x) in out.row_mut(r).iter_mut().enumerate() {
            let v = x.to_f64_lossy();
            if !(v.abs() <= limit) {
                return Err(Error::Domain {
                    op: "balance",
                    detail: format!("similarity {v} at ({r}, {c}) outside [-1, 1]"),
                });
            }
            *x = T::lit(f(v.clamp(-1.0, 1.0), scaled[c], variant));
        }
    }
    Ok(out)
}

/// Applies the balancing operator column-wise using `s`.
pub fn balance<T: Real>(
    z: &Matrix<T>,
    state: &RelativeSizes,
    variant: BalancerVariant,
) -> Result<Matrix<T>> {
    balance_with(z, state, variant, balance_scalar)
}

/// [`balance`] evaluated through the clamp-based form.
pub fn balance_branchfree<T: Real>(
    z: &Matrix<T>,
    state: &RelativeSizes,
    variant: BalancerVariant,
) -> Result<Matrix<T>> {
    balance_with(z, state, variant, balance_branchfree_scalar)
}

/// Size tracker plus operator, as used once per training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Balancer {
    config: BalancerConfig,
    sizes: RelativeSizes,
}

impl Balancer {
    pub fn new(config: BalancerConfig, clusters: usize) -> Result<Self> {
        config.validate()?;
        let sizes = RelativeSizes::uniform(clusters, config.momentum)?;
        Ok(Self { config, sizes })
    }

    pub fn from_parts(config: BalancerConfig, sizes: RelativeSizes) -> Result<Self> {
        config.validate()?;
        if sizes.momentum() != config.momentum {
            return Err(Error::State("stored size momentum differs from config".into()));
        }
        Ok(Self { config, sizes })
    }

    pub fn config(&self) -> &BalancerConfig {
        &self.config
    }

    pub fn sizes(&self) -> &RelativeSizes {
        &self.sizes
    }

    /// Tracks the teacher's global-view similarities (all views pooled into one
    /// batch of hard assignments) and returns the similarities used for
    /// targets. With balancing disabled `s` is still tracked and the
    /// similarities pass through unchanged.
    pub fn step<T: Real>(&mut self, teacher_views: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let apply = |sizes: &RelativeSizes| -> Result<Vec<Matrix<T>>> {
            teacher_views
                .iter()
                .map(|z| {
                    if self.config.enabled {
                        balance(z, sizes, self.config.variant)
                    } else {
                        Ok(z.clone())
                    }
                })
                .collect()
        };
        let k = self.sizes.clusters();
        match self.config.order {
            UpdateOrder::UpdateThenBalance => {
                self.sizes.update(&pooled_shares(teacher_views, k)?)?;
                apply(&self.sizes)
            }
            UpdateOrder::BalanceThenUpdate => {
                let out = apply(&self.sizes)?;
                let shares = match self.config.shares_from {
                    ShareSource::Raw => pooled_shares(teacher_views, k)?,
                    ShareSource::Balanced => pooled_shares(&out, k)?,
                };
                self.sizes.update(&shares)?;
                Ok(out)
            }
        }
    }
}

fn pooled_shares<T: Real>(views: &[Matrix<T>], clusters: usize) -> Result<Vec<f64>> {
    let assignments: Vec<usize> = views.iter().flat_map(|z| z.argmax_rows()).collect();
    shares_from_assignments(&assignments, clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LIN: BalancerVariant = BalancerVariant::Linear;
    const EXP: BalancerVariant = BalancerVariant::Exponential;

    #[test]
    fn init_is_uniform() {
        let s = RelativeSizes::uniform(4, 0.999).unwrap();
        assert_eq!(s.shares(), &[0.25; 4]);
        let big = RelativeSizes::uniform(65536, 0.999).unwrap();
        assert!(big.shares().iter().all(|&x| x == 1.0 / 65536.0));
        assert!(big.simplex_error() < 1e-9);
        assert!(RelativeSizes::uniform(1, 0.9).is_err());
        assert!(RelativeSizes::uniform(4, 1.0).is_err());
    }

    #[test]
    fn batch_share_examples() {
        let unanimous = Matrix::from_rows(&vec![vec![0.1, 0.2, 0.7f64]; 4]).unwrap();
        assert_eq!(batch_shares(&unanimous).unwrap(), vec![0.0, 0.0, 1.0]);

        let mixed = Matrix::from_rows(&[
            vec![0.8, 0.1, 0.1f64],
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.1, 0.2, 0.7],
        ])
        .unwrap();
        assert_eq!(batch_shares(&mixed).unwrap(), vec![0.5, 0.25, 0.25]);

        let tied = Matrix::from_rows(&[vec![0.5, 0.5f64]]).unwrap();
        assert_eq!(batch_shares(&tied).unwrap(), vec![1.0, 0.0]);

        assert!(batch_shares(&Matrix::<f64>::zeros(0, 3)).is_err());
    }

    #[test]
    fn update_examples() {
        let mut s = RelativeSizes::uniform(4, 0.0).unwrap();
        s.update(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(s.shares(), &[0.1, 0.2, 0.3, 0.4]);

        let mut s = RelativeSizes::uniform(4, 0.999).unwrap();
        s.update(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [0.25075, 0.24975, 0.24975, 0.24975];
        for (a, b) in s.shares().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }

        assert!(matches!(s.update(&[1.0, 0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn operator_examples() {
        for z in [-1.0, -0.3, 0.0, 0.6, 1.0] {
            assert_eq!(balance_scalar(z, 1.0, LIN), z);
            assert_eq!(balance_scalar(z, 0.0, LIN), 1.0);
        }
        assert!((balance_scalar(0.6, 0.5, LIN) - 0.8).abs() < 1e-15);
        assert!((balance_scalar(0.6, 2.0, LIN) + 0.2).abs() < 1e-15);
        let collapsed = balance_scalar(0.6, 65536.0, LIN);
        assert!((collapsed - (1.6 / 65536.0 - 1.0)).abs() < 1e-15);
        assert!((collapsed + 0.99998).abs() < 1e-5);
        // exponential undersized branch
        assert!((balance_scalar(0.6, 0.5, EXP) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn branchfree_examples() {
        assert_eq!(balance_branchfree_scalar(0.3, 1.0, LIN), 0.3);
        assert!((balance_branchfree_scalar(0.6, 0.5, LIN) - 0.8).abs() < 1e-15);
        assert!((balance_branchfree_scalar(0.6, 2.0, LIN) + 0.2).abs() < 1e-15);
        assert!((balance_branchfree_scalar(0.2, 0.0, LIN) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn published_branchfree_line_disagrees_with_piecewise_definition() {
        // 1 + (1 - z)(1 - relu(1 - sK)) is not the identity for sK >= 1.
        let literal = |z: f64, sk: f64| {
            let zb = 1.0 + (1.0 - z) * (1.0 - (1.0 - sk).max(0.0));
            (1.0 + zb) * (1.0 - (1.0 - 1.0 / sk).max(0.0)) - 1.0
        };
        assert!((literal(0.3, 1.0) - 0.3).abs() > 0.5);
        assert!((literal(0.6, 0.5) - balance_scalar(0.6, 0.5, LIN)).abs() > 0.1);
    }

    #[test]
    fn balance_matrix_checks_domain_and_state() {
        let s = RelativeSizes::uniform(2, 0.9).unwrap();
        let bad = Matrix::from_rows(&[vec![1.1, 0.0f64]]).unwrap();
        assert!(matches!(balance(&bad, &s, LIN), Err(Error::Domain { .. })));
        let slightly = Matrix::from_rows(&[vec![1.0 + 5e-7, 0.0f64]]).unwrap();
        assert_eq!(balance(&slightly, &s, LIN).unwrap().get(0, 0), 1.0);

        let mut corrupt = s.clone();
        corrupt.shares[0] = -0.1;
        let ok = Matrix::from_rows(&[vec![0.1, 0.0f64]]).unwrap();
        assert!(matches!(
            balance(&ok, &corrupt, LIN),
            Err(Error::StateCorruption(_))
        ));
        let wide = Matrix::<f64>::zeros(1, 3);
        assert!(matches!(balance(&wide, &s, LIN), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_state_is_identity_on_matrices() {
        let s = RelativeSizes::uniform(4, 0.999).unwrap();
        let z = Matrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 / 12.0) * 2.0 - 0.9);
        assert_eq!(balance(&z, &s, LIN).unwrap(), z);
        assert_eq!(balance(&z, &s, EXP).unwrap(), z);
        assert_eq!(balance_branchfree(&z, &s, LIN).unwrap(), z);
    }

    #[test]
    fn step_order_controls_which_state_balances_the_batch() {
        let z = Matrix::from_rows(&[vec![0.9, 0.1f64], vec![0.8, 0.2]]).unwrap();
        let cfg = BalancerConfig {
            momentum: 0.5,
            ..Default::default()
        };
        let mut first = Balancer::new(cfg.clone(), 2).unwrap();
        let out = first.step(std::slice::from_ref(&z)).unwrap();
        assert_eq!(first.sizes().shares(), &[0.75, 0.25]);
        assert_ne!(out[0], z);

        let mut later = Balancer::new(
            BalancerConfig {
                order: UpdateOrder::BalanceThenUpdate,
                ..cfg.clone()
            },
            2,
        )
        .unwrap();
        let out = later.step(std::slice::from_ref(&z)).unwrap();
        assert_eq!(out[0], z);
        assert_eq!(later.sizes().shares(), &[0.75, 0.25]);

        let mut off = Balancer::new(
            BalancerConfig {
                enabled: false,
                ..cfg
            },
            2,
        )
        .unwrap();
        let out = off.step(std::slice::from_ref(&z)).unwrap();
        assert_eq!(out[0], z);
        assert_eq!(off.sizes().shares(), &[0.75, 0.25]);
    }

    #[test]
    fn balanced_shares_count_target_assignments() {
        let cfg = BalancerConfig {
            momentum: 0.5,
            order: UpdateOrder::BalanceThenUpdate,
            shares_from: ShareSource::Balanced,
            ..Default::default()
        };
        let mut b = Balancer::new(cfg.clone(), 2).unwrap();
        let z = Matrix::from_rows(&[vec![0.9, 0.1f64], vec![0.8, 0.2]]).unwrap();
        b.step(&[z]).unwrap();
        assert_eq!(b.sizes().shares(), &[0.75, 0.25]);
        // raw argmax says cluster 0, balanced says cluster 1
        let z = Matrix::from_rows(&[vec![0.6, 0.5f64], vec![0.6, 0.5]]).unwrap();
        let out = b.step(&[z]).unwrap();
        assert_eq!(out[0].argmax_rows(), vec![1, 1]);
        assert_eq!(b.sizes().shares(), &[0.375, 0.625]);

        let bad = BalancerConfig {
            order: UpdateOrder::UpdateThenBalance,
            ..cfg
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, k).prop_map(|v| {
            let total: f64 = v.iter().sum::<f64>() + 1e-3;
            let mut out: Vec<f64> = v.iter().map(|x| x / total).collect();
            let rest = 1.0 - out.iter().sum::<f64>();
            out[0] += rest;
            out
        })
    }

    proptest! {
        #[test]
        fn ema_stays_on_simplex(
            momentum in 0.0f64..0.9999,
            batches in prop::collection::vec(simplex(6), 1..200),
        ) {
            let mut s = RelativeSizes::uniform(6, momentum).unwrap();
            for b in &batches {
                s.update(b).unwrap();
                prop_assert!(s.simplex_error() < 1e-9);
                prop_assert!(s.shares().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn operator_range_and_monotonicity(
            z1 in -1.0f64..=1.0, z2 in -1.0f64..=1.0,
            s1 in 0.0f64..1.0, s2 in 0.0f64..1.0,
            k in 2usize..100_000,
        ) {
            for variant in [LIN, EXP] {
                let sk1 = s1 * k as f64;
                let sk2 = s2 * k as f64;
                let b = balance_scalar(z1, sk1, variant);
                prop_assert!((-1.0..=1.0).contains(&b));
                let (lo, hi) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
                prop_assert!(balance_scalar(lo, sk1, variant) <= balance_scalar(hi, sk1, variant));
                let (small, large) = if sk1 <= sk2 { (sk1, sk2) } else { (sk2, sk1) };
                prop_assert!(balance_scalar(z1, small, variant) >= balance_scalar(z1, large, variant));
            }
        }
    }
}
