//! Textbook/quiz partition of the labeled training set.
//!
//! The quiz pool is a fixed-size subset withheld from the student's direct
//! supervision. In dynamic mode it is refreshed from the textbook pool,
//! preferring samples the student currently gets wrong, and positives over
//! negatives. Admission probability for a candidate with label `y` and
//! difficulty `ψ` is
//!
//! ```text
//! P = (α(1−y) + y) · ψ^γ · sigmoid(σ·((1 − ψ̄) − μ))
//! ```
//!
//! where `ψ̄` is the pool's current mean difficulty. Each admission evicts the
//! easiest pool member back to the textbook pool.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    PerEpoch,
    PerIteration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// Weight of negatives relative to positives.
    pub alpha: f64,
    /// Focus exponent on difficulty.
    pub gamma: f64,
    /// Steepness of the pool-difficulty gate.
    pub sigma: f64,
    /// Centre of the pool-difficulty gate.
    pub mu: f64,
    pub pool_fraction: f64,
    pub cadence: Cadence,
    pub mode: PoolMode,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            gamma: 2.0,
            sigma: 16.0,
            mu: 0.5,
            pool_fraction: 0.2,
            cadence: Cadence::PerEpoch,
            mode: PoolMode::Dynamic,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::config(format!(
                "gamma must be ≥ 0, got {}",
                self.gamma
            )));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::config(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::config("mu must be finite"));
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction < 1.0) {
            return Err(Error::config(format!(
                "pool_fraction must lie in (0, 1), got {}",
                self.pool_fraction
            )));
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} must lie in [0, 1], got {v}"
        )))
    }
}

fn check_label(y: u8) -> Result<()> {
    if y <= 1 {
        Ok(())
    } else {
        Err(Error::invalid(format!("label must be 0 or 1, got {y}")))
    }
}

/// How wrong a prediction is: `(1−y)·p + y·(1−p)`.
pub fn difficulty(y: u8, pred: f64) -> Result<f64> {
    check_label(y)?;
    check_unit("prediction", pred)?;
    let y = y as f64;
    Ok((1.0 - y) * pred + y * (1.0 - pred))
}

/// Probability that a textbook sample is admitted into the dynamic pool.
pub fn selection_probability(y: u8, psi: f64, pool_mean: f64, cfg: &PoolConfig) -> Result<f64> {
    check_label(y)?;
    check_unit("difficulty", psi)?;
    check_unit("pool mean difficulty", pool_mean)?;
    let class_weight = if y == 1 { 1.0 } else { cfg.alpha };
    let focus = psi.powf(cfg.gamma);
    let gate = 1.0 / (1.0 + (-cfg.sigma * ((1.0 - pool_mean) - cfg.mu)).exp());
    Ok(class_weight * focus * gate)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolMember {
    pub id: u64,
    pub label: u8,
    pub psi: f64,
}

/// A textbook sample offered for admission, with the student's current
/// prediction for it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub id: u64,
    pub label: u8,
    pub pred: f64,
}

/// Fixed-capacity quiz pool; members are kept sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuizPool {
    members: Vec<PoolMember>,
    capacity: usize,
}

impl QuizPool {
    pub fn new(mut members: Vec<PoolMember>) -> Result<Self> {
        members.sort_by_key(|m| m.id);
        if members.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::invalid("duplicate quiz-pool member"));
        }
        for m in &members {
            check_label(m.label)?;
            check_unit("difficulty", m.psi)?;
        }
        Ok(Self {
            capacity: members.len(),
            members,
        })
    }

    pub fn members(&self) -> &[PoolMember] {
        &self.members
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.members.iter().map(|m| m.id)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.members.binary_search_by_key(&id, |m| m.id).is_ok()
    }

    /// Recomputes each member's difficulty from fresh predictions.
    pub fn refresh(&mut self, preds: &BTreeMap<u64, f64>) -> Result<()> {
        for m in &mut self.members {
            let p = preds
                .get(&m.id)
                .ok_or_else(|| Error::invalid(format!("no prediction for quiz sample {}", m.id)))?;
            m.psi = difficulty(m.label, *p)?;
        }
        Ok(())
    }

    /// Index of the easiest member; ties go to the lowest id.
    fn easiest(&self) -> usize {
        let mut best = 0;
        for (i, m) in self.members.iter().enumerate().skip(1) {
            if m.psi < self.members[best].psi {
                best = i;
            }
        }
        best
    }
}

/// Arithmetic mean of the members' difficulties.
pub fn mean_difficulty(pool: &QuizPool) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::invalid("mean difficulty of an empty quiz pool"));
    }
    Ok(pool.members.iter().map(|m| m.psi).sum::<f64>() / pool.len() as f64)
}

/// Random textbook/quiz partition with `round(pool_fraction·N)` quiz samples.
///
/// Returns the textbook ids (sorted) and the pool, whose difficulties start
/// at zero until refreshed.
pub fn static_split<R: Rng>(
    samples: &[(u64, u8)],
    cfg: &PoolConfig,
    rng: &mut R,
) -> Result<(Vec<u64>, QuizPool)> {
    cfg.validate()?;
    let n = samples.len();
    if n < 5 {
        return Err(Error::DatasetTooSmall(format!(
            "quiz-pool split needs at least 5 samples, got {n}"
        )));
    }
    let unique: BTreeSet<u64> = samples.iter().map(|s| s.0).collect();
    if unique.len() != n {
        return Err(Error::invalid("duplicate sample id in labeled set"));
    }
    let k = (cfg.pool_fraction * n as f64).round() as usize;
    let k = k.clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let members = order[..k]
        .iter()
        .map(|&i| PoolMember {
            id: samples[i].0,
            label: samples[i].1,
            psi: 0.0,
        })
        .collect();
    let mut textbook: Vec<u64> = order[k..].iter().map(|&i| samples[i].0).collect();
    textbook.sort_unstable();
    Ok((textbook, QuizPool::new(members)?))
}

/// Outcome of one [`update_pool`] round.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolUpdate {
    pub pool: QuizPool,
    /// Textbook ids after the swap, sorted.
    pub textbook: Vec<u64>,
    pub admitted: Vec<u64>,
    pub evicted: Vec<u64>,
}

/// One dynamic refresh round.
///
/// Candidates are visited in id order; each gets one Bernoulli draw with its
/// admission probability under the pool's mean difficulty at that moment.
/// An admitted candidate replaces the easiest member, which rejoins the
/// textbook pool. Pool members must already carry fresh difficulties.
pub fn update_pool<R: Rng>(
    pool: &QuizPool,
    candidates: &[Candidate],
    cfg: &PoolConfig,
    rng: &mut R,
) -> Result<PoolUpdate> {
    let mut textbook: BTreeSet<u64> = candidates.iter().map(|c| c.id).collect();
    if textbook.len() != candidates.len() {
        return Err(Error::invalid("duplicate candidate id"));
    }
    if let Some(c) = candidates.iter().find(|c| pool.contains(c.id)) {
        return Err(Error::Leakage { id: c.id });
    }
    let mut next = pool.clone();
    let mut admitted = Vec::new();
    let mut evicted = Vec::new();
    if candidates.is_empty() || pool.is_empty() {
        return Ok(PoolUpdate {
            pool: next,
            textbook: textbook.into_iter().collect(),
            admitted,
            evicted,
        });
    }

    let mut ordered: Vec<&Candidate> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.id);
    let mut mean = mean_difficulty(&next)?;
    for c in ordered {
        let psi = difficulty(c.label, c.pred)?;
        let p = selection_probability(c.label, psi, mean, cfg)?;
        let u: f64 = rng.random();
        if u >= p {
            continue;
        }
        let out = next.members.remove(next.easiest());
        textbook.insert(out.id);
        textbook.remove(&c.id);
        let at = next.members.partition_point(|m| m.id < c.id);
        next.members.insert(
            at,
            PoolMember {
                id: c.id,
                label: c.label,
                psi,
            },
        );
        evicted.push(out.id);
        admitted.push(c.id);
        mean = mean_difficulty(&next)?;
    }
    Ok(PoolUpdate {
        pool: next,
        textbook: textbook.into_iter().collect(),
        admitted,
        evicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn difficulty_examples() {
        assert_eq!(difficulty(1, 1.0).unwrap(), 0.0);
        assert_eq!(difficulty(1, 0.0).unwrap(), 1.0);
        assert!((difficulty(0, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!(difficulty(2, 0.3).is_err());
        assert!(difficulty(0, 1.3).is_err());
    }

    #[test]
    fn selection_probability_examples() {
        let cfg = PoolConfig::default();
        assert_eq!(selection_probability(1, 0.5, 0.5, &cfg).unwrap(), 0.125);
        assert!(selection_probability(1, 0.5, 1.5, &cfg).is_err());
    }

    #[test]
    fn mean_difficulty_examples() {
        let pool = |psis: &[f64]| {
            QuizPool::new(
                psis.iter()
                    .enumerate()
                    .map(|(i, &psi)| PoolMember {
                        id: i as u64,
                        label: 0,
                        psi,
                    })
                    .collect(),
            )
            .unwrap()
        };
        assert_eq!(mean_difficulty(&pool(&[0.0, 0.0])).unwrap(), 0.0);
        assert!((mean_difficulty(&pool(&[0.2, 0.4, 0.6])).unwrap() - 0.4).abs() < 1e-15);
        assert!(mean_difficulty(&pool(&[])).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = PoolConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = 1.2;
        assert!(cfg.validate().is_err());
        cfg = PoolConfig {
            pool_fraction: 1.0,
            ..PoolConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn static_split_sizes_and_determinism() {
        let samples: Vec<(u64, u8)> = (0..100).map(|i| (i, (i % 3 == 0) as u8)).collect();
        let cfg = PoolConfig::default();
        let (tb, pool) = static_split(&samples, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((tb.len(), pool.len()), (80, 20));
        let mut all: Vec<u64> = tb.iter().copied().chain(pool.ids()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let again = static_split(&samples, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again, (tb, pool));
        assert!(static_split(&samples[..4], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn zero_difficulty_candidates_never_enter() {
        let pool = QuizPool::new(vec![PoolMember {
            id: 0,
            label: 1,
            psi: 0.1,
        }])
        .unwrap();
        let cands = [
            Candidate {
                id: 1,
                label: 1,
                pred: 1.0,
            },
            Candidate {
                id: 2,
                label: 0,
                pred: 0.0,
            },
        ];
        let out = update_pool(
            &pool,
            &cands,
            &PoolConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.pool, pool);
        assert_eq!(out.textbook, vec![1, 2]);
    }

    #[test]
    fn certain_admission_swaps_out_easiest() {
        let pool = QuizPool::new(vec![
            PoolMember {
                id: 3,
                label: 0,
                psi: 0.4,
            },
            PoolMember {
                id: 5,
                label: 1,
                psi: 0.2,
            },
            PoolMember {
                id: 7,
                label: 1,
                psi: 0.2,
            },
        ])
        .unwrap();
        let cfg = PoolConfig {
            sigma: 1000.0,
            mu: 0.0,
            ..PoolConfig::default()
        };
        let cands = [Candidate {
            id: 9,
            label: 1,
            pred: 0.0,
        }];
        let out = update_pool(&pool, &cands, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.admitted, vec![9]);
        assert_eq!(out.evicted, vec![5], "tie goes to the lowest id");
        assert_eq!(out.pool.ids().collect::<Vec<_>>(), vec![3, 7, 9]);
        assert_eq!(out.textbook, vec![5]);
        assert_eq!(out.pool.capacity(), 3);
    }

    #[test]
    fn candidates_overlapping_pool_are_rejected() {
        let pool = QuizPool::new(vec![PoolMember {
            id: 1,
            label: 1,
            psi: 0.1,
        }])
        .unwrap();
        let cands = [Candidate {
            id: 1,
            label: 1,
            pred: 0.0,
        }];
        let err = update_pool(
            &pool,
            &cands,
            &PoolConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::Leakage { id: 1 })));
    }

    proptest! {
        #[test]
        fn probability_in_unit_interval_and_monotone(
            y in 0u8..2,
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
            mean in 0.0f64..=1.0,
        ) {
            let cfg = PoolConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p_lo = selection_probability(y, lo, mean, &cfg).unwrap();
            let p_hi = selection_probability(y, hi, mean, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&p_lo) && (0.0..=1.0).contains(&p_hi));
            prop_assert!(p_lo <= p_hi);
        }

        #[test]
        fn positives_outweigh_negatives_by_alpha(psi in 0.0f64..=1.0, mean in 0.0f64..=1.0) {
            let cfg = PoolConfig::default();
            let pos = selection_probability(1, psi, mean, &cfg).unwrap();
            let neg = selection_probability(0, psi, mean, &cfg).unwrap();
            prop_assert!((pos * cfg.alpha - neg).abs() <= 1e-15);
        }

        #[test]
        fn hard_pools_resist_replacement(y in 0u8..2, psi in 0.01f64..=1.0, sigma in 0.1f64..50.0) {
            let cfg = PoolConfig { sigma, ..PoolConfig::default() };
            let hard = selection_probability(y, psi, 1.0, &cfg).unwrap();
            let easy = selection_probability(y, psi, 0.0, &cfg).unwrap();
            prop_assert!(hard < easy);
        }
    }
}
