//! Mutual information on finite joints and a numerical check of the InfoNCE
//! lower bound on the MI gap.
//!
//! Everything is in nats. The InfoNCE estimate uses the exact density ratios
//! `h(x, e) = p(e|x) / p(e)` read from the joints, with the positive drawn
//! from `p(x, e⁺)` and `N` negatives drawn from `p(e⁻ | x)` for the same `x`.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SeededRng;

pub const BOUND_CSV_HEADER: &str = "# comoe-bound-report v1";

/// Composition count above which [`EstimateMethod::Auto`] falls back to
/// sampling.
pub const MAX_EXACT_TERMS: u64 = 2_000_000;

/// Largest `|X|·|M⁻|` evaluated exactly under [`EstimateMethod::Auto`].
pub const MAX_EXACT_SUPPORT: usize = 64;

#[derive(Debug, Error)]
pub enum MigapError {
    #[error("invalid joint: {0}")]
    InvalidJoint(String),
    #[error("x-marginals differ by {diff:e} at x = {x}")]
    MarginalMismatch { x: usize, diff: f64 },
    #[error("number of negatives must be >= 1")]
    InvalidN,
    #[error("num_mc must be >= 1")]
    InvalidNumMc,
    #[error("negative joint has no mass at x = {x} where the positive joint does")]
    DegenerateConditional { x: usize },
    #[error("exact enumeration needs {terms} terms, limit is {limit}")]
    ExactInfeasible { terms: u64, limit: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Joint probability table `p(x, m)` over `|X| × |M|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    probs: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self, MigapError> {
        let cols = probs.first().map_or(0, Vec::len);
        if probs.is_empty() || cols == 0 {
            return Err(MigapError::InvalidJoint("empty table".into()));
        }
        if probs.iter().any(|r| r.len() != cols) {
            return Err(MigapError::InvalidJoint("ragged rows".into()));
        }
        if probs.iter().flatten().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(MigapError::InvalidJoint("entries must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MigapError::InvalidJoint(format!("total mass {total}")));
        }
        Ok(Self { probs })
    }

    /// `p(x, m) = p(x)·p(m|x)` from a marginal and row-stochastic conditionals.
    pub fn from_conditionals(px: &[f64], cond: &[Vec<f64>]) -> Result<Self, MigapError> {
        if px.len() != cond.len() {
            return Err(MigapError::InvalidJoint("marginal/conditional length mismatch".into()));
        }
        let probs = px
            .iter()
            .zip(cond)
            .map(|(p, row)| {
                let s: f64 = row.iter().sum();
                row.iter().map(|c| p * c / s).collect()
            })
            .collect();
        Self::new(probs)
    }

    pub fn n_x(&self) -> usize {
        self.probs.len()
    }

    pub fn n_m(&self) -> usize {
        self.probs[0].len()
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn p_x(&self) -> Vec<f64> {
        self.probs.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn p_m(&self) -> Vec<f64> {
        (0..self.n_m())
            .map(|m| self.probs.iter().map(|r| r[m]).sum())
            .collect()
    }

    /// `p(m | x)`; all zeros when `p(x) = 0`.
    pub fn conditional(&self, x: usize) -> Vec<f64> {
        let row = &self.probs[x];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter().map(|p| p / s).collect()
        } else {
            vec![0.0; row.len()]
        }
    }
}

/// `I(X; M) = Σ p(x,m) ln(p(x,m) / (p(x)p(m)))`, with `0·ln 0 = 0`.
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    let px = joint.p_x();
    let pm = joint.p_m();
    let mut mi = 0.0;
    for (x, row) in joint.probs.iter().enumerate() {
        for (m, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (px[x] * pm[m])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Joints over `(x, e⁺)` and `(x, e⁻)` sharing the x-marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapScenario {
    pub name: String,
    joint_pos: DiscreteJoint,
    joint_neg: DiscreteJoint,
}

impl GapScenario {
    pub fn new(
        name: impl Into<String>,
        joint_pos: DiscreteJoint,
        joint_neg: DiscreteJoint,
    ) -> Result<Self, MigapError> {
        if joint_pos.n_x() != joint_neg.n_x() {
            return Err(MigapError::InvalidJoint(format!(
                "|X| differs: {} vs {}",
                joint_pos.n_x(),
                joint_neg.n_x()
            )));
        }
        for (x, (a, b)) in joint_pos.p_x().iter().zip(joint_neg.p_x()).enumerate() {
            let diff = (a - b).abs();
            if diff > 1e-9 {
                return Err(MigapError::MarginalMismatch { x, diff });
            }
        }
        Ok(Self {
            name: name.into(),
            joint_pos,
            joint_neg,
        })
    }

    pub fn joint_pos(&self) -> &DiscreteJoint {
        &self.joint_pos
    }

    pub fn joint_neg(&self) -> &DiscreteJoint {
        &self.joint_neg
    }

    /// Positive joint is a bijection on uniform `x`, negative joint is
    /// independent uniform. `ΔI = ln m`, and the InfoNCE loss is the constant
    /// `ln(1 + N/m)`.
    pub fn deterministic_vs_independent(m: usize) -> Self {
        let u = 1.0 / m as f64;
        let pos = (0..m)
            .map(|x| (0..m).map(|e| if e == x { u } else { 0.0 }).collect())
            .collect();
        let neg = vec![vec![u * u; m]; m];
        Self::new(
            format!("deterministic-vs-independent-{m}"),
            DiscreteJoint::new(pos).expect("valid by construction"),
            DiscreteJoint::new(neg).expect("valid by construction"),
        )
        .expect("shared marginal")
    }

    /// Both joints independent uniform; `ΔI = 0`.
    pub fn independent_pair(m: usize) -> Self {
        let u = 1.0 / m as f64;
        let j = DiscreteJoint::new(vec![vec![u * u; m]; m]).expect("valid by construction");
        Self::new(format!("independent-{m}"), j.clone(), j).expect("shared marginal")
    }

    /// Random scenario with full-support conditionals of varied peakedness.
    pub fn random<R: Rng + ?Sized>(name: impl Into<String>, n_x: usize, n_pos: usize, n_neg: usize, rng: &mut R) -> Self {
        let px: Vec<f64> = (0..n_x).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = px.iter().sum();
        let px: Vec<f64> = px.iter().map(|p| p / total).collect();
        let mut rows = |width: usize| -> Vec<Vec<f64>> {
            (0..n_x)
                .map(|_| {
                    let sharp = rng.random_range(0.5..6.0);
                    (0..width)
                        .map(|_| rng.random_range(0.01f64..1.0).powf(sharp))
                        .collect()
                })
                .collect()
        };
        let pos = rows(n_pos);
        let neg = rows(n_neg);
        Self::new(
            name,
            DiscreteJoint::from_conditionals(&px, &pos).expect("valid by construction"),
            DiscreteJoint::from_conditionals(&px, &neg).expect("valid by construction"),
        )
        .expect("shared marginal")
    }

    /// Tiny support (|X|·|M⁻| ≤ 64) for exact enumeration.
    pub fn random_small<R: Rng + ?Sized>(name: impl Into<String>, rng: &mut R) -> Self {
        let n_x = rng.random_range(2..=4);
        let n_pos = rng.random_range(2..=4);
        let n_neg = rng.random_range(2..=4);
        Self::random(name, n_x, n_pos, n_neg, rng)
    }

    fn check_conditionals(&self) -> Result<(), MigapError> {
        for (x, (a, b)) in self.joint_pos.p_x().iter().zip(self.joint_neg.p_x()).enumerate() {
            if *a > 0.0 && b <= 0.0 {
                return Err(MigapError::DegenerateConditional { x });
            }
        }
        Ok(())
    }
}

/// `I(x; e⁺) − I(x; e⁻)`.
pub fn mi_gap(scenario: &GapScenario) -> f64 {
    mutual_information(&scenario.joint_pos) - mutual_information(&scenario.joint_neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoNceEstimate {
    /// `ln N − L_NCE`
    pub estimate: f64,
    /// Standard error of `estimate`; zero for exact enumeration.
    pub stderr: f64,
    pub exact: bool,
}

/// Per-(x, e⁺) density ratios and per-x negative conditionals.
struct Ratios {
    h_pos: Vec<Vec<f64>>,
    h_neg: Vec<Vec<f64>>,
    cond_neg: Vec<Vec<f64>>,
}

fn ratios(s: &GapScenario) -> Ratios {
    let pm_pos = s.joint_pos.p_m();
    let pm_neg = s.joint_neg.p_m();
    let ratio = |cond: Vec<f64>, pm: &[f64]| -> Vec<f64> {
        cond.iter()
            .zip(pm)
            .map(|(c, p)| if *p > 0.0 { c / p } else { 0.0 })
            .collect()
    };
    let n_x = s.joint_pos.n_x();
    Ratios {
        h_pos: (0..n_x).map(|x| ratio(s.joint_pos.conditional(x), &pm_pos)).collect(),
        h_neg: (0..n_x).map(|x| ratio(s.joint_neg.conditional(x), &pm_neg)).collect(),
        cond_neg: (0..n_x).map(|x| s.joint_neg.conditional(x)).collect(),
    }
}

/// Monte-Carlo estimate of `ln N − L_NCE` from `num_mc` independent draws.
pub fn infonce_estimate(
    scenario: &GapScenario,
    n: usize,
    num_mc: usize,
    seed: u64,
) -> Result<InfoNceEstimate, MigapError> {
    let mut rng = SeededRng::seed_from_u64(seed);
    infonce_estimate_with(scenario, n, num_mc, &mut rng)
}

pub fn infonce_estimate_with<R: Rng + ?Sized>(
    scenario: &GapScenario,
    n: usize,
    num_mc: usize,
    rng: &mut R,
) -> Result<InfoNceEstimate, MigapError> {
    if n == 0 {
        return Err(MigapError::InvalidN);
    }
    if num_mc == 0 {
        return Err(MigapError::InvalidNumMc);
    }
    scenario.check_conditionals()?;
    let r = ratios(scenario);
    let n_m = scenario.joint_pos.n_m();
    let flat: Vec<f64> = scenario.joint_pos.probs().iter().flatten().copied().collect();
    let pos_dist = WeightedIndex::new(&flat).map_err(|e| MigapError::InvalidJoint(e.to_string()))?;
    let neg_dists = r
        .cond_neg
        .iter()
        .enumerate()
        .map(|(x, c)| WeightedIndex::new(c).map_err(|_| MigapError::DegenerateConditional { x }).ok())
        .collect::<Vec<_>>();

    // Welford running mean and squared deviation.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..num_mc {
        let idx = pos_dist.sample(rng);
        let (x, e) = (idx / n_m, idx % n_m);
        let neg = neg_dists[x].as_ref().ok_or(MigapError::DegenerateConditional { x })?;
        let h1 = r.h_pos[x][e];
        let s: f64 = (0..n).map(|_| r.h_neg[x][neg.sample(rng)]).sum();
        let loss = (s / h1).ln_1p();
        let delta = loss - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (loss - mean);
    }
    let m = num_mc as f64;
    let var = if num_mc > 1 { m2 / (m - 1.0) } else { 0.0 };
    Ok(InfoNceEstimate {
        estimate: (n as f64).ln() - mean,
        stderr: (var / m).sqrt(),
        exact: false,
    })
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Number of negative-count compositions exact enumeration visits.
pub fn exact_terms(scenario: &GapScenario, n: usize) -> u64 {
    (0..scenario.joint_neg.n_x())
        .map(|x| {
            let support = scenario.joint_neg.conditional(x).iter().filter(|p| **p > 0.0).count() as u64;
            if support == 0 {
                0
            } else {
                binomial(n as u64 + support - 1, support - 1)
            }
        })
        .fold(0u64, u64::saturating_add)
}

/// Visits every way of splitting `n` draws over `k` categories.
fn for_each_composition(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(slot: usize, left: usize, counts: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if slot + 1 == counts.len() {
            counts[slot] = left;
            f(counts);
            return;
        }
        for c in 0..=left {
            counts[slot] = c;
            rec(slot + 1, left - c, counts, f);
        }
    }
    let mut counts = vec![0; k];
    rec(0, n, &mut counts, f);
}

/// `ln N − L_NCE` with the expectation over `(x, e⁺)` and the `N` i.i.d.
/// negatives taken exactly. The negatives enter only through the sum of
/// their ratios, so the enumeration runs over multinomial count vectors.
pub fn infonce_exact(scenario: &GapScenario, n: usize) -> Result<InfoNceEstimate, MigapError> {
    if n == 0 {
        return Err(MigapError::InvalidN);
    }
    scenario.check_conditionals()?;
    let terms = exact_terms(scenario, n);
    if terms > MAX_EXACT_TERMS {
        return Err(MigapError::ExactInfeasible {
            terms,
            limit: MAX_EXACT_TERMS,
        });
    }
    let r = ratios(scenario);
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, i| {
            *acc += (i as f64).ln();
            Some(*acc)
        }))
        .collect();

    let mut loss = 0.0;
    for (x, row) in scenario.joint_pos.probs().iter().enumerate() {
        if row.iter().all(|p| *p == 0.0) {
            continue;
        }
        let support: Vec<usize> = (0..r.cond_neg[x].len()).filter(|&m| r.cond_neg[x][m] > 0.0).collect();
        let ln_q: Vec<f64> = support.iter().map(|&m| r.cond_neg[x][m].ln()).collect();
        let h: Vec<f64> = support.iter().map(|&m| r.h_neg[x][m]).collect();
        let mut inner = vec![0.0; row.len()];
        for_each_composition(n, support.len(), &mut |counts| {
            let mut ln_p = ln_fact[n];
            let mut s = 0.0;
            for (j, &c) in counts.iter().enumerate() {
                ln_p += c as f64 * ln_q[j] - ln_fact[c];
                s += c as f64 * h[j];
            }
            let p = ln_p.exp();
            for (e, acc) in inner.iter_mut().enumerate() {
                if row[e] > 0.0 {
                    *acc += p * (s / r.h_pos[x][e]).ln_1p();
                }
            }
        });
        loss += row.iter().zip(&inner).map(|(p, v)| p * v).sum::<f64>();
    }
    Ok(InfoNceEstimate {
        estimate: (n as f64).ln() - loss,
        stderr: 0.0,
        exact: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMethod {
    /// Exact when the support and composition count are small, else sampled.
    #[default]
    Auto,
    MonteCarlo,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundOptions {
    pub num_mc: usize,
    pub seed: u64,
    pub method: EstimateMethod,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            num_mc: 20_000,
            seed: 0,
            method: EstimateMethod::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub scenario_id: usize,
    pub n: usize,
    pub delta_i: f64,
    pub estimate: f64,
    /// `ΔI − estimate`; the bound says this is non-negative.
    pub slack: f64,
    pub stderr: f64,
    pub exact: bool,
}

impl BoundRow {
    /// Whether the bound holds within `sigmas` standard errors (plus `tol`).
    pub fn holds(&self, sigmas: f64, tol: f64) -> bool {
        self.estimate <= self.delta_i + sigmas * self.stderr + tol
    }
}

/// Evaluates every `(scenario, N)` cell. Cells are independent and run in
/// parallel; each Monte-Carlo cell has its own RNG stream derived from
/// `seed`, the scenario index and `N`, so results do not depend on thread
/// scheduling.
pub fn bound_report(
    scenarios: &[GapScenario],
    ns: &[usize],
    options: &BoundOptions,
) -> Result<Vec<BoundRow>, MigapError> {
    let cells: Vec<(usize, usize)> = (0..scenarios.len())
        .flat_map(|s| ns.iter().map(move |&n| (s, n)))
        .collect();
    cells
        .par_iter()
        .map(|&(id, n)| {
            let s = &scenarios[id];
            let use_exact = match options.method {
                EstimateMethod::Exact => true,
                EstimateMethod::MonteCarlo => false,
                EstimateMethod::Auto => {
                    s.joint_neg.n_x() * s.joint_neg.n_m() <= MAX_EXACT_SUPPORT
                        && exact_terms(s, n) <= MAX_EXACT_TERMS
                }
            };
            let est = if use_exact {
                infonce_exact(s, n)?
            } else {
                let mut rng = SeededRng::seed_from_u64(options.seed);
                rng.set_stream(((id as u64) << 32) | n as u64);
                infonce_estimate_with(s, n, options.num_mc, &mut rng)?
            };
            let delta_i = mi_gap(s);
            Ok(BoundRow {
                scenario_id: id,
                n,
                delta_i,
                estimate: est.estimate,
                slack: delta_i - est.estimate,
                stderr: est.stderr,
                exact: est.exact,
            })
        })
        .collect()
}

pub fn write_bound_csv<W: Write>(mut out: W, rows: &[BoundRow]) -> Result<(), MigapError> {
    writeln!(out, "{BOUND_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| MigapError::Io(e.into());
    w.write_record(["scenario_id", "N", "delta_I", "estimate", "slack", "stderr"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.scenario_id.to_string(),
            r.n.to_string(),
            r.delta_i.to_string(),
            r.estimate.to_string(),
            r.slack.to_string(),
            r.stderr.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// `count` random scenarios from one seed, alternating small supports (exact
/// enumeration is cheap) with larger ones.
pub fn random_scenarios(count: usize, seed: u64) -> Vec<GapScenario> {
    let mut rng = SeededRng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            if i % 2 == 0 {
                GapScenario::random_small(format!("random-{i}"), &mut rng)
            } else {
                let n_x = rng.random_range(3..=8);
                let n_pos = rng.random_range(2..=8);
                let n_neg = rng.random_range(2..=8);
                GapScenario::random(format!("random-{i}"), n_x, n_pos, n_neg, &mut rng)
            }
        })
        .collect()
}

/// Closed-form cases followed by `random_scenarios(count, seed)`.
pub fn builtin_scenarios(count: usize, seed: u64) -> Vec<GapScenario> {
    let mut out = vec![
        GapScenario::deterministic_vs_independent(2),
        GapScenario::deterministic_vs_independent(4),
        GapScenario::independent_pair(3),
    ];
    out.extend(random_scenarios(count, seed));
    out
}
