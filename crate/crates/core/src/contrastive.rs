//! Contrastive loss separating activated from inactivated expert representations.
//!
//! For a query `q` with positive keys `P` and negative keys `N` (all unit
//! vectors) the per-query loss is
//!
//! ```text
//! -ln( Σ_P exp(q·p/τ) / (Σ_P exp(q·p/τ) + Σ_N exp(q·n/τ) + ε) )
//! ```
//!
//! evaluated as `lse([s_pos, s_neg, ln ε]) − lse(s_pos)` so large `1/τ` never
//! overflows.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{ExpertOutputs, MoeOutput, RoutingDecision};
use crate::autograd::{self as ag, Tensor, TensorError};

/// Representations with a norm at or below this have no direction and are
/// left out of key sets.
pub const MIN_REPR_NORM: f64 = 1e-12;

const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContrastiveError {
    #[error("contrastive loss needs at least one positive key")]
    EmptyPositives,
    #[error("contrastive loss needs at least one negative key")]
    EmptyNegatives,
    #[error("vector norm {norm} is not 1 within {UNIT_NORM_TOL}")]
    NotUnitNorm { norm: f64 },
    #[error("key dimension {got} does not match anchor dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("epsilon must be non-negative and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("lambda must be non-negative and finite, got {0}")]
    InvalidLambda(f64),
    #[error("need n > k >= 2 (got n = {n}, k = {k})")]
    InvalidTopK { k: usize, n: usize },
    #[error("contrastive loss needs every expert's output (run the layer with need_all_experts)")]
    MissingExpertOutputs,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which queries contribute per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// One uniformly drawn activated expert is the anchor; the other
    /// activated experts are positives.
    #[default]
    SampledAnchor,
    /// Every activated expert acts as query in turn; the k terms are summed.
    AllQueries,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub epsilon: f64,
    pub variant: LossVariant,
    /// Detach negative keys so no gradient reaches inactivated experts.
    pub stop_grad_negatives: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            epsilon: 1e-3,
            variant: LossVariant::SampledAnchor,
            stop_grad_negatives: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        check_temperature(self.temperature)?;
        check_epsilon(self.epsilon)
    }
}

fn check_temperature(tau: f64) -> Result<(), ContrastiveError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ContrastiveError::InvalidTemperature(tau))
    }
}

fn check_epsilon(eps: f64) -> Result<(), ContrastiveError> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(ContrastiveError::InvalidEpsilon(eps))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `exp(q·e / τ)`.
pub fn score(q: &[f64], e: &[f64], tau: f64) -> f64 {
    let d: f64 = q.iter().zip(e).map(|(a, b)| a * b).sum();
    (d / tau).exp()
}

/// Anchor, positive and negative keys for one query. All vectors are unit
/// norm.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    anchor: Tensor,
    positives: Vec<Tensor>,
    negatives: Vec<Tensor>,
    temperature: f64,
    epsilon: f64,
}

impl ContrastiveBatch {
    /// Takes already-normalized vectors; fails if any norm is off by more
    /// than `1e-9`.
    pub fn new(
        anchor: Tensor,
        positives: Vec<Tensor>,
        negatives: Vec<Tensor>,
        temperature: f64,
        epsilon: f64,
    ) -> Result<Self, ContrastiveError> {
        for v in std::iter::once(&anchor).chain(&positives).chain(&negatives) {
            let n = norm(v.data());
            if v.rank() != 1 || (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(ContrastiveError::NotUnitNorm { norm: n });
            }
        }
        Self::checked(anchor, positives, negatives, temperature, epsilon)
    }

    /// Normalizes every vector inside the graph, so gradients flow back to
    /// the raw representations.
    pub fn normalized(
        anchor: &Tensor,
        positives: &[Tensor],
        negatives: &[Tensor],
        temperature: f64,
        epsilon: f64,
    ) -> Result<Self, ContrastiveError> {
        let unit = |v: &[Tensor]| -> Result<Vec<Tensor>, TensorError> { v.iter().map(ag::l2_normalize).collect() };
        Self::checked(
            ag::l2_normalize(anchor)?,
            unit(positives)?,
            unit(negatives)?,
            temperature,
            epsilon,
        )
    }

    fn checked(
        anchor: Tensor,
        positives: Vec<Tensor>,
        negatives: Vec<Tensor>,
        temperature: f64,
        epsilon: f64,
    ) -> Result<Self, ContrastiveError> {
        check_temperature(temperature)?;
        check_epsilon(epsilon)?;
        if positives.is_empty() {
            return Err(ContrastiveError::EmptyPositives);
        }
        if negatives.is_empty() {
            return Err(ContrastiveError::EmptyNegatives);
        }
        let d = anchor.numel();
        for v in positives.iter().chain(&negatives) {
            if v.numel() != d {
                return Err(ContrastiveError::Dimension {
                    expected: d,
                    got: v.numel(),
                });
            }
        }
        Ok(Self {
            anchor,
            positives,
            negatives,
            temperature,
            epsilon,
        })
    }

    pub fn anchor(&self) -> &Tensor {
        &self.anchor
    }

    pub fn positives(&self) -> &[Tensor] {
        &self.positives
    }

    pub fn negatives(&self) -> &[Tensor] {
        &self.negatives
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Single-query loss for a batch. Differentiable with respect to the anchor
/// and every key.
pub fn contrastive_loss_single(batch: &ContrastiveBatch) -> Result<Tensor, ContrastiveError> {
    let inv_tau = 1.0 / batch.temperature;
    let sims = |keys: &[Tensor]| -> Result<Vec<Tensor>, TensorError> {
        keys.iter()
            .map(|k| Ok(ag::scale(&ag::dot(&batch.anchor, k)?, inv_tau)))
            .collect()
    };
    let s_pos = sims(&batch.positives)?;
    let mut all = s_pos.clone();
    all.extend(sims(&batch.negatives)?);
    if batch.epsilon > 0.0 {
        all.push(Tensor::scalar(batch.epsilon.ln()));
    }
    let denom = ag::logsumexp(&ag::concat(&all)?)?;
    let numer = ag::logsumexp(&ag::concat(&s_pos)?)?;
    Ok(ag::sub(&denom, &numer)?)
}

fn check_topk(n: usize, topk: &[usize]) -> Result<(), ContrastiveError> {
    let k = topk.len();
    if k < 2 || k >= n || topk.iter().any(|&i| i >= n) {
        return Err(ContrastiveError::InvalidTopK { k, n });
    }
    Ok(())
}

fn split_keys(reprs: &[Tensor], topk: &[usize], query: usize, stop_grad: bool) -> (Vec<Tensor>, Vec<Tensor>) {
    let positives = topk
        .iter()
        .filter(|&&i| i != query)
        .map(|&i| reprs[i].clone())
        .collect();
    let negatives = (0..reprs.len())
        .filter(|i| !topk.contains(i))
        .map(|i| if stop_grad { reprs[i].detach() } else { reprs[i].clone() })
        .collect();
    (positives, negatives)
}

/// Sum over every activated expert as query of the single-query loss, with
/// the remaining activated experts as positives and all inactivated experts
/// as negatives. `reprs` holds one raw representation per expert.
pub fn contrastive_loss_sumk(
    reprs: &[Tensor],
    topk: &[usize],
    temperature: f64,
    epsilon: f64,
) -> Result<Tensor, ContrastiveError> {
    check_topk(reprs.len(), topk)?;
    let mut total: Option<Tensor> = None;
    for &q in topk {
        let (pos, neg) = split_keys(reprs, topk, q, false);
        let batch = ContrastiveBatch::normalized(&reprs[q], &pos, &neg, temperature, epsilon)?;
        let term = contrastive_loss_single(&batch)?;
        total = Some(match total {
            Some(t) => ag::add(&t, &term)?,
            None => term,
        });
    }
    Ok(total.expect("k >= 2"))
}

/// Single-query loss with the anchor drawn uniformly from `topk`.
pub fn sampled_anchor_loss<R: Rng + ?Sized>(
    reprs: &[Tensor],
    topk: &[usize],
    temperature: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<Tensor, ContrastiveError> {
    check_topk(reprs.len(), topk)?;
    let q = topk[rng.random_range(0..topk.len())];
    let (pos, neg) = split_keys(reprs, topk, q, false);
    let batch = ContrastiveBatch::normalized(&reprs[q], &pos, &neg, temperature, epsilon)?;
    contrastive_loss_single(&batch)
}

/// Per-token loss under `config`, or `None` when the token has no usable
/// query, positive or negative. Representations with norm at or below
/// [`MIN_REPR_NORM`] are dropped from the key sets and cannot be queries.
///
/// The sampled variant draws its anchor before any filtering, so the number
/// of RNG draws per token is fixed.
pub fn token_loss<R: Rng + ?Sized>(
    reprs: &[Tensor],
    decision: &RoutingDecision,
    config: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Option<Tensor>, ContrastiveError> {
    let topk = &decision.topk_indices;
    check_topk(reprs.len(), topk)?;
    let usable: Vec<bool> = reprs.iter().map(|r| norm(r.data()) > MIN_REPR_NORM).collect();
    let queries: Vec<usize> = match config.variant {
        LossVariant::SampledAnchor => vec![topk[rng.random_range(0..topk.len())]],
        LossVariant::AllQueries => topk.clone(),
    };
    let mut total: Option<Tensor> = None;
    for q in queries {
        if !usable[q] {
            continue;
        }
        let (pos, neg) = split_keys(reprs, topk, q, config.stop_grad_negatives);
        let keep = |keys: Vec<Tensor>| -> Vec<Tensor> {
            keys.into_iter().filter(|k| norm(k.data()) > MIN_REPR_NORM).collect()
        };
        let (pos, neg) = (keep(pos), keep(neg));
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let batch = ContrastiveBatch::normalized(&reprs[q], &pos, &neg, config.temperature, config.epsilon)?;
        let term = contrastive_loss_single(&batch)?;
        total = Some(match total {
            Some(t) => ag::add(&t, &term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Mean of [`token_loss`] over the tokens of one layer's forward pass.
/// Tokens are visited in order, so anchor draws are reproducible. Returns
/// `None` when no token contributes.
pub fn layer_loss<R: Rng + ?Sized>(
    output: &MoeOutput,
    config: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Option<Tensor>, ContrastiveError> {
    let ExpertOutputs::All(all) = &output.experts else {
        return Err(ContrastiveError::MissingExpertOutputs);
    };
    let mut terms = Vec::new();
    for (t, decision) in output.decisions.iter().enumerate() {
        let reprs = all
            .iter()
            .map(|e| ag::row(e, t))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(term) = token_loss(&reprs, decision, config, rng)? {
            terms.push(ag::reshape(&term, &[1])?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(ag::mean(&ag::concat(&terms)?)?))
}

/// Cross-entropy, contrastive term and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub con: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `total = ce + λ·con`.
pub fn total_loss(ce: f64, con: f64, lambda: f64) -> Result<LossBreakdown, ContrastiveError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ContrastiveError::InvalidLambda(lambda));
    }
    Ok(LossBreakdown {
        ce,
        con,
        total: ce + lambda * con,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_gradients, GradCheck};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Tensor {
        let n = norm(v);
        Tensor::vector(v.iter().map(|x| x / n).collect())
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0], 0.3), 1.0);
        assert!((score(&[0.6, 0.8], &[0.6, 0.8], 1.0) - std::f64::consts::E).abs() < 1e-12);
        let q = [0.5, (0.75f64).sqrt()];
        let e = [1.0, 0.0];
        assert!((score(&q, &e, 0.07) - (0.5f64 / 0.07).exp()).abs() < 1e-9);
    }

    #[test]
    fn uniform_similarity_gives_ln3() {
        let v = unit(&[1.0, 2.0, -0.5]);
        let b = ContrastiveBatch::new(v.clone(), vec![v.clone()], vec![v.clone(), v], 0.07, 0.0).unwrap();
        let loss = contrastive_loss_single(&b).unwrap().item();
        assert!((loss - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn hand_computed_case() {
        let q = Tensor::vector(vec![1.0, 0.0]);
        let p = Tensor::vector(vec![1.0, 0.0]);
        let n = Tensor::vector(vec![-1.0, 0.0]);
        let b = ContrastiveBatch::new(q, vec![p], vec![n.clone(), n], 1.0, 0.0).unwrap();
        let loss = contrastive_loss_single(&b).unwrap().item();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0 / e)).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.239_544_766).abs() < 1e-9);
    }

    #[test]
    fn epsilon_keeps_loss_positive_at_extreme_similarity() {
        let q = Tensor::vector(vec![1.0, 0.0]);
        let n = Tensor::vector(vec![-1.0, 0.0]);
        let b = ContrastiveBatch::new(q.clone(), vec![q], vec![n], 1e-3, 1e-3).unwrap();
        let loss = contrastive_loss_single(&b).unwrap().item();
        // ln(1 + ε·e^-1000 + e^-2000) underflows to zero but must stay finite.
        assert!(loss >= 0.0 && loss.is_finite());
        let b = ContrastiveBatch::new(
            Tensor::vector(vec![1.0, 0.0]),
            vec![Tensor::vector(vec![1.0, 0.0])],
            vec![Tensor::vector(vec![-1.0, 0.0])],
            1.0,
            1e-3,
        )
        .unwrap();
        let loss = contrastive_loss_single(&b).unwrap().item();
        let e = std::f64::consts::E;
        let bound = -(e / (e + 1e-3)).ln();
        assert!(loss > bound && bound > 0.0);
    }

    #[test]
    fn contract_errors() {
        let v = unit(&[1.0, 1.0]);
        assert_eq!(
            ContrastiveBatch::new(v.clone(), vec![], vec![v.clone()], 1.0, 1e-3).unwrap_err(),
            ContrastiveError::EmptyPositives
        );
        assert_eq!(
            ContrastiveBatch::new(v.clone(), vec![v.clone()], vec![], 1.0, 1e-3).unwrap_err(),
            ContrastiveError::EmptyNegatives
        );
        assert!(matches!(
            ContrastiveBatch::new(Tensor::vector(vec![1.0, 1.0]), vec![v.clone()], vec![v.clone()], 1.0, 1e-3),
            Err(ContrastiveError::NotUnitNorm { .. })
        ));
        assert!(ContrastiveBatch::new(v.clone(), vec![v.clone()], vec![v.clone()], 0.0, 1e-3).is_err());
        let reprs = vec![v.clone(), v.clone(), v];
        assert!(matches!(
            contrastive_loss_sumk(&reprs, &[0], 1.0, 1e-3),
            Err(ContrastiveError::InvalidTopK { k: 1, n: 3 })
        ));
        assert!(contrastive_loss_sumk(&reprs, &[0, 1, 2], 1.0, 1e-3).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(1.0, 0.5, 0.01).unwrap();
        assert!((b.total - 1.005).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 3.0, 0.0).unwrap().total, 0.7);
        assert!(matches!(total_loss(1.0, 1.0, -0.1), Err(ContrastiveError::InvalidLambda(_))));
    }

    #[test]
    fn sumk_symmetric_pair_doubles_single_term() {
        // Two activated experts placed symmetrically about the negatives.
        let a = Tensor::vector(vec![1.0, 1.0, 0.0]);
        let b = Tensor::vector(vec![1.0, -1.0, 0.0]);
        let n1 = Tensor::vector(vec![0.0, 0.0, 1.0]);
        let n2 = Tensor::vector(vec![-1.0, 0.0, 0.0]);
        let reprs = vec![a.clone(), n1.clone(), b.clone(), n2.clone()];
        let total = contrastive_loss_sumk(&reprs, &[0, 2], 0.5, 1e-3).unwrap().item();
        let single = contrastive_loss_single(
            &ContrastiveBatch::normalized(&a, &[b], &[n1, n2], 0.5, 1e-3).unwrap(),
        )
        .unwrap()
        .item();
        assert!((total - 2.0 * single).abs() < 1e-12);
    }

    #[test]
    fn sumk_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let raw: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let reprs: Vec<Tensor> = raw.iter().map(|v| Tensor::vector(v.clone())).collect();
            let topk = [2, 0];
            let (tau, eps) = (0.3, 1e-3);
            let got = contrastive_loss_sumk(&reprs, &topk, tau, eps).unwrap().item();

            let units: Vec<Vec<f64>> = raw.iter().map(|v| v.iter().map(|x| x / norm(v)).collect()).collect();
            let mut expected = 0.0;
            for &q in &topk {
                let mut pos = 0.0;
                let mut all = eps;
                for j in 0..4 {
                    if j == q {
                        continue;
                    }
                    let s = score(&units[q], &units[j], tau);
                    all += s;
                    if topk.contains(&j) {
                        pos += s;
                    }
                }
                expected -= (pos / all).ln();
            }
            assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }

    #[test]
    fn gradients_reach_every_representation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reprs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::vector((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let sumk = check_gradients(&reprs, GradCheck::default(), |r| {
            contrastive_loss_sumk(r, &[1, 3], 0.2, 1e-3).map_err(|e| match e {
                ContrastiveError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        assert!(sumk.max_rel_error < 1e-4, "{}", sumk.max_rel_error);
        for g in &sumk.analytic {
            assert!(g.iter().any(|v| v.abs() > 1e-8));
        }
        let single = check_gradients(&reprs, GradCheck::default(), |r| {
            let b = ContrastiveBatch::normalized(&r[0], &r[1..2], &r[2..], 0.2, 1e-3).unwrap();
            contrastive_loss_single(&b).map_err(|_| unreachable!())
        })
        .unwrap();
        assert!(single.max_rel_error < 1e-4, "{}", single.max_rel_error);
    }

    #[test]
    fn token_loss_skips_zero_representations() {
        let cfg = ContrastiveConfig::default();
        let d = RoutingDecision::from_gate_probs(vec![0.4, 0.3, 0.2, 0.1], 2).unwrap();
        let zero = Tensor::zeros(&[3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all_zero = vec![zero.clone(); 4];
        assert!(token_loss(&all_zero, &d, &cfg, &mut rng).unwrap().is_none());

        let live = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let reprs = vec![live.clone(), live.clone(), zero, Tensor::vector(vec![0.0, 1.0, 0.0])];
        let loss = token_loss(&reprs, &d, &cfg, &mut rng).unwrap().unwrap();
        assert!(loss.item() > 0.0);
    }

    #[test]
    fn stop_grad_blocks_negative_gradient() {
        let d = RoutingDecision::from_gate_probs(vec![0.4, 0.3, 0.2, 0.1], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reprs: Vec<Tensor> = (0..4)
            .map(|i| Tensor::parameter(vec![1.0, i as f64, 0.5], &[3]).unwrap())
            .collect();
        let cfg = ContrastiveConfig { stop_grad_negatives: true, ..ContrastiveConfig::default() };
        token_loss(&reprs, &d, &cfg, &mut rng).unwrap().unwrap().backward().unwrap();
        assert!(reprs[2].grad().is_none() && reprs[3].grad().is_none());
        assert!(reprs[0].grad().is_some());
    }

    fn random_unit(dim: usize, seed: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = seed.iter().take(dim).copied().collect();
        let n = norm(&v);
        v.iter().map(|x| x / n).collect()
    }

    fn batch_from(q: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64, eps: f64) -> f64 {
        let t = |v: &Vec<f64>| Tensor::vector(v.clone());
        let b = ContrastiveBatch::new(
            Tensor::vector(q.to_vec()),
            pos.iter().map(t).collect(),
            neg.iter().map(t).collect(),
            tau,
            eps,
        )
        .unwrap();
        contrastive_loss_single(&b).unwrap().item()
    }

    proptest! {
        #[test]
        fn positive_and_permutation_invariant(
            raw in proptest::collection::vec(proptest::collection::vec(0.1f64..1.0, 4), 5),
            signs in proptest::collection::vec(proptest::bool::ANY, 20),
            n_pos in 1usize..3,
            tau in 0.05f64..2.0,
            rot in 0usize..4,
        ) {
            let vecs: Vec<Vec<f64>> = raw
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let s: Vec<f64> = v.iter().enumerate()
                        .map(|(j, x)| if signs[(i * 4 + j) % 20] { *x } else { -x })
                        .collect();
                    random_unit(4, &s)
                })
                .collect();
            let q = &vecs[0];
            let pos = vecs[1..1 + n_pos].to_vec();
            let neg = vecs[1 + n_pos..].to_vec();
            let base = batch_from(q, &pos, &neg, tau, 1e-3);
            prop_assert!(base > 0.0);
            let mut pos_r = pos.clone();
            pos_r.rotate_left(rot % pos.len());
            pos_r.reverse();
            let mut neg_r = neg.clone();
            neg_r.rotate_left(rot % neg.len());
            neg_r.reverse();
            let permuted = batch_from(q, &pos_r, &neg_r, tau, 1e-3);
            prop_assert!((base - permuted).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn monotone_in_similarities(
            angles in proptest::collection::vec(0.2f64..2.9, 3),
            delta in 0.01f64..0.1,
            tau in 0.1f64..1.0,
        ) {
            // Anchor fixed at angle 0 on the unit circle; keys at given angles.
            let at = |a: f64| vec![a.cos(), a.sin()];
            let q = at(0.0);
            let l0 = batch_from(&q, &[at(angles[0])], &[at(angles[1]), at(angles[2])], tau, 1e-3);
            let closer_pos = batch_from(&q, &[at(angles[0] - delta)], &[at(angles[1]), at(angles[2])], tau, 1e-3);
            let closer_neg = batch_from(&q, &[at(angles[0])], &[at(angles[1] - delta), at(angles[2])], tau, 1e-3);
            prop_assert!(closer_pos < l0);
            prop_assert!(closer_neg > l0);
        }

        #[test]
        fn scale_invariant(
            raw in proptest::collection::vec(-1.0f64..1.0, 16),
            c in 0.01f64..100.0,
        ) {
            let reprs: Vec<Tensor> = raw.chunks(4).map(|v| Tensor::vector(v.to_vec())).collect();
            prop_assume!(reprs.iter().all(|r| norm(r.data()) > 1e-3));
            let scaled: Vec<Tensor> = reprs.iter().map(|r| ag::scale(r, c)).collect();
            let a = contrastive_loss_sumk(&reprs, &[0, 1], 0.07, 1e-3).unwrap().item();
            let b = contrastive_loss_sumk(&scaled, &[0, 1], 0.07, 1e-3).unwrap().item();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }
}
