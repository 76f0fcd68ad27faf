use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::expert::{check_input, linear};
use super::AdapterError;
use crate::autograd::{self as ag, Tensor};

/// Linear gate `G: n × d_in`; gate probabilities are `softmax(G·x)`.
#[derive(Debug, Clone)]
pub struct Router {
    gate: Tensor,
}

impl Router {
    pub fn init<R: Rng + ?Sized>(
        n_experts: usize,
        d_in: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self, AdapterError> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| AdapterError::InvalidConfig(format!("router init std {std}: {e}")))?;
        let data = (0..n_experts * d_in).map(|_| normal.sample(rng)).collect();
        Self::from_gate(Tensor::parameter(data, &[n_experts, d_in])?)
    }

    pub fn from_gate(gate: Tensor) -> Result<Self, AdapterError> {
        if gate.rank() != 2 || gate.shape()[0] < 2 {
            return Err(AdapterError::Shape(format!(
                "gate must be n × d_in with n ≥ 2, got {:?}",
                gate.shape()
            )));
        }
        Ok(Self { gate })
    }

    pub fn n_experts(&self) -> usize {
        self.gate.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.gate.shape()[1]
    }

    pub fn gate(&self) -> &Tensor {
        &self.gate
    }

    pub fn gate_mut(&mut self) -> &mut Tensor {
        &mut self.gate
    }

    /// `G·x` for a vector, or one row of logits per token for a batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, AdapterError> {
        linear(x, &self.gate)
    }

    pub fn gate_probs(&self, x: &Tensor) -> Result<Tensor, AdapterError> {
        let logits = self.logits(x)?;
        let axis = logits.rank() - 1;
        Ok(ag::softmax(&logits, axis)?)
    }
}

/// Top-k selection for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Selected experts, highest gate probability first (ties: lower index).
    pub topk_indices: Vec<usize>,
    /// Selected probabilities divided by their sum, aligned with `topk_indices`.
    pub renorm_weights: Vec<f64>,
    pub gate_probs: Vec<f64>,
}

impl RoutingDecision {
    /// Selects the `k` largest of `gate_probs`. `k = n` is accepted and yields
    /// the full softmax weighting.
    pub fn from_gate_probs(gate_probs: Vec<f64>, k: usize) -> Result<Self, AdapterError> {
        let n = gate_probs.len();
        if k == 0 || k > n {
            return Err(AdapterError::InvalidTopK { k, n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| gate_probs[j].total_cmp(&gate_probs[i]).then(i.cmp(&j)));
        order.truncate(k);
        let total: f64 = order.iter().map(|&i| gate_probs[i]).sum();
        let renorm_weights = order.iter().map(|&i| gate_probs[i] / total).collect();
        Ok(Self {
            topk_indices: order,
            renorm_weights,
            gate_probs,
        })
    }

    pub fn from_logits(logits: &[f64], k: usize) -> Result<Self, AdapterError> {
        let probs = ag::softmax(&Tensor::vector(logits.to_vec()), 0)?;
        Self::from_gate_probs(probs.data().to_vec(), k)
    }

    pub fn k(&self) -> usize {
        self.topk_indices.len()
    }

    pub fn n_experts(&self) -> usize {
        self.gate_probs.len()
    }

    pub fn is_activated(&self, expert: usize) -> bool {
        self.topk_indices.contains(&expert)
    }

    /// Renormalized weight of `expert`; zero when it is not selected.
    pub fn weight_of(&self, expert: usize) -> f64 {
        self.topk_indices
            .iter()
            .position(|&i| i == expert)
            .map_or(0.0, |p| self.renorm_weights[p])
    }

    /// Experts outside the top-k, in index order.
    pub fn inactivated(&self) -> Vec<usize> {
        (0..self.n_experts()).filter(|i| !self.is_activated(*i)).collect()
    }

    /// Gap between the k-th and (k+1)-th largest gate probabilities; infinite
    /// when every expert is selected.
    pub fn tie_margin(&self) -> f64 {
        let mut sorted = self.gate_probs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        match sorted.get(self.k()) {
            Some(next) => sorted[self.k() - 1] - next,
            None => f64::INFINITY,
        }
    }
}

/// Routes one input vector: softmax over `G·x`, keep the `k` largest, renormalize.
pub fn route(router: &Router, x: &Tensor, k: usize) -> Result<RoutingDecision, AdapterError> {
    if x.rank() != 1 {
        return Err(AdapterError::InputDimension {
            expected: router.d_in(),
            shape: x.shape().to_vec(),
        });
    }
    check_input(x, router.d_in())?;
    RoutingDecision::from_gate_probs(router.gate_probs(x)?.data().to_vec(), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_logits_pick_lowest_indices() {
        let d = RoutingDecision::from_logits(&[0.7; 4], 2).unwrap();
        assert_eq!(d.topk_indices, vec![0, 1]);
        assert_eq!(d.renorm_weights, vec![0.5, 0.5]);
        assert_eq!(d.inactivated(), vec![2, 3]);
    }

    #[test]
    fn hand_computed_renormalization() {
        let d = RoutingDecision::from_logits(&[2.0, 1.0, 0.5, 0.1], 2).unwrap();
        assert_eq!(d.topk_indices, vec![0, 1]);
        let expected: Vec<f64> = [0.5745, 0.2114, 0.1282, 0.0859].to_vec();
        for (p, e) in d.gate_probs.iter().zip(&expected) {
            assert!((p - e).abs() < 1e-4);
        }
        // e^2 / (e^2 + e^1) and e^1 / (e^2 + e^1)
        let w0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((d.renorm_weights[0] - w0).abs() < 1e-15);
        assert!((d.renorm_weights[0] - 0.731).abs() < 1e-3);
        assert!((d.renorm_weights[1] - 0.269).abs() < 1e-3);
    }

    #[test]
    fn k_out_of_range() {
        assert!(matches!(
            RoutingDecision::from_logits(&[0.0; 4], 0),
            Err(AdapterError::InvalidTopK { k: 0, n: 4 })
        ));
        assert!(RoutingDecision::from_logits(&[0.0; 4], 5).is_err());
        let full = RoutingDecision::from_logits(&[0.3, 0.1, 0.2, 0.0], 4).unwrap();
        assert!(full.tie_margin().is_infinite());
    }

    #[test]
    fn route_uses_gate_matrix() {
        let gate = Tensor::parameter(vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0], &[3, 2]).unwrap();
        let router = Router::from_gate(gate).unwrap();
        let d = route(&router, &Tensor::vector(vec![0.2, 1.5]), 1).unwrap();
        assert_eq!(d.topk_indices, vec![1]);
        assert_eq!(d.renorm_weights, vec![1.0]);
        assert!(route(&router, &Tensor::vector(vec![0.2]), 1).is_err());
    }

    proptest! {
        #[test]
        fn decision_invariants(
            logits in proptest::collection::vec(-8.0f64..8.0, 2..9),
            k_frac in 0.0f64..1.0,
            shift in -50.0f64..50.0,
        ) {
            let n = logits.len();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let d = RoutingDecision::from_logits(&logits, k).unwrap();
            prop_assert!((d.renorm_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(d.renorm_weights.iter().all(|w| *w > 0.0 && *w <= 1.0));
            prop_assert!((d.gate_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut seen = d.topk_indices.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), k);
            let min_selected = d.topk_indices.iter().map(|&i| d.gate_probs[i]).fold(f64::INFINITY, f64::min);
            for i in d.inactivated() {
                prop_assert!(d.gate_probs[i] <= min_selected);
            }
            if d.tie_margin() > 1e-9 {
                let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
                let s = RoutingDecision::from_logits(&shifted, k).unwrap();
                prop_assert_eq!(&s.topk_indices, &d.topk_indices);
                for (a, b) in s.renorm_weights.iter().zip(&d.renorm_weights) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
