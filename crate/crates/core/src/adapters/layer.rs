use rand::Rng;
use serde::{Deserialize, Serialize};

use super::expert::{check_input, linear, LoraExpert, LoraScaling};
use super::router::{Router, RoutingDecision};
use super::AdapterError;
use crate::autograd::{self as ag, Tensor};
use crate::SeededRng;

/// Shape and initialization knobs for one MoE-LoRA layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MoeLayerConfig {
    pub n_experts: usize,
    pub k: usize,
    pub rank: usize,
    pub alpha: f64,
    pub scaling: LoraScaling,
    pub dropout: f64,
    pub router_init_std: f64,
}

impl Default for MoeLayerConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            k: 2,
            rank: 16,
            alpha: 32.0,
            scaling: LoraScaling::AlphaOverRank,
            dropout: 0.05,
            router_init_std: 0.02,
        }
    }
}

/// Frozen weight `W₀` plus `n` LoRA experts mixed by a top-k router.
#[derive(Debug, Clone)]
pub struct MoeLoraLayer {
    w0: Tensor,
    experts: Vec<LoraExpert>,
    router: Router,
    k: usize,
    dropout: f64,
}

/// Per-call options for [`MoeLoraLayer::forward`].
pub struct ForwardMode<'a> {
    /// Evaluate every expert on every token so inactivated experts can act as
    /// contrastive negatives. Costs `n / k` times the sparse expert compute.
    pub need_all_experts: bool,
    /// Training-mode dropout on the expert branch input. `None` disables it.
    pub dropout_rng: Option<&'a mut SeededRng>,
}

impl ForwardMode<'_> {
    pub fn eval(need_all_experts: bool) -> Self {
        ForwardMode {
            need_all_experts,
            dropout_rng: None,
        }
    }
}

/// Tokens routed to one expert and its output on them.
#[derive(Debug, Clone)]
pub struct RoutedOutput {
    pub tokens: Vec<usize>,
    /// `[tokens.len(), d_out]`; `None` when no token selected the expert.
    pub output: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub enum ExpertOutputs {
    /// `E_i(x)` for every expert over the whole batch, each `[B, d_out]`.
    All(Vec<Tensor>),
    /// Only the (expert, token) pairs selected by the router.
    Routed(Vec<RoutedOutput>),
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// `[B, d_out]`
    pub y: Tensor,
    pub decisions: Vec<RoutingDecision>,
    pub experts: ExpertOutputs,
}

impl MoeLoraLayer {
    pub fn new(
        w0: Tensor,
        experts: Vec<LoraExpert>,
        router: Router,
        k: usize,
        dropout: f64,
    ) -> Result<Self, AdapterError> {
        let (d_out, d_in) = match w0.shape() {
            [o, i] => (*o, *i),
            _ => return Err(AdapterError::Shape(format!("W0 must be rank 2, got {:?}", w0.shape()))),
        };
        if w0.requires_grad() {
            return Err(AdapterError::InvalidConfig("W0 must be a frozen constant".into()));
        }
        let n = experts.len();
        if router.n_experts() != n {
            return Err(AdapterError::Shape(format!(
                "router has {} rows for {n} experts",
                router.n_experts()
            )));
        }
        if router.d_in() != d_in {
            return Err(AdapterError::Shape(format!(
                "router width {} does not match d_in {d_in}",
                router.d_in()
            )));
        }
        if k == 0 || k >= n {
            return Err(AdapterError::InvalidTopK { k, n });
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(AdapterError::InvalidConfig(format!("dropout {dropout} not in [0, 1)")));
        }
        for (i, e) in experts.iter().enumerate() {
            if e.d_in() != d_in || e.d_out() != d_out {
                return Err(AdapterError::Shape(format!(
                    "expert {i} is {}x{}, layer is {d_out}x{d_in}",
                    e.d_out(),
                    e.d_in()
                )));
            }
        }
        Ok(Self {
            w0,
            experts,
            router,
            k,
            dropout,
        })
    }

    /// Fresh adapters around a frozen `W₀` (`d_out × d_in`).
    pub fn init<R: Rng + ?Sized>(
        w0: Tensor,
        config: &MoeLayerConfig,
        rng: &mut R,
    ) -> Result<Self, AdapterError> {
        let (d_out, d_in) = match w0.shape() {
            [o, i] => (*o, *i),
            _ => return Err(AdapterError::Shape(format!("W0 must be rank 2, got {:?}", w0.shape()))),
        };
        let experts = (0..config.n_experts)
            .map(|_| LoraExpert::init(d_in, d_out, config.rank, config.alpha, config.scaling, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let router = Router::init(config.n_experts, d_in, config.router_init_std, rng)?;
        Self::new(w0, experts, router, config.k, config.dropout)
    }

    pub fn d_in(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn experts(&self) -> &[LoraExpert] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [LoraExpert] {
        &mut self.experts
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut Router {
        &mut self.router
    }

    /// Trainable tensors: every expert's `A`, `B`, then the gate.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.experts.iter().flat_map(|e| e.parameters()).collect();
        out.push(self.router.gate());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .experts
            .iter_mut()
            .flat_map(|e| e.parameters_mut())
            .collect();
        out.push(self.router.gate_mut());
        out
    }

    /// `W₀·x` only.
    pub fn base_forward(&self, x: &Tensor) -> Result<Tensor, AdapterError> {
        linear(x, &self.w0)
    }

    fn expert_input(&self, x: &Tensor, rng: Option<&mut SeededRng>) -> Result<Tensor, AdapterError> {
        match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout);
                let mask = (0..x.numel())
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                    .collect();
                Ok(ag::mul(x, &Tensor::new(mask, x.shape())?)?)
            }
            _ => Ok(x.clone()),
        }
    }

    /// Batched forward over `x: [B, d_in]`:
    /// `y = W₀·x + Σ_{i ∈ top-k} ĝ_i(x)·E_i(x)` per token.
    pub fn forward(&self, x: &Tensor, mode: ForwardMode<'_>) -> Result<MoeOutput, AdapterError> {
        if x.rank() != 2 {
            return Err(AdapterError::InputDimension {
                expected: self.d_in(),
                shape: x.shape().to_vec(),
            });
        }
        check_input(x, self.d_in())?;
        let tokens = x.shape()[0];
        let n = self.n_experts();

        let probs = self.router.gate_probs(x)?;
        let decisions = probs
            .to_rows()
            .into_iter()
            .map(|p| RoutingDecision::from_gate_probs(p, self.k))
            .collect::<Result<Vec<_>, _>>()?;
        let selections: Vec<Vec<usize>> = decisions.iter().map(|d| d.topk_indices.clone()).collect();
        let weights = ag::topk_renormalize(&probs, &selections)?;

        let mut routed_tokens: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (t, sel) in selections.iter().enumerate() {
            for &i in sel {
                routed_tokens[i].push(t);
            }
        }

        let x_expert = self.expert_input(x, mode.dropout_rng)?;
        let mut y = self.base_forward(x)?;
        let mut all = Vec::new();
        let mut routed = Vec::new();
        for (i, expert) in self.experts.iter().enumerate() {
            let toks = &routed_tokens[i];
            let selected = if mode.need_all_experts {
                let full = expert.forward(&x_expert)?;
                let picked = if toks.is_empty() {
                    None
                } else {
                    Some(ag::gather_rows(&full, toks)?)
                };
                all.push(full);
                picked
            } else if toks.is_empty() {
                None
            } else {
                Some(expert.forward(&ag::gather_rows(&x_expert, toks)?)?)
            };
            if let Some(out) = &selected {
                let w = ag::gather_rows(&ag::column(&weights, i)?, toks)?;
                let contrib = ag::scatter_rows(&ag::scale_rows(out, &w)?, toks, tokens)?;
                y = ag::add(&y, &contrib)?;
            }
            if !mode.need_all_experts {
                routed.push(RoutedOutput {
                    tokens: toks.clone(),
                    output: selected,
                });
            }
        }

        let experts = if mode.need_all_experts {
            ExpertOutputs::All(all)
        } else {
            ExpertOutputs::Routed(routed)
        };
        Ok(MoeOutput {
            y,
            decisions,
            experts,
        })
    }

    /// Dense mixture with the full softmax weights (every expert active).
    /// Equivalent to top-k routing with `k = n`.
    pub fn soft_forward(&self, x: &Tensor) -> Result<Tensor, AdapterError> {
        check_input(x, self.d_in())?;
        let batch = if x.rank() == 1 {
            ag::reshape(x, &[1, self.d_in()])?
        } else {
            x.clone()
        };
        let probs = self.router.gate_probs(&batch)?;
        let mut y = self.base_forward(&batch)?;
        for (i, expert) in self.experts.iter().enumerate() {
            let w = ag::column(&probs, i)?;
            y = ag::add(&y, &ag::scale_rows(&expert.forward(&batch)?, &w)?)?;
        }
        if x.rank() == 1 {
            y = ag::reshape(&y, &[self.d_out()])?;
        }
        Ok(y)
    }
}

/// Single-token forward. Returns the output vector, the routing decision and
/// the expert representations: all `n` (by expert index) when
/// `need_all_experts`, otherwise the `k` activated ones in top-k order.
pub fn moe_forward(
    layer: &MoeLoraLayer,
    x: &Tensor,
    need_all_experts: bool,
) -> Result<(Tensor, RoutingDecision, Vec<Tensor>), AdapterError> {
    if x.rank() != 1 {
        return Err(AdapterError::InputDimension {
            expected: layer.d_in(),
            shape: x.shape().to_vec(),
        });
    }
    check_input(x, layer.d_in())?;
    let batch = ag::reshape(x, &[1, layer.d_in()])?;
    let out = layer.forward(&batch, ForwardMode::eval(need_all_experts))?;
    let y = ag::row(&out.y, 0)?;
    let decision = out.decisions.into_iter().next().expect("one token");
    let reprs = match out.experts {
        ExpertOutputs::All(all) => all
            .iter()
            .map(|e| ag::row(e, 0))
            .collect::<Result<Vec<_>, _>>()?,
        ExpertOutputs::Routed(routed) => decision
            .topk_indices
            .iter()
            .map(|&i| {
                let out = routed[i].output.as_ref().expect("activated expert has output");
                ag::row(out, 0)
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    Ok((y, decision, reprs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], param: bool) -> Tensor {
        let data = (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        if param {
            Tensor::parameter(data, shape).unwrap()
        } else {
            Tensor::new(data, shape).unwrap()
        }
    }

    /// Layer with non-zero `B` so experts contribute.
    fn random_layer(seed: u64, d_in: usize, d_out: usize, n: usize, k: usize, r: usize) -> MoeLoraLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts = (0..n)
            .map(|_| {
                LoraExpert::from_parts(
                    random_tensor(&mut rng, &[r, d_in], true),
                    random_tensor(&mut rng, &[d_out, r], true),
                    2.0 * r as f64,
                    LoraScaling::AlphaOverRank,
                )
                .unwrap()
            })
            .collect();
        let router = Router::from_gate(random_tensor(&mut rng, &[n, d_in], true)).unwrap();
        let w0 = random_tensor(&mut rng, &[d_out, d_in], false);
        MoeLoraLayer::new(w0, experts, router, k, 0.0).unwrap()
    }

    #[test]
    fn zero_initialized_experts_leave_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w0 = random_tensor(&mut rng, &[8, 12], false);
        let cfg = MoeLayerConfig {
            rank: 2,
            ..MoeLayerConfig::default()
        };
        let layer = MoeLoraLayer::init(w0.clone(), &cfg, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[5, 12], false);
        let out = layer.forward(&x, ForwardMode::eval(false)).unwrap();
        assert_eq!(out.y.data(), layer.base_forward(&x).unwrap().data());
    }

    #[test]
    fn single_expert_routing_has_weight_one() {
        let mut layer = random_layer(3, 4, 3, 2, 1, 1);
        // Make expert 0 dominate through the gate.
        let gate = Tensor::parameter(vec![5.0, 5.0, 5.0, 5.0, -5.0, -5.0, -5.0, -5.0], &[2, 4]).unwrap();
        *layer.router_mut().gate_mut() = gate;
        let x = Tensor::vector(vec![1.0, 0.5, 0.25, 2.0]);
        let (y, d, reprs) = moe_forward(&layer, &x, false).unwrap();
        assert_eq!(d.topk_indices, vec![0]);
        assert_eq!(d.renorm_weights, vec![1.0]);
        let base = layer.base_forward(&x).unwrap();
        let e0 = layer.experts()[0].forward(&x).unwrap();
        for j in 0..3 {
            assert!((y.data()[j] - base.data()[j] - e0.data()[j]).abs() < 1e-12);
        }
        assert_eq!(reprs.len(), 1);
    }

    #[test]
    fn matches_brute_force_weighted_sum() {
        let layer = random_layer(11, 6, 5, 4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let xv: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = Tensor::vector(xv.clone());
            let (y, d, _) = moe_forward(&layer, &x, false).unwrap();

            // Independent evaluation with plain loops.
            let g = layer.router().gate().data();
            let logits: Vec<f64> = (0..4).map(|i| (0..6).map(|j| g[i * 6 + j] * xv[j]).sum()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|a, b| probs[*b].partial_cmp(&probs[*a]).unwrap());
            let top = &order[..2];
            let norm: f64 = top.iter().map(|&i| probs[i]).sum();
            let w0 = layer.w0().data();
            let mut expected: Vec<f64> = (0..5).map(|o| (0..6).map(|j| w0[o * 6 + j] * xv[j]).sum()).collect();
            for &i in top {
                let e = &layer.experts()[i];
                let (a, b) = (e.a().data(), e.b().data());
                let ax: Vec<f64> = (0..2).map(|p| (0..6).map(|j| a[p * 6 + j] * xv[j]).sum()).collect();
                for o in 0..5 {
                    let bax: f64 = (0..2).map(|p| b[o * 2 + p] * ax[p]).sum();
                    expected[o] += probs[i] / norm * e.scale() * bax;
                }
            }
            let mut sorted_top = top.to_vec();
            sorted_top.sort_unstable();
            let mut got_top = d.topk_indices.clone();
            got_top.sort_unstable();
            assert_eq!(got_top, sorted_top);
            for o in 0..5 {
                assert!((y.data()[o] - expected[o]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dense_and_sparse_paths_agree_bitwise() {
        let layer = random_layer(21, 6, 6, 4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_tensor(&mut rng, &[7, 6], false);
        let sparse = layer.forward(&x, ForwardMode::eval(false)).unwrap();
        let dense = layer.forward(&x, ForwardMode::eval(true)).unwrap();
        assert_eq!(sparse.decisions, dense.decisions);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&sparse.y), bits(&dense.y));
        match dense.experts {
            ExpertOutputs::All(all) => assert_eq!(all.len(), 4),
            _ => panic!("expected all experts"),
        }
    }

    #[test]
    fn k_equal_n_reduces_to_softmax_mixture() {
        let layer = random_layer(5, 5, 4, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, &[1, 5], false);
        let soft = layer.soft_forward(&x).unwrap();
        let probs = layer.router().gate_probs(&x).unwrap();
        let full = RoutingDecision::from_gate_probs(probs.data().to_vec(), 3).unwrap();
        let mut expected = layer.base_forward(&x).unwrap().data().to_vec();
        for i in 0..3 {
            let e = layer.experts()[i].forward(&x).unwrap();
            for (o, v) in expected.iter_mut().enumerate() {
                *v += full.weight_of(i) * e.data()[o];
            }
        }
        for (a, b) in soft.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_weight_and_inactive_experts_get_no_gradient() {
        let layer = random_layer(8, 5, 5, 4, 2, 2);
        let x = Tensor::vector(vec![0.3, -1.0, 0.8, 0.1, 0.5]);
        let (y, d, _) = moe_forward(&layer, &x, false).unwrap();
        ag::sum(&y).backward().unwrap();
        assert!(layer.w0().grad().is_none());
        for i in d.inactivated() {
            for p in layer.experts()[i].parameters() {
                let g = p.grad();
                assert!(g.is_none() || g.unwrap().iter().all(|v| *v == 0.0));
            }
        }
        for &i in &d.topk_indices {
            assert!(layer.experts()[i].b().grad().is_some());
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w0 = random_tensor(&mut rng, &[8, 8], false);
        for k in [0, 4, 5] {
            let cfg = MoeLayerConfig { k, rank: 2, ..MoeLayerConfig::default() };
            assert!(matches!(
                MoeLoraLayer::init(w0.clone(), &cfg, &mut rng),
                Err(AdapterError::InvalidTopK { .. })
            ));
        }
        let trainable = random_tensor(&mut rng, &[8, 8], true);
        let cfg = MoeLayerConfig { rank: 2, ..MoeLayerConfig::default() };
        assert!(MoeLoraLayer::init(trainable, &cfg, &mut rng).is_err());
        let layer = MoeLoraLayer::init(w0, &cfg, &mut rng).unwrap();
        assert!(matches!(
            layer.forward(&Tensor::zeros(&[2, 7]), ForwardMode::eval(false)),
            Err(AdapterError::InputDimension { .. })
        ));
    }

    #[test]
    fn dropout_only_touches_expert_branch() {
        let layer = {
            let base = random_layer(30, 6, 6, 4, 2, 3);
            MoeLoraLayer::new(
                base.w0().clone(),
                base.experts().to_vec(),
                base.router().clone(),
                2,
                0.5,
            )
            .unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_tensor(&mut rng, &[4, 6], false);
        let mut drop_rng = SeededRng::seed_from_u64(1);
        let train = layer
            .forward(&x, ForwardMode { need_all_experts: false, dropout_rng: Some(&mut drop_rng) })
            .unwrap();
        let eval = layer.forward(&x, ForwardMode::eval(false)).unwrap();
        assert_eq!(train.decisions, eval.decisions);
        assert_ne!(train.y.data(), eval.y.data());
    }
}
