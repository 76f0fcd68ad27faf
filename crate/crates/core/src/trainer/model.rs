use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::adapters::checkpoint::{take_array, CheckpointError, NamedArray};
use crate::adapters::{ForwardMode, LoraExpert, MoeLayerConfig, MoeLoraLayer, MoeOutput, Router};
use crate::autograd::{self as ag, Tensor};
use crate::SeededRng;

/// Which dense layers of the toy stack carry MoE-LoRA adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptedLayers {
    First,
    Second,
    #[default]
    Both,
}

impl AdaptedLayers {
    pub fn contains(self, layer: usize) -> bool {
        matches!(
            (self, layer),
            (AdaptedLayers::Both, _) | (AdaptedLayers::First, 0) | (AdaptedLayers::Second, 1)
        )
    }
}

#[derive(Debug, Clone)]
pub enum DenseLayer {
    Frozen(Tensor),
    Adapted(MoeLoraLayer),
}

impl DenseLayer {
    pub fn weight(&self) -> &Tensor {
        match self {
            DenseLayer::Frozen(w) => w,
            DenseLayer::Adapted(l) => l.w0(),
        }
    }

    pub fn adapter(&self) -> Option<&MoeLoraLayer> {
        match self {
            DenseLayer::Frozen(_) => None,
            DenseLayer::Adapted(l) => Some(l),
        }
    }

    pub fn adapter_mut(&mut self) -> Option<&mut MoeLoraLayer> {
        match self {
            DenseLayer::Frozen(_) => None,
            DenseLayer::Adapted(l) => Some(l),
        }
    }
}

/// Frozen two-layer ReLU stack with a frozen linear readout:
/// `logits = R · relu(W₂ · relu(W₁ · x))`, where `W₁`, `W₂` may be adapted.
#[derive(Debug, Clone)]
pub struct ToyModel {
    layers: [DenseLayer; 2],
    readout: Tensor,
}

/// Logits plus each adapted layer's MoE output (`None` for frozen layers).
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub layers: Vec<Option<MoeOutput>>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..rows * cols).map(|_| normal.sample(rng)).collect()
}

impl ToyModel {
    /// Draws the frozen weights (He-scaled), then the adapters, all from `rng`.
    pub fn init(
        config: &TrainConfig,
        input_dim: usize,
        classes: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, TrainError> {
        let h = config.hidden_dim;
        let w1 = Tensor::new(gaussian(h, input_dim, (2.0 / input_dim as f64).sqrt(), rng), &[h, input_dim])?;
        let w2 = Tensor::new(gaussian(h, h, (2.0 / h as f64).sqrt(), rng), &[h, h])?;
        let readout = Tensor::new(gaussian(classes, h, (1.0 / h as f64).sqrt(), rng), &[classes, h])?;
        let layer_cfg = config.layer_config();
        let mut wrap = |i: usize, w: Tensor| -> Result<DenseLayer, TrainError> {
            Ok(if config.adapted_layers.contains(i) {
                DenseLayer::Adapted(MoeLoraLayer::init(w, &layer_cfg, rng)?)
            } else {
                DenseLayer::Frozen(w)
            })
        };
        let l1 = wrap(0, w1)?;
        let l2 = wrap(1, w2)?;
        Ok(Self {
            layers: [l1, l2],
            readout,
        })
    }

    /// Assembles a model from explicit layers; shapes must chain.
    pub fn from_layers(layers: [DenseLayer; 2], readout: Tensor) -> Result<Self, TrainError> {
        let w1 = layers[0].weight().shape();
        let w2 = layers[1].weight().shape();
        if w2[1] != w1[0] || readout.rank() != 2 || readout.shape()[1] != w2[0] {
            return Err(TrainError::Shape(format!(
                "layers {w1:?}, {w2:?} and readout {:?} do not chain",
                readout.shape()
            )));
        }
        Ok(Self { layers, readout })
    }

    pub fn layers(&self) -> &[DenseLayer; 2] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer; 2] {
        &mut self.layers
    }

    pub fn readout(&self) -> &Tensor {
        &self.readout
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight().shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.readout.shape()[0]
    }

    /// Adapted layers in order, with their stack index.
    pub fn adapters(&self) -> impl Iterator<Item = (usize, &MoeLoraLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| l.adapter().map(|a| (i, a)))
    }

    /// Trainable tensors in a fixed order (layer, then expert A/B, then gate).
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.adapters().flat_map(|(_, a)| a.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(DenseLayer::adapter_mut)
            .flat_map(|a| a.parameters_mut())
            .collect()
    }

    /// Batched forward over `x: [B, input_dim]`. `dropout_rng` turns on
    /// training-mode dropout in the adapters.
    pub fn forward(
        &self,
        x: &Tensor,
        need_all_experts: bool,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<ModelOutput, TrainError> {
        let mut h = x.clone();
        let mut outs = Vec::with_capacity(2);
        for layer in &self.layers {
            let pre = match layer {
                DenseLayer::Frozen(w) => {
                    outs.push(None);
                    ag::matmul_nt(&h, w)?
                }
                DenseLayer::Adapted(a) => {
                    let out = a.forward(
                        &h,
                        ForwardMode {
                            need_all_experts,
                            dropout_rng: dropout_rng.as_deref_mut(),
                        },
                    )?;
                    let y = out.y.clone();
                    outs.push(Some(out));
                    y
                }
            };
            h = ag::relu(&pre);
        }
        Ok(ModelOutput {
            logits: ag::matmul_nt(&h, &self.readout)?,
            layers: outs,
        })
    }

    /// Logits of the frozen stack with every adapter removed.
    pub fn base_logits(&self, x: &Tensor) -> Result<Tensor, TrainError> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = ag::relu(&ag::matmul_nt(&h, layer.weight())?);
        }
        Ok(ag::matmul_nt(&h, &self.readout)?)
    }

    /// Every tensor, frozen ones included, under stable keys.
    pub fn named_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(NamedArray::from_tensor(format!("layer{l}.w0"), layer.weight()));
            if let Some(a) = layer.adapter() {
                for (i, e) in a.experts().iter().enumerate() {
                    out.push(NamedArray::from_tensor(format!("layer{l}.expert{i}.lora_a"), e.a()));
                    out.push(NamedArray::from_tensor(format!("layer{l}.expert{i}.lora_b"), e.b()));
                }
                out.push(NamedArray::from_tensor(format!("layer{l}.router.gate"), a.router().gate()));
            }
        }
        out.push(NamedArray::from_tensor("readout", &self.readout));
        out
    }

    /// Rebuilds a model with the shapes implied by `config` from saved arrays.
    pub fn from_arrays(
        config: &TrainConfig,
        input_dim: usize,
        classes: usize,
        arrays: &[NamedArray],
    ) -> Result<Self, TrainError> {
        let h = config.hidden_dim;
        let fetch = |key: &str, shape: &[usize], param: bool| -> Result<Tensor, TrainError> {
            let data = take_array(arrays, key, shape)?;
            Ok(if param {
                Tensor::parameter(data, shape)?
            } else {
                Tensor::new(data, shape)?
            })
        };
        let dims = [(h, input_dim), (h, h)];
        let mut layers = Vec::with_capacity(2);
        for (l, &(d_out, d_in)) in dims.iter().enumerate() {
            let w0 = fetch(&format!("layer{l}.w0"), &[d_out, d_in], false)?;
            if !config.adapted_layers.contains(l) {
                layers.push(DenseLayer::Frozen(w0));
                continue;
            }
            let r = config.rank;
            let experts = (0..config.n_experts)
                .map(|i| {
                    let a = fetch(&format!("layer{l}.expert{i}.lora_a"), &[r, d_in], true)?;
                    let b = fetch(&format!("layer{l}.expert{i}.lora_b"), &[d_out, r], true)?;
                    Ok(LoraExpert::from_parts(a, b, config.alpha, config.scaling)?)
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let gate = fetch(&format!("layer{l}.router.gate"), &[config.n_experts, d_in], true)?;
            let router = Router::from_gate(gate)?;
            layers.push(DenseLayer::Adapted(MoeLoraLayer::new(
                w0,
                experts,
                router,
                config.k,
                config.dropout,
            )?));
        }
        let readout = fetch("readout", &[classes, h], false)?;
        let l2 = layers.pop().expect("two layers");
        let l1 = layers.pop().expect("two layers");
        Ok(Self {
            layers: [l1, l2],
            readout,
        })
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e.to_string())
    }
}

impl TrainConfig {
    pub fn layer_config(&self) -> MoeLayerConfig {
        MoeLayerConfig {
            n_experts: self.n_experts,
            k: self.k,
            rank: self.rank,
            alpha: self.alpha,
            scaling: self.scaling,
            dropout: self.dropout,
            router_init_std: self.router_init_std,
        }
    }
}
