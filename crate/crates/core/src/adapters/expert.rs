use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::AdapterError;
use crate::autograd::{self as ag, Tensor};

/// Output scaling applied to `B·A·x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LoraScaling {
    /// `α / r`, the usual LoRA convention.
    #[default]
    AlphaOverRank,
    /// Plain `B·A·x`.
    Unscaled,
}

/// One low-rank expert: `A: r × d_in`, `B: d_out × r`.
#[derive(Debug, Clone)]
pub struct LoraExpert {
    a: Tensor,
    b: Tensor,
    alpha: f64,
    scale: f64,
}

impl LoraExpert {
    /// Standard deviation of the Gaussian used for `A` at initialization.
    pub const INIT_STD: f64 = 0.02;

    /// Fresh expert: `A ~ N(0, 0.02²)`, `B = 0`, so it contributes nothing
    /// until trained. Requires `rank ≤ min(d_in, d_out) / 2`.
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        scaling: LoraScaling,
        rng: &mut R,
    ) -> Result<Self, AdapterError> {
        if rank == 0 || 2 * rank > d_in.min(d_out) {
            return Err(AdapterError::RankTooLarge { rank, d_in, d_out });
        }
        let normal = Normal::new(0.0, Self::INIT_STD).expect("valid std");
        let a_data = (0..rank * d_in).map(|_| normal.sample(rng)).collect();
        let a = Tensor::parameter(a_data, &[rank, d_in])?;
        let b = Tensor::parameter(vec![0.0; d_out * rank], &[d_out, rank])?;
        Self::from_parts(a, b, alpha, scaling)
    }

    /// Expert from explicit matrices. Only shape agreement is checked, so
    /// full-rank experts are accepted here.
    pub fn from_parts(
        a: Tensor,
        b: Tensor,
        alpha: f64,
        scaling: LoraScaling,
    ) -> Result<Self, AdapterError> {
        let (rank, b_rank) = match (a.shape(), b.shape()) {
            ([r, _], [_, rb]) => (*r, *rb),
            _ => {
                return Err(AdapterError::Shape(format!(
                    "expert matrices must be rank 2, got A {:?} and B {:?}",
                    a.shape(),
                    b.shape()
                )))
            }
        };
        if rank != b_rank || rank == 0 {
            return Err(AdapterError::Shape(format!(
                "A {:?} and B {:?} disagree on the rank",
                a.shape(),
                b.shape()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(AdapterError::InvalidConfig(format!("alpha must be positive, got {alpha}")));
        }
        let scale = match scaling {
            LoraScaling::AlphaOverRank => alpha / rank as f64,
            LoraScaling::Unscaled => 1.0,
        };
        Ok(Self { a, b, alpha, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn parameters(&self) -> [&Tensor; 2] {
        [&self.a, &self.b]
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.a, &mut self.b]
    }

    /// `scale · B·A·x`. Accepts one input vector `[d_in]` or a batch
    /// `[tokens, d_in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, AdapterError> {
        check_input(x, self.d_in())?;
        let out = if x.rank() == 1 {
            ag::matmul(&self.b, &ag::matmul(&self.a, x)?)?
        } else {
            ag::matmul_nt(&ag::matmul_nt(x, &self.a)?, &self.b)?
        };
        Ok(if self.scale == 1.0 { out } else { ag::scale(&out, self.scale) })
    }
}

pub(crate) fn check_input(x: &Tensor, d_in: usize) -> Result<(), AdapterError> {
    let width = match x.shape() {
        [d] | [_, d] => *d,
        _ => usize::MAX,
    };
    if width != d_in {
        return Err(AdapterError::InputDimension {
            expected: d_in,
            shape: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// `x · W` with `W: d_out × d_in` for a vector or a batch of row vectors.
pub(crate) fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor, AdapterError> {
    check_input(x, w.shape()[1])?;
    Ok(if x.rank() == 1 {
        ag::matmul(w, x)?
    } else {
        ag::matmul_nt(x, w)?
    })
}

/// Expert representation `E_i(x)`.
pub fn expert_forward(expert: &LoraExpert, x: &Tensor) -> Result<Tensor, AdapterError> {
    expert.forward(x)
}

/// Single-adapter forward `W₀·x + scale·B·A·x`.
pub fn lora_forward(w0: &Tensor, expert: &LoraExpert, x: &Tensor) -> Result<Tensor, AdapterError> {
    if w0.rank() != 2 || w0.shape()[0] != expert.d_out() || w0.shape()[1] != expert.d_in() {
        return Err(AdapterError::Shape(format!(
            "frozen weight {:?} does not match expert {}x{}",
            w0.shape(),
            expert.d_out(),
            expert.d_in()
        )));
    }
    Ok(ag::add(&linear(x, w0)?, &expert.forward(x)?)?)
}
