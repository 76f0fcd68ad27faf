use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::SeededRng;

/// Multi-task Gaussian-cluster classification problem.
///
/// The input space is cut into `num_tasks` equal coordinate blocks. Task `t`
/// lives entirely in block `t`: its class centers are mutually orthogonal
/// vectors of length `cluster_separation / √2` (so any two centers are
/// `cluster_separation` apart) and samples add unit-variance noise inside the
/// block. Labels are within-task (`0..classes_per_task`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub num_tasks: usize,
    pub input_dim: usize,
    pub classes_per_task: usize,
    pub cluster_separation: f64,
    pub samples_per_task: usize,
    /// Probability that a label is replaced by a uniformly chosen other class.
    pub label_noise: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self::four_task()
    }
}

impl SyntheticTaskSpec {
    /// Two well-separated binary tasks.
    pub fn separable_two_task() -> Self {
        Self {
            num_tasks: 2,
            input_dim: 32,
            classes_per_task: 2,
            cluster_separation: 10.0,
            samples_per_task: 2000,
            label_noise: 0.0,
        }
    }

    /// Four overlapping four-class tasks with a little label noise.
    pub fn four_task() -> Self {
        Self {
            num_tasks: 4,
            input_dim: 32,
            classes_per_task: 4,
            cluster_separation: 3.0,
            samples_per_task: 2000,
            label_noise: 0.05,
        }
    }

    pub fn block_dim(&self) -> usize {
        self.input_dim / self.num_tasks.max(1)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Data(m));
        if self.num_tasks == 0 {
            return bad("num_tasks must be >= 1".into());
        }
        if self.classes_per_task < 2 {
            return bad("classes_per_task must be >= 2".into());
        }
        if self.input_dim % self.num_tasks != 0 {
            return bad(format!(
                "input_dim {} not divisible by num_tasks {}",
                self.input_dim, self.num_tasks
            ));
        }
        if self.block_dim() < self.classes_per_task {
            return bad(format!(
                "each task block has {} dims, fewer than {} classes",
                self.block_dim(),
                self.classes_per_task
            ));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return bad(format!("cluster_separation {} must be > 0", self.cluster_separation));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label_noise {} not in [0, 0.5)", self.label_noise));
        }
        if self.samples_per_task < 5 {
            return bad("samples_per_task must be >= 5".into());
        }
        Ok(())
    }
}

/// Row-major samples with labels and task tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub dim: usize,
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    pub tasks: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat rows for the given sample indices.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    fn from_indices(all: &Split, idx: &[usize]) -> Split {
        Split {
            dim: all.dim,
            x: all.gather(idx),
            labels: idx.iter().map(|&i| all.labels[i]).collect(),
            tasks: idx.iter().map(|&i| all.tasks[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.spec.classes_per_task
    }

    pub fn num_tasks(&self) -> usize {
        self.spec.num_tasks
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }
}

/// Orthonormal vectors by Gram-Schmidt on Gaussian draws.
fn orthonormal(count: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.iter().map(|a| a / n).collect());
        }
    }
    basis
}

/// Deterministic dataset for `(spec, seed)` with a shuffled 80/20 split.
pub fn generate_dataset(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset, TrainError> {
    spec.validate()?;
    let mut rng = SeededRng::seed_from_u64(seed);
    let block = spec.block_dim();
    let radius = spec.cluster_separation / std::f64::consts::SQRT_2;
    let total = spec.num_tasks * spec.samples_per_task;

    let mut all = Split {
        dim: spec.input_dim,
        x: Vec::with_capacity(total * spec.input_dim),
        labels: Vec::with_capacity(total),
        tasks: Vec::with_capacity(total),
    };
    for task in 0..spec.num_tasks {
        let centers = orthonormal(spec.classes_per_task, block, &mut rng);
        for i in 0..spec.samples_per_task {
            let class = i % spec.classes_per_task;
            let mut x = vec![0.0; spec.input_dim];
            for (j, c) in centers[class].iter().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                x[task * block + j] = radius * c + noise;
            }
            let mut label = class;
            if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                let other = rng.random_range(0..spec.classes_per_task - 1);
                label = if other >= class { other + 1 } else { other };
            }
            all.x.extend(x);
            all.labels.push(label);
            all.tasks.push(task);
        }
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let n_train = total * 4 / 5;
    Ok(Dataset {
        spec: spec.clone(),
        train: Split::from_indices(&all, &order[..n_train]),
        test: Split::from_indices(&all, &order[n_train..]),
    })
}
