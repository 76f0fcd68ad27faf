//! Post-hoc analysis of trained runs: per-task expert workload, divergence
//! between task workloads, and similarity of expert representations.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::ExpertOutputs;
use crate::autograd::Tensor;
use crate::trainer::{RoutingRecord, Split, ToyModel, TrainError};

pub const WORKLOAD_CSV_HEADER: &str = "# comoe-workload v1";
pub const SIMILARITY_CSV_HEADER: &str = "# comoe-similarity v1";
pub const PROJECTION_CSV_HEADER: &str = "# comoe-projection v1";
pub const DIVERGENCE_CSV_HEADER: &str = "# comoe-divergence v1";

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("routing log names expert {index}, but there are only {n}")]
    UnknownExpert { index: usize, n: usize },
    #[error("routing log names task {index}, but there are only {n}")]
    UnknownTask { index: usize, n: usize },
    #[error("need at least 2 tasks with activations, found {0}")]
    TooFewRows(usize),
    #[error("need at least 2 experts, found {0}")]
    TooFewExperts(usize),
    #[error("no evaluation tokens")]
    NoTokens,
    #[error("token {token} has {got} expert vectors, expected {expected}")]
    Ragged { token: usize, expected: usize, got: usize },
    #[error("model has no adapted layers")]
    NoAdapters,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Activation counts per (task, expert) and their row-normalized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadMatrix {
    pub counts: Vec<Vec<u64>>,
    /// `None` for tasks with no activations.
    pub freqs: Vec<Option<Vec<f64>>>,
}

impl WorkloadMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let freqs = counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row.iter().map(|c| *c as f64 / total as f64).collect())
            })
            .collect();
        Self { counts, freqs }
    }

    pub fn valid_rows(&self) -> Vec<&[f64]> {
        self.freqs.iter().filter_map(|r| r.as_deref()).collect()
    }
}

/// Token-level activation counts. Every record counts once for each expert
/// in its top-k.
pub fn expert_workload(
    log: &[RoutingRecord],
    num_tasks: usize,
    n_experts: usize,
) -> Result<WorkloadMatrix, DiagnosticsError> {
    let mut counts = vec![vec![0u64; n_experts]; num_tasks];
    for r in log {
        if r.task >= num_tasks {
            return Err(DiagnosticsError::UnknownTask { index: r.task, n: num_tasks });
        }
        for &e in &r.topk {
            if e >= n_experts {
                return Err(DiagnosticsError::UnknownExpert { index: e, n: n_experts });
            }
            counts[r.task][e] += 1;
        }
    }
    Ok(WorkloadMatrix::from_counts(counts))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Jensen–Shannon divergence in nats, in `[0, ln 2]`.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, std::f64::consts::LN_2)
}

/// Mean JSD over all pairs of tasks that have activations.
pub fn workload_divergence(w: &WorkloadMatrix) -> Result<f64, DiagnosticsError> {
    let rows = w.valid_rows();
    if rows.len() < 2 {
        return Err(DiagnosticsError::TooFewRows(rows.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            total += jensen_shannon(rows[i], rows[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Mean over tokens of `cos(E_i(x), E_j(x))`.
    pub cosine: Vec<Vec<f64>>,
    /// First two principal-component coordinates of each expert's mean
    /// representation.
    pub projection: Vec<[f64; 2]>,
    /// Mean `|cosine[i][j]|` over `i ≠ j`.
    pub off_diag_mean: f64,
    /// Zero-norm `(token, expert)` representations left out.
    pub excluded: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `reprs[token][expert]` is `E_expert(x_token)`.
pub fn representation_similarity(reprs: &[Vec<Vec<f64>>]) -> Result<SimilarityReport, DiagnosticsError> {
    if reprs.is_empty() {
        return Err(DiagnosticsError::NoTokens);
    }
    let n = reprs[0].len();
    if n < 2 {
        return Err(DiagnosticsError::TooFewExperts(n));
    }
    let dim = reprs[0].first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; n]; n];
    let mut counts = vec![vec![0usize; n]; n];
    let mut means = vec![vec![0.0; dim]; n];
    let mut excluded = 0;
    for (t, token) in reprs.iter().enumerate() {
        if token.len() != n {
            return Err(DiagnosticsError::Ragged { token: t, expected: n, got: token.len() });
        }
        let norms: Vec<f64> = token.iter().map(|v| norm(v)).collect();
        excluded += norms.iter().filter(|v| **v <= ZERO_NORM).count();
        for i in 0..n {
            means[i].iter_mut().zip(&token[i]).for_each(|(m, v)| *m += v);
            if norms[i] <= ZERO_NORM {
                continue;
            }
            for j in i + 1..n {
                if norms[j] <= ZERO_NORM {
                    continue;
                }
                let d: f64 = token[i].iter().zip(&token[j]).map(|(a, b)| a * b).sum();
                sums[i][j] += d / (norms[i] * norms[j]);
                counts[i][j] += 1;
            }
        }
    }
    let mut cosine = vec![vec![0.0; n]; n];
    let mut off = 0.0;
    for i in 0..n {
        cosine[i][i] = 1.0;
        for j in i + 1..n {
            let c = if counts[i][j] > 0 {
                (sums[i][j] / counts[i][j] as f64).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            cosine[i][j] = c;
            cosine[j][i] = c;
            off += 2.0 * c.abs();
        }
    }
    let tokens = reprs.len() as f64;
    for m in &mut means {
        m.iter_mut().for_each(|v| *v /= tokens);
    }
    Ok(SimilarityReport {
        cosine,
        projection: pca_2d(&means),
        off_diag_mean: off / (n * (n - 1)) as f64,
        excluded,
    })
}

/// Top-2 principal-component scores of the rows of `points`, via the
/// eigen-decomposition of the centered Gram matrix. Each component's sign is
/// fixed so its largest-magnitude score is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    let dim = points.first().map_or(0, Vec::len);
    let mut center = vec![0.0; dim];
    for p in points {
        center.iter_mut().zip(p).for_each(|(c, v)| *c += v / n as f64);
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&center).map(|(v, c)| v - c).collect())
        .collect();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map_or(0.0, |&k| eig.eigenvalues[k]).max(0.0);
    let mut out = vec![[0.0; 2]; n];
    for (c, &k) in order.iter().take(2).enumerate() {
        // Round-off eigenvalues would otherwise show up as spurious spread.
        let lambda = eig.eigenvalues[k];
        let lambda = if lambda > 1e-12 * top { lambda } else { 0.0 };
        let col = eig.eigenvectors.column(k);
        let pivot = (0..n).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i][c] = sign * col[i] * lambda.sqrt();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub workload: WorkloadMatrix,
    pub workload_jsd: f64,
    pub similarity: SimilarityReport,
}

/// Per-layer diagnostics plus the layer averages used as run summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub layers: Vec<LayerDiagnostics>,
    pub off_diag_mean: f64,
    pub workload_jsd: f64,
}

const PROBE_CHUNK: usize = 256;

/// Evaluates every expert on every token of `split` and summarizes routing
/// and representation geometry per adapted layer.
pub fn run_diagnostics(model: &ToyModel, split: &Split, num_tasks: usize) -> Result<RunDiagnostics, DiagnosticsError> {
    let adapted: Vec<(usize, usize)> = model.adapters().map(|(l, a)| (l, a.n_experts())).collect();
    if adapted.is_empty() {
        return Err(DiagnosticsError::NoAdapters);
    }
    if split.is_empty() {
        return Err(DiagnosticsError::NoTokens);
    }
    let mut reprs: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::with_capacity(split.len()); adapted.len()];
    let mut logs: Vec<Vec<RoutingRecord>> = vec![Vec::new(); adapted.len()];
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(PROBE_CHUNK) {
        let x = Tensor::new(split.gather(chunk), &[chunk.len(), split.dim]).map_err(TrainError::from)?;
        let out = model.forward(&x, true, None)?;
        for (slot, lo) in out.layers.iter().flatten().enumerate() {
            let ExpertOutputs::All(all) = &lo.experts else {
                unreachable!("probe runs with every expert");
            };
            let rows: Vec<Vec<Vec<f64>>> = all.iter().map(Tensor::to_rows).collect();
            for (r, d) in lo.decisions.iter().enumerate() {
                reprs[slot].push(rows.iter().map(|e| e[r].clone()).collect());
                logs[slot].push(RoutingRecord {
                    token: chunk[r],
                    task: split.tasks[chunk[r]],
                    layer: adapted[slot].0,
                    topk: d.topk_indices.clone(),
                });
            }
        }
    }
    let mut layers = Vec::with_capacity(adapted.len());
    for (slot, &(layer, n)) in adapted.iter().enumerate() {
        let workload = expert_workload(&logs[slot], num_tasks, n)?;
        let workload_jsd = workload_divergence(&workload)?;
        let similarity = representation_similarity(&reprs[slot])?;
        layers.push(LayerDiagnostics {
            layer,
            workload,
            workload_jsd,
            similarity,
        });
    }
    let count = layers.len() as f64;
    Ok(RunDiagnostics {
        off_diag_mean: layers.iter().map(|l| l.similarity.off_diag_mean).sum::<f64>() / count,
        workload_jsd: layers.iter().map(|l| l.workload_jsd).sum::<f64>() / count,
        layers,
    })
}

fn csv_io(e: csv::Error) -> DiagnosticsError {
    DiagnosticsError::Io(e.into())
}

/// `layer,task,expert,count,freq`; `freq` is empty for tasks with no tokens.
pub fn write_workload_csv<W: Write>(mut out: W, diag: &RunDiagnostics) -> Result<(), DiagnosticsError> {
    writeln!(out, "{WORKLOAD_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "task", "expert", "count", "freq"]).map_err(csv_io)?;
    for l in &diag.layers {
        for (t, row) in l.workload.counts.iter().enumerate() {
            for (e, c) in row.iter().enumerate() {
                let freq = l.workload.freqs[t].as_ref().map_or(String::new(), |f| f[e].to_string());
                w.write_record([l.layer.to_string(), t.to_string(), e.to_string(), c.to_string(), freq])
                    .map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `layer,expert_i,expert_j,cosine`, the full matrix in long form.
pub fn write_similarity_csv<W: Write>(mut out: W, diag: &RunDiagnostics) -> Result<(), DiagnosticsError> {
    writeln!(out, "{SIMILARITY_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "expert_i", "expert_j", "cosine"]).map_err(csv_io)?;
    for l in &diag.layers {
        for (i, row) in l.similarity.cosine.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                w.write_record([l.layer.to_string(), i.to_string(), j.to_string(), c.to_string()])
                    .map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `layer,expert,pc1,pc2`.
pub fn write_projection_csv<W: Write>(mut out: W, diag: &RunDiagnostics) -> Result<(), DiagnosticsError> {
    writeln!(out, "{PROJECTION_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "expert", "pc1", "pc2"]).map_err(csv_io)?;
    for l in &diag.layers {
        for (e, p) in l.similarity.projection.iter().enumerate() {
            w.write_record([l.layer.to_string(), e.to_string(), p[0].to_string(), p[1].to_string()])
                .map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `layer,workload_jsd,off_diag_mean,excluded`, plus a `mean` row.
pub fn write_divergence_csv<W: Write>(mut out: W, diag: &RunDiagnostics) -> Result<(), DiagnosticsError> {
    writeln!(out, "{DIVERGENCE_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "workload_jsd", "off_diag_mean", "excluded"]).map_err(csv_io)?;
    for l in &diag.layers {
        w.write_record([
            l.layer.to_string(),
            l.workload_jsd.to_string(),
            l.similarity.off_diag_mean.to_string(),
            l.similarity.excluded.to_string(),
        ])
        .map_err(csv_io)?;
    }
    let excluded: usize = diag.layers.iter().map(|l| l.similarity.excluded).sum();
    w.write_record([
        "mean".to_string(),
        diag.workload_jsd.to_string(),
        diag.off_diag_mean.to_string(),
        excluded.to_string(),
    ])
    .map_err(csv_io)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(task: usize, topk: &[usize]) -> RoutingRecord {
        RoutingRecord { token: 0, task, layer: 0, topk: topk.to_vec() }
    }

    #[test]
    fn workload_examples() {
        let log: Vec<_> = (0..10).map(|_| rec(0, &[0, 1])).collect();
        let w = expert_workload(&log, 1, 4).unwrap();
        assert_eq!(w.freqs[0].as_deref(), Some(&[0.5, 0.5, 0.0, 0.0][..]));

        let empty = expert_workload(&[], 2, 4).unwrap();
        assert_eq!(empty.counts, vec![vec![0; 4]; 2]);
        assert!(empty.freqs.iter().all(Option::is_none));

        let log = vec![rec(0, &[0, 2]), rec(0, &[2, 3]), rec(1, &[1, 0]), rec(1, &[1, 3]), rec(1, &[1, 2])];
        let w = expert_workload(&log, 2, 4).unwrap();
        assert_eq!(w.counts, vec![vec![1, 0, 2, 1], vec![1, 3, 1, 1]]);
        assert_eq!(w.freqs[1].as_deref(), Some(&[1.0 / 6.0, 0.5, 1.0 / 6.0, 1.0 / 6.0][..]));

        assert!(matches!(expert_workload(&[rec(0, &[4])], 1, 4), Err(DiagnosticsError::UnknownExpert { index: 4, n: 4 })));
        assert!(matches!(expert_workload(&[rec(2, &[0])], 2, 4), Err(DiagnosticsError::UnknownTask { .. })));
    }

    #[test]
    fn divergence_examples() {
        let same = WorkloadMatrix::from_counts(vec![vec![1, 2, 3, 4], vec![2, 4, 6, 8]]);
        assert!(workload_divergence(&same).unwrap().abs() < 1e-15);
        let disjoint = WorkloadMatrix::from_counts(vec![vec![5, 5, 0, 0], vec![0, 0, 3, 1]]);
        assert!((workload_divergence(&disjoint).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = [0.4f64, 0.3, 0.2, 0.1];
        let q = [0.1f64, 0.1, 0.4, 0.4];
        let w = WorkloadMatrix::from_counts(vec![vec![4, 3, 2, 1], vec![1, 1, 4, 4]]);
        let mut oracle = 0.0;
        for i in 0..4 {
            let m = 0.5 * (p[i] + q[i]);
            oracle += 0.5 * p[i] * (p[i] / m).ln() + 0.5 * q[i] * (q[i] / m).ln();
        }
        assert!((workload_divergence(&w).unwrap() - oracle).abs() < 1e-12);

        let one = WorkloadMatrix::from_counts(vec![vec![1, 1], vec![0, 0]]);
        assert!(matches!(workload_divergence(&one), Err(DiagnosticsError::TooFewRows(1))));
    }

    #[test]
    fn similarity_examples() {
        let v = vec![0.3, -1.0, 2.0];
        let same: Vec<Vec<Vec<f64>>> = (0..3).map(|_| vec![v.clone(); 4]).collect();
        let r = representation_similarity(&same).unwrap();
        assert!(r.cosine.iter().flatten().all(|c| (c - 1.0).abs() < 1e-12));
        assert!((r.off_diag_mean - 1.0).abs() < 1e-12);

        let ortho: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| (0..3).map(|i| (0..3).map(|j| if i == j { 2.0 } else { 0.0 }).collect()).collect())
            .collect();
        let r = representation_similarity(&ortho).unwrap();
        assert_eq!(r.off_diag_mean, 0.0);

        assert!(matches!(representation_similarity(&[]), Err(DiagnosticsError::NoTokens)));
        assert!(matches!(representation_similarity(&[vec![vec![1.0]]]), Err(DiagnosticsError::TooFewExperts(1))));

        let with_zero = vec![vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]]];
        let r = representation_similarity(&with_zero).unwrap();
        assert_eq!(r.excluded, 1);
        assert!((r.cosine[0][2] - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_double_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = crate::SeededRng::seed_from_u64(8);
        let reprs: Vec<Vec<Vec<f64>>> = (0..6)
            .map(|_| (0..4).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let r = representation_similarity(&reprs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for t in &reprs {
                    let d: f64 = (0..5).map(|k| t[i][k] * t[j][k]).sum();
                    acc += d / (norm(&t[i]) * norm(&t[j]));
                }
                assert!((r.cosine[i][j] - acc / 6.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pca_recovers_a_line() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let proj = pca_2d(&pts);
        let spread = 5f64.sqrt();
        for (i, p) in proj.iter().enumerate() {
            assert!((p[0].abs() - (i as f64 - 1.5).abs() * spread).abs() < 1e-9);
            assert!(p[1].abs() < 1e-9);
        }
        assert_eq!(proj, pca_2d(&pts));
    }

    proptest! {
        #[test]
        fn similarity_invariants(raw in proptest::collection::vec(-1.0f64..1.0, 3 * 4 * 5)) {
            let reprs: Vec<Vec<Vec<f64>>> = raw
                .chunks(20)
                .map(|t| t.chunks(5).map(<[f64]>::to_vec).collect())
                .collect();
            let r = representation_similarity(&reprs).unwrap();
            for i in 0..4 {
                prop_assert!((r.cosine[i][i] - 1.0).abs() < 1e-9);
                for j in 0..4 {
                    prop_assert!((r.cosine[i][j] - r.cosine[j][i]).abs() < 1e-9);
                }
            }
            prop_assert!((-1.0..=1.0).contains(&r.off_diag_mean));
        }

        #[test]
        fn divergence_symmetric_and_bounded(counts in proptest::collection::vec(proptest::collection::vec(0u64..20, 4), 2..5)) {
            let w = WorkloadMatrix::from_counts(counts.clone());
            for row in w.valid_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            if let Ok(d) = workload_divergence(&w) {
                prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&d));
                let mut rev = counts;
                rev.reverse();
                let d2 = workload_divergence(&WorkloadMatrix::from_counts(rev)).unwrap();
                prop_assert!((d - d2).abs() < 1e-12);
            }
        }
    }
}
