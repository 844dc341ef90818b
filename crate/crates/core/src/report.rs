//! Dataset splitting, PCA projection and on-disk run artifacts.
//!
//! Every file written here is a pure function of the optimization state, so a
//! rerun with the same configuration reproduces the output byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{cluster_quality, densest_mode, fit_gmm, ClusterQuality, GaussianMixture, GmmOptions, ModeSummary};
use crate::harness::{DatasetInstance, Split};
use crate::optimizer::{FinalScores, Hyperparams, OptimizationState, PoolEntry, RoundRecord, Splits, StopReason};
use crate::seed;
use crate::signature::{csv_field, signatures_csv, FailureSignature, SignatureSpace};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratios must be nonnegative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("need at least 2 points, got {0}")]
    InsufficientData(usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Seeded shuffle, then contiguous train/validation/test blocks. Validation
/// and test sizes are floored; the remainder goes to train.
pub fn split_dataset(instances: &[DatasetInstance], ratios: [f64; 3], seed: u64) -> Result<Splits, ReportError> {
    if instances.is_empty() {
        return Err(ReportError::EmptyDataset);
    }
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(ReportError::BadRatios(ratios));
    }
    let n = instances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "split")));
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    let n_test = (n as f64 * ratios[2]).floor() as usize;
    let n_train = n - n_val - n_test;
    let tagged = |idx: &[usize], split: Split| -> Vec<DatasetInstance> {
        idx.iter()
            .map(|&i| {
                let mut x = instances[i].clone();
                x.split = Some(split);
                x
            })
            .collect()
    };
    Ok(Splits {
        train: tagged(&order[..n_train], Split::Train),
        validation: tagged(&order[n_train..n_train + n_val], Split::Validation),
        test: tagged(&order[n_train + n_val..], Split::Test),
    })
}

/// Uses the instances' own split labels when every instance has one.
pub fn presplit(instances: &[DatasetInstance]) -> Option<Splits> {
    let mut s = Splits::default();
    for x in instances {
        match x.split? {
            Split::Train => s.train.push(x.clone()),
            Split::Validation => s.validation.push(x.clone()),
            Split::Test => s.test.push(x.clone()),
        }
    }
    Some(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `(pc1, pc2)` per input row.
    pub coords: Vec<[f64; 2]>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// Projects mean-centered rows onto the top two eigenvectors of the population
/// covariance. Each direction is signed so its largest-magnitude entry is
/// positive. Rank-0 data projects to zeros.
pub fn pca_project(data: &[Vec<f64>]) -> Result<Projection, ReportError> {
    let n = data.len();
    if n < 2 {
        return Err(ReportError::InsufficientData(n));
    }
    let d = data[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let scale = eigenvalues.first().copied().unwrap_or(0.0).max(1.0);
    let mut dirs: Vec<Option<Vec<f64>>> = Vec::new();
    for k in 0..2 {
        let dir = order.get(k).filter(|_| eigenvalues[k] > 1e-12 * scale).map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = v
                .iter()
                .enumerate()
                .fold(0, |best, (j, x)| if x.abs() > v[best].abs() { j } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        });
        dirs.push(dir);
    }
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |dir: &Option<Vec<f64>>| {
                dir.as_ref()
                    .map_or(0.0, |v| row.iter().zip(v).map(|(a, b)| a * b).sum())
            };
            [proj(&dirs[0]), proj(&dirs[1])]
        })
        .collect();
    Ok(Projection { coords, eigenvalues })
}

/// The JSON run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub rounds: Vec<RoundRecord>,
    pub final_scores: FinalScores,
    pub e0_trajectory: Vec<f64>,
    pub e0_ids: Vec<String>,
    pub e0_hash: u64,
    pub validation_scores: Vec<f64>,
    pub stop_reason: StopReason,
    pub cost_units: u64,
    pub final_graph_version: u64,
    pub hyperparams: Hyperparams,
}

impl RunReport {
    pub fn from_state(state: &OptimizationState) -> Self {
        RunReport {
            schema_version: SCHEMA_VERSION,
            rounds: state.rounds.clone(),
            final_scores: state.final_scores.clone(),
            e0_trajectory: state.e0_trajectory.clone(),
            e0_ids: state.e0_ids.clone(),
            e0_hash: state.e0_hash,
            validation_scores: state.validation_scores.clone(),
            stop_reason: state.stop_reason,
            cost_units: state.cost_units,
            final_graph_version: state.graph.version(),
            hyperparams: state.hyperparams.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization is infallible");
        s.push('\n');
        s
    }

    pub fn e0_csv(&self) -> String {
        let mut out = csv_header("round,accuracy");
        for (i, a) in self.e0_trajectory.iter().enumerate() {
            let _ = writeln!(out, "{i},{a}");
        }
        out
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = csv_header(
            "round,pool_size,undiagnosable,signatures,train_failure_rate,k_fit,bic,silhouette,davies_bouldin,mode_soft_mass,chosen_v,identity_v,validation_score,e0_accuracy,cost_units",
        );
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.pool_size,
                r.undiagnosable,
                r.signatures,
                r.train_failure_rate,
                r.k_fit.map(|k| k.to_string()).unwrap_or_default(),
                opt(r.bic),
                opt(r.silhouette),
                opt(r.davies_bouldin),
                opt(r.mode_soft_mass),
                opt(r.chosen_v),
                opt(r.identity_v),
                r.validation_score,
                opt(r.e0_accuracy),
                r.cost_units
            );
        }
        out
    }
}

fn csv_header(columns: &str) -> String {
    format!("# schema_version={SCHEMA_VERSION}\n{columns}\n")
}

fn pca_csv(sigs: &[FailureSignature], labels: &[usize], proj: Option<&Projection>) -> String {
    let mut out = csv_header("instance_id,node_index,label,pc1,pc2");
    for (i, s) in sigs.iter().enumerate() {
        let [x, y] = proj.map_or([0.0, 0.0], |p| p.coords[i]);
        let label = labels.get(i).copied().unwrap_or(0);
        let _ = writeln!(out, "{},{},{label},{x},{y}", csv_field(&s.instance_id), s.structural_index);
    }
    out
}

fn pool_jsonl(pool: &[PoolEntry]) -> String {
    let mut out = String::new();
    for e in pool {
        out.push_str(&serde_json::to_string(e).expect("pool serialization is infallible"));
        out.push('\n');
    }
    out
}

pub fn read_pool(path: &Path) -> Result<Vec<PoolEntry>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| ReportError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    let io = |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

/// Writes the run report and every per-round artifact under `out`.
/// Returns the written paths in a fixed order.
pub fn emit_report(state: &OptimizationState, out: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let report = RunReport::from_state(state);
    let dim = state.hyperparams.dim;
    let mut files: Vec<(PathBuf, String)> = vec![
        (out.join("report.json"), report.to_json()),
        (out.join("graph_initial.json"), state.initial_graph.to_json() + "\n"),
        (out.join("graph_final.json"), state.graph.to_json() + "\n"),
        (out.join("e0_trajectory.csv"), report.e0_csv()),
        (out.join("cluster_metrics.csv"), report.metrics_csv()),
        (out.join("signatures/registry.json"), state.registry_json.clone() + "\n"),
    ];
    for (r, art) in state.rounds.iter().zip(&state.artifacts) {
        let tag = format!("round_{:02}", r.round);
        files.push((out.join(format!("pools/{tag}.jsonl")), pool_jsonl(&art.pool)));
        files.push((
            out.join(format!("signatures/{tag}.csv")),
            format!("# schema_version={SCHEMA_VERSION}\n{}", signatures_csv(&art.signatures, dim)),
        ));
        let data: Vec<Vec<f64>> = art.signatures.iter().map(|s| s.to_dense(art.width)).collect();
        let proj = pca_project(&data).ok();
        files.push((out.join(format!("pca/{tag}.csv")), pca_csv(&art.signatures, &art.labels, proj.as_ref())));
    }
    for (path, contents) in &files {
        write_file(path, contents)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Clustering of a saved pool, as produced by the `cluster` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolClustering {
    pub schema_version: u32,
    pub signatures: usize,
    pub undiagnosable: usize,
    pub model: Option<GaussianMixture>,
    pub mode: Option<ModeSummary>,
    pub mode_soft_mass: Option<f64>,
    pub quality: ClusterQuality,
    pub labels: Vec<usize>,
}

/// Rebuilds signatures from a pool and clusters them.
pub fn cluster_pool(
    pool: &[PoolEntry],
    hp: &Hyperparams,
    space: &mut SignatureSpace,
) -> (PoolClustering, Vec<FailureSignature>, Option<Projection>) {
    let mut sigs = Vec::new();
    let mut undiagnosable = 0;
    for e in pool {
        match e.diagnosis.diagnosis().map(|d| space.signature(&e.instance_id, d)) {
            Some(Ok(s)) => sigs.push(s),
            _ => undiagnosable += 1,
        }
    }
    let data = space.matrix(&sigs);
    let opts = GmmOptions {
        k_min: hp.k_min,
        k_max: hp.k_max,
        ..GmmOptions::default()
    };
    let mut out = PoolClustering {
        schema_version: SCHEMA_VERSION,
        signatures: sigs.len(),
        undiagnosable,
        model: None,
        mode: None,
        mode_soft_mass: None,
        quality: ClusterQuality::default(),
        labels: vec![0; sigs.len()],
    };
    if let Ok(fit) = fit_gmm(&data, &opts, seed::derive(hp.seed, "gmm")) {
        let sel = densest_mode(&fit.model, &data, &sigs).expect("dimensions match");
        out.quality = cluster_quality(&data, &sel.labels, None);
        out.mode = Some(sel.summary);
        out.mode_soft_mass = Some(sel.soft_mass);
        out.labels = sel.labels;
        out.model = Some(fit.model);
    }
    let proj = pca_project(&data).ok();
    (out, sigs, proj)
}

/// Writes the outputs of [`cluster_pool`] under `out`.
pub fn emit_cluster(
    result: &(PoolClustering, Vec<FailureSignature>, Option<Projection>),
    registry_json: &str,
    dim: usize,
    out: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    let (clust, sigs, proj) = result;
    let mut summary = serde_json::to_string_pretty(clust).expect("serializable");
    summary.push('\n');
    let files = vec![
        (out.join("clusters.json"), summary),
        (
            out.join("signatures.csv"),
            format!("# schema_version={SCHEMA_VERSION}\n{}", signatures_csv(sigs, dim)),
        ),
        (out.join("registry.json"), registry_json.to_string() + "\n"),
        (out.join("pca.csv"), pca_csv(sigs, &clust.labels, proj.as_ref())),
    ];
    for (p, c) in &files {
        write_file(p, c)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize) -> Vec<DatasetInstance> {
        (0..n).map(|i| DatasetInstance::new(format!("i{i}"), "x", "y")).collect()
    }

    #[test]
    fn split_counts() {
        let s = split_dataset(&data(10), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(&data(10), [0.8, 0.1, 0.1], 1).unwrap());
        assert!(s.validation.iter().all(|x| x.split == Some(Split::Validation)));
        assert!(matches!(split_dataset(&[], [0.8, 0.1, 0.1], 1), Err(ReportError::EmptyDataset)));
        assert!(matches!(split_dataset(&data(3), [0.8, 0.1, 0.2], 1), Err(ReportError::BadRatios(_))));
        // 7 instances: floor(0.7) = 0 each for validation and test.
        let s = split_dataset(&data(7), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 0, 0));
    }

    #[test]
    fn presplit_requires_all_labels() {
        let mut d = data(2);
        assert!(presplit(&d).is_none());
        d[0].split = Some(Split::Train);
        d[1].split = Some(Split::Test);
        let s = presplit(&d).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 1));
    }

    #[test]
    fn pca_on_a_line() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca_project(&pts).unwrap();
        assert!(p.coords.iter().all(|c| c[1].abs() < 1e-9));
        assert_eq!(p, pca_project(&pts).unwrap());
        // Largest-magnitude loading is on the second axis and positive, so the
        // last point projects positively.
        assert!(p.coords[9][0] > 0.0);
        let same = vec![vec![1.0, 1.0]; 4];
        assert!(pca_project(&same).unwrap().coords.iter().all(|c| *c == [0.0, 0.0]));
        assert!(matches!(pca_project(&same[..1]), Err(ReportError::InsufficientData(1))));
    }
}
