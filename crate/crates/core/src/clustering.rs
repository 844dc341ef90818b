//! Diagonal-covariance Gaussian mixtures over signature vectors, BIC model
//! selection, densest-mode selection and cluster-quality metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::signature::{tokenize, FailureSignature};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("need at least 2 points to fit a mixture, got {0}")]
    InsufficientData(usize),
    #[error("dimension mismatch: model has {expected}, data has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid component range [{0}, {1}]")]
    InvalidRange(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub components: Vec<Component>,
    pub k_fit: usize,
    pub loglik: f64,
    pub bic: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub var_floor: f64,
    pub max_iter: usize,
    /// Convergence threshold on the change in mean per-point log-likelihood.
    pub tol: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            k_min: 1,
            k_max: 10,
            var_floor: 1e-6,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

/// The selected model plus per-k diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub model: GaussianMixture,
    /// `(k, bic)` for every k tried, in increasing k.
    pub bic_by_k: Vec<(usize, f64)>,
    /// Log-likelihood after every EM iteration of the selected model.
    pub loglik_history: Vec<f64>,
}

impl GaussianMixture {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    /// Free parameters of a diagonal mixture: means, variances and k-1 weights.
    pub fn n_params(k: usize, dim: usize) -> usize {
        2 * k * dim + (k - 1)
    }

    fn check_dim(&self, data: &[Vec<f64>]) -> Result<(), ClusterError> {
        let expected = self.dim();
        match data.iter().find(|x| x.len() != expected) {
            Some(x) => Err(ClusterError::DimensionMismatch {
                expected,
                found: x.len(),
            }),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mixture serialization is infallible")
    }
}

/// Per-component constants hoisted out of the per-point loop.
struct Prepared<'a> {
    gmm: &'a GaussianMixture,
    /// `ln π_k - ½ Σ ln(2π σ²)`.
    log_norm: Vec<f64>,
    inv_var: Vec<Vec<f64>>,
}

impl<'a> Prepared<'a> {
    fn new(gmm: &'a GaussianMixture) -> Self {
        let log_norm = gmm
            .components
            .iter()
            .map(|c| c.weight.ln() - 0.5 * c.variances.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>())
            .collect();
        let inv_var = gmm
            .components
            .iter()
            .map(|c| c.variances.iter().map(|v| 1.0 / v).collect())
            .collect();
        Prepared { gmm, log_norm, inv_var }
    }

    fn log_joint_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, c), ln), iv) in out.iter_mut().zip(&self.gmm.components).zip(&self.log_norm).zip(&self.inv_var) {
            let mut q = 0.0;
            for ((xi, mi), w) in x.iter().zip(&c.mean).zip(iv) {
                let d = xi - mi;
                q += d * d * w;
            }
            *o = ln - 0.5 * q;
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior `p(component | x)` for every row.
pub fn responsibilities(gmm: &GaussianMixture, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ClusterError> {
    gmm.check_dim(data)?;
    let prep = Prepared::new(gmm);
    Ok(data
        .iter()
        .map(|x| {
            let mut r = vec![0.0; gmm.components.len()];
            prep.log_joint_into(x, &mut r);
            let lse = log_sum_exp(&r);
            r.iter_mut().for_each(|l| *l = (*l - lse).exp());
            r
        })
        .collect())
}

/// k-means++ seeding: first center uniform, later ones proportional to
/// squared distance from the nearest chosen center.
fn kmeanspp(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        let c = data[pick].clone();
        for (di, x) in d2.iter_mut().zip(data) {
            *di = di.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// EM for one fixed k. Returns the model and its log-likelihood history.
pub fn fit_fixed_k(data: &[Vec<f64>], k: usize, opts: &GmmOptions, seed: u64) -> (GaussianMixture, Vec<f64>) {
    let n = data.len();
    let dim = data[0].len();
    let mut rng = seed::rng(seed);
    let global_mean: Vec<f64> = (0..dim).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    let global_var: Vec<f64> = (0..dim)
        .map(|j| {
            let v = data.iter().map(|x| (x[j] - global_mean[j]).powi(2)).sum::<f64>() / n as f64;
            v.max(opts.var_floor)
        })
        .collect();
    let mut gmm = GaussianMixture {
        components: kmeanspp(data, k, &mut rng)
            .into_iter()
            .map(|mean| Component {
                mean,
                variances: global_var.clone(),
                weight: 1.0 / k as f64,
            })
            .collect(),
        k_fit: k,
        loglik: f64::NEG_INFINITY,
        bic: f64::INFINITY,
    };

    let mut history = Vec::new();
    let mut resp = vec![vec![0.0; k]; n];
    for _ in 0..opts.max_iter {
        // E-step.
        let mut ll = 0.0;
        {
            let prep = Prepared::new(&gmm);
            for (x, r) in data.iter().zip(resp.iter_mut()) {
                prep.log_joint_into(x, r);
                let lse = log_sum_exp(r);
                r.iter_mut().for_each(|l| *l = (*l - lse).exp());
                ll += lse;
            }
        }
        let prev = history.last().copied();
        history.push(ll);
        if prev.is_some_and(|p: f64| ((ll - p) / n as f64).abs() < opts.tol) {
            break;
        }
        // M-step: weights and means in one pass, variances in a second.
        let mut nk = vec![0.0; k];
        let mut means = vec![vec![0.0; dim]; k];
        for (x, r) in data.iter().zip(&resp) {
            for ((n_c, m), &rc) in nk.iter_mut().zip(means.iter_mut()).zip(r) {
                *n_c += rc;
                for (mi, xi) in m.iter_mut().zip(x) {
                    *mi += rc * xi;
                }
            }
        }
        for (m, &n_c) in means.iter_mut().zip(&nk) {
            if n_c > f64::MIN_POSITIVE {
                m.iter_mut().for_each(|mi| *mi /= n_c);
            }
        }
        let mut vars = vec![vec![0.0; dim]; k];
        for (x, r) in data.iter().zip(&resp) {
            for ((v, m), &rc) in vars.iter_mut().zip(&means).zip(r) {
                for ((vi, xi), mi) in v.iter_mut().zip(x).zip(m) {
                    *vi += rc * (xi - mi) * (xi - mi);
                }
            }
        }
        for (c, comp) in gmm.components.iter_mut().enumerate() {
            comp.weight = nk[c] / n as f64;
            if nk[c] <= f64::MIN_POSITIVE {
                continue;
            }
            comp.mean = std::mem::take(&mut means[c]);
            comp.variances = vars[c].iter().map(|v| (v / nk[c]).max(opts.var_floor)).collect();
        }
    }
    // Final likelihood of the returned parameters.
    let prep = Prepared::new(&gmm);
    let mut buf = vec![0.0; k];
    let ll: f64 = data
        .iter()
        .map(|x| {
            prep.log_joint_into(x, &mut buf);
            log_sum_exp(&buf)
        })
        .sum();
    if history.last() != Some(&ll) {
        history.push(ll);
    }
    gmm.loglik = ll;
    gmm.bic = -2.0 * ll + GaussianMixture::n_params(k, dim) as f64 * (n as f64).ln();
    (gmm, history)
}

/// Fits every k in `[k_min, k_max] ∩ [1, n]` and keeps the lowest BIC
/// (ties go to the smaller k).
pub fn fit_gmm(data: &[Vec<f64>], opts: &GmmOptions, seed: u64) -> Result<GmmFit, ClusterError> {
    let n = data.len();
    if n < 2 {
        return Err(ClusterError::InsufficientData(n));
    }
    let dim = data[0].len();
    if let Some(x) = data.iter().find(|x| x.len() != dim) {
        return Err(ClusterError::DimensionMismatch {
            expected: dim,
            found: x.len(),
        });
    }
    let k_lo = opts.k_min.max(1);
    let k_hi = opts.k_max.min(n);
    if k_lo > k_hi {
        return Err(ClusterError::InvalidRange(opts.k_min, opts.k_max));
    }
    let fits: Vec<(GaussianMixture, Vec<f64>)> = (k_lo..=k_hi)
        .into_par_iter()
        .map(|k| fit_fixed_k(data, k, opts, seed::derive_index(seed, k as u64)))
        .collect();
    let mut best: Option<(GaussianMixture, Vec<f64>)> = None;
    let mut bic_by_k = Vec::new();
    for (model, hist) in fits {
        bic_by_k.push((model.k_fit, model.bic));
        if best.as_ref().is_none_or(|(b, _)| model.bic < b.bic) {
            best = Some((model, hist));
        }
    }
    let (model, loglik_history) = best.expect("range is nonempty");
    Ok(GmmFit {
        model,
        bic_by_k,
        loglik_history,
    })
}

/// Deterministic description of a mode, used as the proposer's input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub node_id: String,
    pub structural_index: usize,
    pub top_tokens: Vec<String>,
    pub size: usize,
}

impl ModeSummary {
    pub fn from_members(members: &[&FailureSignature]) -> Self {
        let mut by_index: BTreeMap<usize, (usize, &str)> = BTreeMap::new();
        let mut tokens: BTreeMap<String, usize> = BTreeMap::new();
        for s in members {
            by_index.entry(s.structural_index).or_insert((0, s.node_id.as_str())).0 += 1;
            for t in tokenize(&s.message) {
                *tokens.entry(t).or_default() += 1;
            }
        }
        // Modal node; BTreeMap order makes ties go to the lowest index.
        let (structural_index, node_id) = by_index
            .iter()
            .fold(None::<(usize, usize, &str)>, |acc, (&i, &(c, id))| match acc {
                Some((_, best, _)) if best >= c => acc,
                _ => Some((i, c, id)),
            })
            .map(|(i, _, id)| (i, id.to_string()))
            .unwrap_or_default();
        let mut ranked: Vec<(String, usize)> = tokens.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ModeSummary {
            node_id,
            structural_index,
            top_tokens: ranked.into_iter().take(5).map(|(t, _)| t).collect(),
            size: members.len(),
        }
    }

    pub fn text(&self) -> String {
        format!(
            "node={}; top_tokens={}; size={}",
            self.node_id,
            self.top_tokens.join(","),
            self.size
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSelection {
    pub mode_index: usize,
    pub soft_mass: f64,
    /// Indices into the signature list, hard-assigned by max responsibility.
    pub members: Vec<usize>,
    pub summary: ModeSummary,
    /// Hard label of every signature.
    pub labels: Vec<usize>,
}

impl ModeSelection {
    /// Degenerate selection when there is only one signature to target.
    pub fn single(sig: &FailureSignature) -> Self {
        ModeSelection {
            mode_index: 0,
            soft_mass: 1.0,
            members: vec![0],
            summary: ModeSummary::from_members(&[sig]),
            labels: vec![0],
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The component with the largest summed responsibility (lowest index on ties).
pub fn densest_mode(
    gmm: &GaussianMixture,
    data: &[Vec<f64>],
    sigs: &[FailureSignature],
) -> Result<ModeSelection, ClusterError> {
    let resp = responsibilities(gmm, data)?;
    let mut mass = vec![0.0; gmm.components.len()];
    for r in &resp {
        for (m, p) in mass.iter_mut().zip(r) {
            *m += p;
        }
    }
    let mode_index = argmax(&mass);
    let labels: Vec<usize> = resp.iter().map(|r| argmax(r)).collect();
    let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == mode_index).collect();
    if members.is_empty() {
        let closest = (0..resp.len())
            .map(|i| resp[i][mode_index])
            .collect::<Vec<_>>();
        members.push(argmax(&closest));
    }
    let member_sigs: Vec<&FailureSignature> = members.iter().map(|&i| &sigs[i]).collect();
    Ok(ModeSelection {
        mode_index,
        soft_mass: mass[mode_index],
        summary: ModeSummary::from_members(&member_sigs),
        members,
        labels,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    /// `None` when fewer than two clusters are present.
    pub silhouette: Option<f64>,
    pub davies_bouldin: Option<f64>,
    pub ari: Option<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn groups(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(i);
    }
    g
}

/// Mean silhouette; singleton clusters contribute 0.
pub fn silhouette(data: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let g = groups(labels);
    if g.len() < 2 {
        return None;
    }
    let total: f64 = (0..data.len())
        .map(|i| {
            let own = &g[&labels[i]];
            if own.len() == 1 {
                return 0.0;
            }
            let a = own.iter().filter(|&&j| j != i).map(|&j| dist(&data[i], &data[j])).sum::<f64>()
                / (own.len() - 1) as f64;
            let b = g
                .iter()
                .filter(|(l, _)| **l != labels[i])
                .map(|(_, m)| m.iter().map(|&j| dist(&data[i], &data[j])).sum::<f64>() / m.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .sum();
    Some(total / data.len() as f64)
}

/// Davies-Bouldin index; `None` with fewer than two clusters or coincident centroids.
pub fn davies_bouldin(data: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let g = groups(labels);
    if g.len() < 2 {
        return None;
    }
    let dim = data[0].len();
    let (cents, scatter): (Vec<Vec<f64>>, Vec<f64>) = g
        .values()
        .map(|m| {
            let c: Vec<f64> = (0..dim)
                .map(|j| m.iter().map(|&i| data[i][j]).sum::<f64>() / m.len() as f64)
                .collect();
            let s = m.iter().map(|&i| dist(&data[i], &c)).sum::<f64>() / m.len() as f64;
            (c, s)
        })
        .unzip();
    let k = cents.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in (0..k).filter(|&j| j != i) {
            let d = dist(&cents[i], &cents[j]);
            if d == 0.0 {
                return None;
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Some(total / k as f64)
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

pub fn cluster_quality(data: &[Vec<f64>], labels: &[usize], reference: Option<&[usize]>) -> ClusterQuality {
    ClusterQuality {
        silhouette: silhouette(data, labels),
        davies_bouldin: davies_bouldin(data, labels),
        ari: reference.map(|r| adjusted_rand_index(labels, r)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[(f64, f64)], sizes: &[usize], seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, (&(x, y), &s)) in centers.iter().zip(sizes).enumerate() {
            for _ in 0..s {
                data.push(vec![x + n.sample(&mut rng), y + n.sample(&mut rng)]);
                labels.push(c);
            }
        }
        (data, labels)
    }

    #[test]
    fn two_blobs_are_recovered() {
        let (data, _) = blobs(&[(0.0, 0.0), (10.0, 0.0)], &[100, 100], 1);
        let opts = GmmOptions {
            k_max: 5,
            ..GmmOptions::default()
        };
        let fit = fit_gmm(&data, &opts, 7).unwrap();
        assert_eq!(fit.model.k_fit, 2);
        let mut means: Vec<&Vec<f64>> = fit.model.components.iter().map(|c| &c.mean).collect();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!(means[0][0].abs() < 0.3 && means[0][1].abs() < 0.3);
        assert!((means[1][0] - 10.0).abs() < 0.3 && means[1][1].abs() < 0.3);
        let w: f64 = fit.model.components.iter().map(|c| c.weight).sum();
        assert!((w - 1.0).abs() < 1e-9);
        for pair in fit.loglik_history.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "EM decreased: {pair:?}");
        }
    }

    #[test]
    fn identical_points_fit_one_floored_component() {
        let data = vec![vec![1.0, 2.0, 3.0]; 20];
        let fit = fit_gmm(&data, &GmmOptions::default(), 0).unwrap();
        assert_eq!(fit.model.k_fit, 1);
        assert!(fit.model.components[0].variances.iter().all(|&v| v == 1e-6));
    }

    #[test]
    fn fitting_is_deterministic() {
        let (data, _) = blobs(&[(0.0, 0.0), (5.0, 5.0), (-5.0, 5.0)], &[30, 20, 10], 3);
        let a = fit_gmm(&data, &GmmOptions::default(), 11).unwrap();
        let b = fit_gmm(&data, &GmmOptions::default(), 11).unwrap();
        assert_eq!(a.model.to_json(), b.model.to_json());
        assert!(a.model.k_fit <= data.len());
    }

    #[test]
    fn too_few_points() {
        assert_eq!(
            fit_gmm(&[vec![0.0]], &GmmOptions::default(), 0).unwrap_err(),
            ClusterError::InsufficientData(1)
        );
    }

    #[test]
    fn responsibilities_limits() {
        let one = GaussianMixture {
            components: vec![Component {
                mean: vec![0.0],
                variances: vec![1.0],
                weight: 1.0,
            }],
            k_fit: 1,
            loglik: 0.0,
            bic: 0.0,
        };
        for r in responsibilities(&one, &[vec![3.0], vec![-50.0]]).unwrap() {
            assert_eq!(r, vec![1.0]);
        }
        let mut two = one.clone();
        two.components[0].weight = 0.5;
        two.components.push(Component {
            mean: vec![100.0],
            variances: vec![1.0],
            weight: 0.5,
        });
        let r = responsibilities(&two, &[vec![100.0]]).unwrap();
        assert!(r[0][1] >= 0.999);
        assert!(matches!(
            responsibilities(&two, &[vec![1.0, 2.0]]),
            Err(ClusterError::DimensionMismatch { expected: 1, found: 2 })
        ));
    }

    fn sig(node: &str, idx: usize, msg: &str) -> FailureSignature {
        FailureSignature {
            instance_id: String::new(),
            node_id: node.into(),
            message: msg.into(),
            structural_index: idx,
            structural_weight: 1.0,
            semantic: vec![],
        }
    }

    #[test]
    fn summary_text_is_fixed_format() {
        let a = sig("B", 1, "sum was incorrect");
        let b = sig("B", 1, "the sum was wrong");
        let c = sig("A", 0, "zeta");
        let s = ModeSummary::from_members(&[&a, &b, &c]);
        assert_eq!(s.text(), "node=B; top_tokens=sum,was,incorrect,the,wrong; size=3");
        let tie = ModeSummary::from_members(&[&c, &a]);
        assert_eq!(tie.node_id, "A");
    }

    #[test]
    fn quality_metrics() {
        let (data, labels) = blobs(&[(0.0, 0.0), (20.0, 0.0)], &[50, 50], 5);
        let q = cluster_quality(&data, &labels, Some(&labels));
        assert!(q.silhouette.unwrap() > 0.9);
        assert!(q.davies_bouldin.unwrap() < 0.2);
        assert_eq!(q.ari, Some(1.0));
        let one = vec![0; data.len()];
        let q = cluster_quality(&data, &one, None);
        assert_eq!((q.silhouette, q.davies_bouldin, q.ari), (None, None, None));
        // ARI is invariant to relabeling.
        let swapped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        assert_eq!(adjusted_rand_index(&labels, &swapped), 1.0);
    }
}
