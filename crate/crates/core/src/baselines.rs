//! Clustering baselines and the loss-ablation grid.
//!
//! Baseline concept sets are fixed directions (k-means centroids or
//! principal axes) plus a context concept along the mean activation. A
//! decoder is fitted on top with the phase-1 objective so every method is
//! scored through the same metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::conceptnet::{ConceptModel, ConceptSet};
use crate::losses::{LossWeights, MaskSpec};
use crate::rng::{derived_rng, stream};
use crate::targets::{ActivationSet, Head};
use crate::trainer::{train_concepts, ConceptConfig, TrainOutcome};
use crate::{Error, Result};
use hiconcept_tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Kmeans,
    Pca,
    CorrelationalAblation,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Self::Kmeans),
            "pca" => Ok(Self::Pca),
            "correlational_ablation" => Ok(Self::CorrelationalAblation),
            other => Err(Error::Config(format!("unknown baseline method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub n_components: usize,
    pub beta_override: Option<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::Kmeans,
            n_components: 10,
            beta_override: None,
        }
    }
}

/// Lloyd's algorithm from `k` distinct seeded samples. Returns `[k, d]`
/// centroids (not normalized).
pub fn kmeans(data: &Tensor<f64>, k: usize, seed: u64, max_iter: usize) -> Result<Tensor<f64>> {
    let (m, d) = (data.shape()[0], data.shape()[1]);
    if k == 0 || k > m {
        return Err(Error::Invalid(format!("cannot form {k} clusters from {m} vectors")));
    }
    let mut rng = derived_rng(seed, stream::KMEANS);
    let mut init = sample(&mut rng, m, k).into_vec();
    init.sort_unstable();
    let mut cent = data.select_rows(&init);
    let mut assign = vec![usize::MAX; m];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let x = data.row(i);
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist: f64 = x.iter().zip(cent.row(c)).map(|(u, v)| (u - v) * (u - v)).sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if *a != best.1 {
                *a = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in cent.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    Ok(cent)
}

/// Principal axes of the mean-centered data.
#[derive(Debug, Clone)]
pub struct Pca {
    /// `[k, d]` unit rows, by decreasing variance.
    pub components: Tensor<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

pub fn pca(data: &Tensor<f64>, k: usize) -> Result<Pca> {
    let (m, d) = (data.shape()[0], data.shape()[1]);
    if m < 2 {
        return Err(Error::Invalid("pca needs at least 2 vectors".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for (a, v) in mean.iter_mut().zip(data.row(i)) {
            *a += v / m as f64;
        }
    }
    let centered = DMatrix::from_fn(m, d, |i, j| data.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > top * 1e-10 && eig.eigenvalues[i] > 0.0).count();
    if rank < k {
        return Err(Error::Invalid(format!(
            "activations have rank {rank}; cannot extract {k} principal directions"
        )));
    }
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comps = Vec::with_capacity(k * d);
    let mut var = Vec::with_capacity(k);
    for &i in &order[..k] {
        let col = eig.eigenvectors.column(i);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = (0..d).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a))).unwrap();
        let s = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        comps.extend(col.iter().map(|v| v * s));
        var.push(eig.eigenvalues[i]);
    }
    Ok(Pca {
        components: Tensor::new(&[k, d], comps).expect("pca shape"),
        explained_variance_ratio: var.iter().map(|v| v / total).collect(),
        explained_variance: var,
    })
}

/// All stored activation rows (every token at token-level splits) as `[M, d]`.
pub fn activation_rows(acts: &ActivationSet) -> Tensor<f64> {
    let mut data = Vec::new();
    for i in 0..acts.len() {
        data.extend_from_slice(acts.sample(i));
    }
    let m = data.len() / acts.width;
    Tensor::new(&[m, acts.width], data).expect("activation rows")
}

/// Baseline concept directions plus a mean-direction context concept.
pub fn discover_baseline_concepts(method: BaselineMethod, acts: &ActivationSet, cfg: &BaselineConfig, seed: u64) -> Result<ConceptSet> {
    let n = cfg.n_components;
    if n < 2 {
        return Err(Error::Config(format!("n_components must be at least 2, got {n}")));
    }
    let rows = activation_rows(acts);
    let m = rows.shape()[0];
    if m < 10 * n {
        return Err(Error::Invalid(format!("need at least {} activation vectors, have {m}", 10 * n)));
    }
    let dirs = match method {
        BaselineMethod::Kmeans => kmeans(&rows, n, seed, 100)?,
        BaselineMethod::Pca => pca(&rows, n)?.components,
        BaselineMethod::CorrelationalAblation => {
            return Err(Error::Invalid(
                "correlational_ablation is a loss configuration; use make_ablation_config".into(),
            ))
        }
    };
    let d = acts.width;
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for (a, v) in mean.iter_mut().zip(rows.row(i)) {
            *a += v / m as f64;
        }
    }
    let mut data = dirs.into_data();
    data.extend(mean);
    ConceptSet::new(Tensor::new(&[n + 1, d], data).expect("concept shape"), cfg.beta_override)
}

/// Discover baseline concepts and fit a decoder on them with phase-1 losses.
pub fn fit_baseline(head: &dyn Head, acts: &ActivationSet, cfg: &BaselineConfig, train: &ConceptConfig) -> Result<TrainOutcome> {
    let seed = train.schedule.seed;
    let cs = discover_baseline_concepts(cfg.method, acts, cfg, seed)?;
    let mut model = ConceptModel::new(&cs, head.split(), train.hidden, seed)?;
    model.meta = serde_json::json!({ "method": cfg.method });
    let mut tc = train.clone();
    tc.n = cs.n();
    tc.beta = Some(cs.beta);
    tc.freeze_concepts = true;
    tc.weights.lambda_c = 0.0;
    tc.schedule.causal_on_epoch = Some(tc.schedule.epochs);
    train_concepts(model, head, acts, &tc)
}

pub const ABLATIONS: [&str; 6] = ["no_enc", "no_rec", "no_reg", "no_cau", "conceptshap_mode", "full"];

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub name: String,
    pub weights: LossWeights,
    pub mask: MaskSpec,
    pub beta: Option<f64>,
    /// Whether the reconstruction term is kept.
    pub use_rec: bool,
}

pub fn make_ablation_config(name: &str) -> Result<AblationConfig> {
    let base = LossWeights::default();
    let mut cfg = AblationConfig {
        name: name.to_string(),
        weights: base,
        mask: MaskSpec::default(),
        beta: None,
        use_rec: true,
    };
    match name {
        "full" => {}
        "no_enc" => cfg.weights.lambda_e = 0.0,
        "no_rec" => cfg.use_rec = false,
        "no_reg" => {
            cfg.weights.lambda1 = 0.0;
            cfg.weights.lambda2 = 0.0;
        }
        "no_cau" => cfg.weights.lambda_c = 0.0,
        "conceptshap_mode" => {
            cfg.weights.lambda_e = 0.0;
            cfg.weights.lambda_c = 0.0;
            cfg.beta = Some(0.3);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation '{other}' (expected one of {})",
                ABLATIONS.join(", ")
            )))
        }
    }
    Ok(cfg)
}

impl AblationConfig {
    /// Apply this row to a base training config.
    pub fn apply(&self, base: &ConceptConfig) -> ConceptConfig {
        let mut c = base.clone();
        c.weights = self.weights;
        c.mask = self.mask;
        if self.beta.is_some() {
            c.beta = self.beta;
        }
        c.use_rec = self.use_rec;
        c
    }
}
