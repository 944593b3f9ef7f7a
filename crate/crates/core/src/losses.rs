//! Training objectives for the concept model.
//!
//! Graph builders (`*_var`) are used by the trainer and the gradient tests;
//! the plain functions evaluate the same graphs on fixed inputs.

use hiconcept_tensor::{Bound, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::conceptnet::{normalize_rows, ConceptModel, ConceptSet};
use crate::targets::{ActivationBatch, Head};
use crate::{Error, Result};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_e: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.5,
            lambda_e: 1.0,
            lambda_c: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_e", self.lambda_e),
            ("lambda_c", self.lambda_c),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub per_concept_probability: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            per_concept_probability: 0.2,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.per_concept_probability;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("mask probability {p} outside (0, 1]")));
        }
        Ok(())
    }
}

/// The four loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub reg: f64,
    pub enc: f64,
    pub cau: f64,
}

/// `rec + reg + lambda_e * enc + lambda_c * cau`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (k, v) in [("rec", parts.rec), ("reg", parts.reg), ("enc", parts.enc), ("cau", parts.cau)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("loss term {k} is {v}")));
        }
    }
    Ok(parts.rec + parts.reg + w.lambda_e * parts.enc + w.lambda_c * parts.cau)
}

/// Flattened positions of a batch that hold real (non-padded, non-zero) activations.
fn valid_rows(acts: &ActivationBatch<f64>) -> Vec<usize> {
    let d = acts.values.last_dim();
    acts.values
        .data()
        .chunks(d)
        .enumerate()
        .filter(|(r, row)| {
            let unmasked = acts.mask.as_ref().is_none_or(|m| m.data()[*r] != 0.0);
            unmasked && row.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-12
        })
        .map(|(r, _)| r)
        .collect()
}

/// Neighborhood size for a batch: `fraction` of its valid positions, at least 1.
pub fn neighborhood_size(acts: &ActivationBatch<f64>, fraction: f64) -> usize {
    ((valid_rows(acts).len() as f64 * fraction).floor() as usize).max(1)
}

/// For each concept, the `top_n` valid positions (flattened index) with the
/// highest cosine to it; ties go to the lower position.
pub fn concept_neighborhood(acts: &ActivationBatch<f64>, cs: &ConceptSet, top_n: usize) -> Result<Vec<Vec<usize>>> {
    neighborhood_of(acts, &normalize_rows(&cs.vectors), top_n)
}

fn neighborhood_of(acts: &ActivationBatch<f64>, cn: &Tensor<f64>, top_n: usize) -> Result<Vec<Vec<usize>>> {
    if top_n == 0 {
        return Err(Error::Invalid("neighborhood size must be positive".into()));
    }
    let valid = valid_rows(acts);
    if top_n > valid.len() {
        return Err(Error::Invalid(format!(
            "neighborhood size {top_n} exceeds {} valid positions",
            valid.len()
        )));
    }
    let d = acts.values.last_dim();
    let an: Vec<Vec<f64>> = valid
        .iter()
        .map(|&r| {
            let row = &acts.values.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(cn.shape()[0]);
    for i in 0..cn.shape()[0] {
        let c = cn.row(i);
        let mut sims: Vec<(f64, usize)> = an
            .iter()
            .zip(&valid)
            .map(|(a, &r)| (a.iter().zip(c).map(|(x, y)| x * y).sum(), r))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        out.push(sims[..top_n].iter().map(|s| s.1).collect());
    }
    Ok(out)
}

/// Soft-target cross-entropy, averaged over samples and heads.
pub fn loss_rec_var(g: &mut Graph<f64>, surrogate: Var, original: &Tensor<f64>) -> Var {
    let s = g.shape(surrogate).to_vec();
    let norm = s[..s.len() - 1].iter().product::<usize>() as f64;
    let lq = g.clamp_log(surrogate, LOG_FLOOR);
    let w = g.mul_const(lq, original.clone());
    let t = g.sum(w);
    g.scale(t, -1.0 / norm)
}

/// Neighborhood alignment and pairwise distinctness of the concept vectors.
pub fn loss_reg_var(
    g: &mut Graph<f64>,
    concepts: Var,
    acts: &ActivationBatch<f64>,
    w: &LossWeights,
    top_n: usize,
) -> Result<Var> {
    let n = g.shape(concepts)[0];
    let d = acts.values.last_dim();
    let rows = acts.values.len() / d;
    let cn = g.l2_normalize(concepts);
    let cn_val = g.value(cn).clone();
    let hood = neighborhood_of(acts, &cn_val, top_n)?;
    let mut sel = Tensor::zeros(&[rows, n]);
    for (i, r) in hood.iter().enumerate() {
        for &p in r {
            sel.data_mut()[p * n + i] = 1.0;
        }
    }
    let flat = acts.values.clone().reshape(&[rows, d]).expect("flatten activations");
    let a = g.constant(flat);
    let an = g.l2_normalize(a);
    let sim = g.matmul_t(an, cn, false, true);
    let picked = g.mul_const(sim, sel);
    let near = g.sum(picked);
    let near = g.scale(near, -w.lambda1 / (n * top_n) as f64);
    let gram = g.matmul_t(cn, cn, false, true);
    let off = Tensor::from_fn(&[n, n], |k| if k / n == k % n { 0.0 } else { 1.0 });
    let gram = g.mul_const(gram, off);
    let dist = g.sum(gram);
    let dist = g.scale(dist, w.lambda2 / (n * (n - 1)) as f64);
    Ok(g.add(near, dist))
}

/// Squared reconstruction error over the width, divided by `d`, averaged
/// over valid positions.
pub fn loss_enc_var(g: &mut Graph<f64>, recon: Var, acts: &ActivationBatch<f64>) -> Var {
    let d = acts.values.last_dim();
    let a = g.constant(acts.values.clone());
    let diff = g.sub(recon, a);
    let (diff, count) = match &acts.mask {
        Some(m) => {
            let mm = m.data();
            let expanded = Tensor::from_fn(acts.values.shape(), |k| mm[k / d]);
            (g.mul_const(diff, expanded), mm.iter().sum::<f64>())
        }
        None => (diff, (acts.values.len() / d) as f64),
    };
    let sq = g.square(diff);
    let t = g.sum(sq);
    g.scale(t, 1.0 / (d as f64 * count.max(1.0)))
}

/// Concepts to remove this step: each non-context candidate independently
/// with the configured probability.
pub fn select_mask_set(spec: &MaskSpec, n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    (0..n.saturating_sub(1))
        .filter(|_| rng.random::<f64>() < spec.per_concept_probability)
        .collect()
}

/// Negative mean L1 change of the head output when each concept in `set` is
/// zeroed, normalized by `|S| * B * K`.
///
/// `p` is the concept probability node and `base` the unperturbed output
/// from the same graph; `keep` is the model's decode mask.
#[allow(clippy::too_many_arguments)]
pub fn loss_cau_var(
    g: &mut Graph<f64>,
    model: &ConceptModel,
    bound: &Bound,
    head: &dyn Head,
    p: Var,
    base: Var,
    mask: Option<&Tensor<f64>>,
    keep: &[f64],
    set: &[usize],
) -> Var {
    if set.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let s = set.len();
    let ps = g.shape(p).to_vec();
    let n = keep.len();
    let per = ps.iter().product::<usize>();
    let mut shape = ps.clone();
    shape[0] *= s;
    let colmask = Tensor::from_fn(&shape, |k| {
        let block = k / per;
        let col = k % n;
        if col == set[block] {
            0.0
        } else {
            keep[col]
        }
    });
    let tiled = g.tile_rows(p, s);
    let pm = g.mul_const(tiled, colmask);
    let recon = model.decode_var(g, bound, pm);
    let tmask = mask.map(|m| {
        let parts: Vec<&Tensor<f64>> = std::iter::repeat_n(m, s).collect();
        Tensor::concat_rows(&parts)
    });
    let out = head.forward(g, recon, tmask.as_ref());
    let base_t = g.tile_rows(base, s);
    let diff = g.sub(out, base_t);
    let ad = g.abs(diff);
    let t = g.sum(ad);
    let os = g.shape(base).to_vec();
    g.scale(t, -1.0 / (s * os[0] * os[1]) as f64)
}

/// Evaluate [`loss_rec_var`] on tensors.
pub fn loss_rec(surrogate: &Tensor<f64>, original: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(surrogate.clone());
    let l = loss_rec_var(&mut g, s, original);
    g.value(l).item()
}

/// Evaluate [`loss_reg_var`] on tensors.
pub fn loss_reg(acts: &ActivationBatch<f64>, cs: &ConceptSet, w: &LossWeights, top_n: usize) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(cs.vectors.clone());
    let l = loss_reg_var(&mut g, c, acts, w, top_n)?;
    Ok(g.value(l).item())
}

/// Evaluate [`loss_enc_var`] on tensors.
pub fn loss_enc(recon: &Tensor<f64>, acts: &ActivationBatch<f64>) -> f64 {
    let mut g = Graph::new();
    let r = g.constant(recon.clone());
    let l = loss_enc_var(&mut g, r, acts);
    g.value(l).item()
}

/// Evaluate [`loss_cau_var`] for a concept model on one batch.
pub fn loss_cau(model: &ConceptModel, head: &dyn Head, acts: &ActivationBatch<f64>, set: &[usize]) -> Result<f64> {
    let n = model.n();
    if let Some(&bad) = set.iter().find(|&&i| i >= n) {
        return Err(Error::Invalid(format!("concept index {bad} out of range for {n} concepts")));
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let a = g.constant(acts.values.clone());
    let keep = model.decode_keep(&[]);
    let v = model.forward_vars(&mut g, &bound, head, a, acts.mask.as_ref(), &keep);
    let l = loss_cau_var(&mut g, model, &bound, head, v.p, v.out, acts.mask.as_ref(), &keep, set);
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn batch(rows: &[[f64; 2]]) -> ActivationBatch<f64> {
        ActivationBatch {
            values: Tensor::new(&[rows.len(), 2], rows.concat()).unwrap(),
            mask: None,
        }
    }

    fn two_concepts() -> ConceptSet {
        ConceptSet::new(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), None).unwrap()
    }

    #[test]
    fn neighborhood_ranks_by_cosine_with_low_index_ties() {
        let cs = two_concepts();
        let n = (0.9f64 * 0.9 + 0.1 * 0.1).sqrt();
        let a = batch(&[[1.0, 0.0], [0.0, 1.0], [0.9 / n, 0.1 / n], [-1.0, 0.0]]);
        let r = concept_neighborhood(&a, &cs, 2).unwrap();
        assert_eq!(r[0], vec![0, 2]);
        let all = concept_neighborhood(&a, &cs, 4).unwrap();
        assert_eq!(all[0].len(), 4);
        let tie = batch(&[[0.0, 1.0], [0.0, 1.0], [1.0, 1.0], [0.0, 1.0], [0.0, 1.0], [1.0, 1.0]]);
        assert_eq!(concept_neighborhood(&tie, &cs, 1).unwrap()[0], vec![2]);
        assert!(concept_neighborhood(&a, &cs, 0).is_err());
        assert!(concept_neighborhood(&a, &cs, 5).is_err());
    }

    #[test]
    fn rec_values() {
        let oh = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert!(loss_rec(&oh, &oh).abs() < 1e-15);
        let half = Tensor::new(&[1, 1, 2], vec![0.5, 0.5]).unwrap();
        assert!((loss_rec(&half, &half) - 2f64.ln()).abs() < 1e-12);
        let bad = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert!((loss_rec(&bad, &oh) - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn reg_values() {
        let w = LossWeights::default();
        let a = batch(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]]);
        assert!((loss_reg(&a, &two_concepts(), &w, 2).unwrap() + 0.1).abs() < 1e-12);
        let same = ConceptSet::new(Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(), None).unwrap();
        let zero_l1 = LossWeights { lambda1: 0.0, ..w };
        assert!((loss_reg(&a, &same, &zero_l1, 2).unwrap() - 0.5).abs() < 1e-12);
        let none = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..w
        };
        assert_eq!(loss_reg(&a, &same, &none, 2).unwrap(), 0.0);
    }

    #[test]
    fn enc_values() {
        let a = batch(&[[1.0, 0.0]]);
        assert_eq!(loss_enc(&a.values, &a), 0.0);
        assert!((loss_enc(&Tensor::zeros(&[1, 2]), &a) - 0.5).abs() < 1e-15);
        let r2 = Tensor::new(&[1, 2], vec![-1.0, 0.0]).unwrap();
        assert!((loss_enc(&r2, &a) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn enc_ignores_padding() {
        let a = ActivationBatch {
            values: Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            mask: Some(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap()),
        };
        let r = Tensor::new(&[1, 2, 2], vec![0.0, 0.0, 5.0, 5.0]).unwrap();
        assert!((loss_enc(&r, &a) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mask_selection() {
        let all = MaskSpec {
            per_concept_probability: 1.0,
        };
        assert_eq!(select_mask_set(&all, 5, &mut rng(0)), vec![0, 1, 2, 3]);
        let spec = MaskSpec::default();
        let mut r = rng(7);
        let mut total = 0usize;
        for _ in 0..10_000 {
            let s = select_mask_set(&spec, 11, &mut r);
            assert!(!s.contains(&10));
            total += s.len();
        }
        let mean = total as f64 / 10_000.0;
        assert!((mean - 2.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn total_is_weighted_sum() {
        let p = LossParts {
            rec: 1.0,
            reg: -0.1,
            enc: 0.5,
            cau: -0.2,
        };
        assert!((total_loss(&p, &LossWeights::default()).unwrap() - 1.2).abs() < 1e-12);
        let w = LossWeights {
            lambda_e: 0.0,
            lambda_c: 0.0,
            ..Default::default()
        };
        assert!((total_loss(&p, &w).unwrap() - 0.9).abs() < 1e-12);
        let nan = LossParts { enc: f64::NAN, ..p };
        assert!(total_loss(&nan, &w).is_err());
    }
}
