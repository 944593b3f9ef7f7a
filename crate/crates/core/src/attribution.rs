//! Mapping concepts back to input tokens.
//!
//! `grad_input` scores token `t` by `sum_k |dp/de_tk * e_tk|` where `e_t`
//! is its embedding and `p` the sample-level probability of the concept.
//! `token_similarity` uses the per-token concept probability directly and
//! needs a token-level split.

use hiconcept_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::conceptnet::ConceptModel;
use crate::targets::{token_batch, ActivationBatch, Batch, Granularity, SplitEncoder, SplitPoint};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GradInput,
    TokenSimilarity,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad_input" => Ok(Method::GradInput),
            "token_similarity" => Ok(Method::TokenSimilarity),
            other => Err(Error::Config(format!(
                "unknown attribution method '{other}' (expected grad_input or token_similarity)"
            ))),
        }
    }
}

/// An encoder that can be entered at the token-embedding level.
pub trait TokenEncoder {
    fn split(&self) -> SplitPoint;
    /// Embeddings `[B, T, e]` for padded ids `[B, T]`.
    fn embed(&self, ids: &[usize], batch: usize) -> Result<Tensor<f64>>;
    /// Activations at the split from embeddings on `g`.
    fn encode_embedded(&self, g: &mut Graph<f64>, emb: Var, mask: &Tensor<f64>) -> Var;
}

impl TokenEncoder for SplitEncoder<'_, f64> {
    fn split(&self) -> SplitPoint {
        self.split
    }

    fn embed(&self, ids: &[usize], batch: usize) -> Result<Tensor<f64>> {
        self.model.embed_tokens(ids, batch)
    }

    fn encode_embedded(&self, g: &mut Graph<f64>, emb: Var, mask: &Tensor<f64>) -> Var {
        self.model.phi_from_embeddings(g, emb, mask, self.split.layer_index).var
    }
}

/// Token-level linear encoder `acts_t = E[id_t] W`, for tests and small demos.
#[derive(Debug, Clone)]
pub struct LinearTokenEncoder {
    pub table: Tensor<f64>,
    pub weight: Tensor<f64>,
    pub granularity: Granularity,
}

impl TokenEncoder for LinearTokenEncoder {
    fn split(&self) -> SplitPoint {
        SplitPoint {
            layer_index: 0,
            granularity: self.granularity,
        }
    }

    fn embed(&self, ids: &[usize], batch: usize) -> Result<Tensor<f64>> {
        let e = self.table.shape()[1];
        let t = ids.len() / batch.max(1);
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.table.shape()[0]) {
            return Err(Error::Invalid(format!("token id {bad} outside the embedding table")));
        }
        let data: Vec<f64> = ids.iter().flat_map(|&i| self.table.row(i).to_vec()).collect();
        Ok(Tensor::new(&[batch, t, e], data).expect("embedding shape"))
    }

    fn encode_embedded(&self, g: &mut Graph<f64>, emb: Var, mask: &Tensor<f64>) -> Var {
        let w = g.constant(self.weight.clone());
        let b = g.constant(Tensor::zeros(&[self.weight.shape()[1]]));
        let x = g.linear(emb, w, b);
        match self.granularity {
            Granularity::TokenLevel => x,
            Granularity::SequenceLevel => g.masked_mean_pool(x, mask),
        }
    }
}

/// Per-token scores for one sample and one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub scores: Vec<f64>,
    pub method: Method,
    /// Raw scores were all zero and were replaced by a uniform distribution.
    pub uniform_fallback: bool,
}

/// Sample-level concept probabilities `[B][n]`: the row itself at
/// sequence-level splits, the mean over real tokens at token-level ones.
pub fn sample_concept_probs(model: &ConceptModel, acts: &ActivationBatch<f64>) -> Vec<Vec<f64>> {
    let p = model.concept_probs(acts);
    let n = model.n();
    match &acts.mask {
        None if p.ndim() == 2 => p.data().chunks(n).map(|r| r.to_vec()).collect(),
        mask => {
            let (b, t) = (p.shape()[0], p.shape()[1]);
            (0..b)
                .map(|i| {
                    let mut out = vec![0.0; n];
                    let mut cnt = 0.0;
                    for j in 0..t {
                        let m = mask.as_ref().map_or(1.0, |m| m.data()[i * t + j]);
                        if m == 0.0 {
                            continue;
                        }
                        cnt += m;
                        for (o, v) in out.iter_mut().zip(&p.data()[(i * t + j) * n..(i * t + j + 1) * n]) {
                            *o += m * v;
                        }
                    }
                    out.iter_mut().for_each(|v| *v /= f64::max(cnt, 1.0));
                    out
                })
                .collect()
        }
    }
}

/// The `k` largest probabilities among active non-context concepts after
/// renormalizing over those concepts; ties go to the lower index.
pub fn top_concepts(probs: &[f64], active: &[bool], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let cand = crate::conceptnet::reported(active);
    let total: f64 = cand.iter().map(|&i| probs[i]).sum();
    let mut ranked: Vec<(usize, f64)> = cand
        .iter()
        .map(|&i| (i, if total > 0.0 { probs[i] / total } else { 0.0 }))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

fn normalize(raw: Vec<f64>) -> (Vec<f64>, bool) {
    let raw: Vec<f64> = raw.into_iter().map(|v| v.max(0.0)).collect();
    let s: f64 = raw.iter().sum();
    if s > 0.0 && s.is_finite() {
        (raw.iter().map(|v| v / s).collect(), false)
    } else {
        let n = raw.len().max(1) as f64;
        (vec![1.0 / n; raw.len()], true)
    }
}

/// Scores for a batch of documents, one concept per document.
pub fn saliency_batch(
    model: &ConceptModel,
    enc: &dyn TokenEncoder,
    docs: &[&[u32]],
    concepts: &[usize],
    method: Method,
) -> Result<Vec<AttributionResult>> {
    assert_eq!(docs.len(), concepts.len());
    if let Some(&bad) = concepts.iter().find(|&&c| c >= model.n()) {
        return Err(Error::Invalid(format!("concept index {bad} out of range")));
    }
    let split = enc.split();
    if method == Method::TokenSimilarity && split.granularity != Granularity::TokenLevel {
        return Err(Error::Invalid("token_similarity needs a token-level split".into()));
    }
    let Batch::Tokens { ids, mask } = token_batch::<f64>(docs) else {
        unreachable!()
    };
    let b = docs.len();
    let t = mask.shape()[1];
    let emb = enc.embed(&ids, b)?;
    let e = emb.last_dim();
    let mut g = Graph::new();
    let ev = g.leaf(emb.clone(), true);
    let acts = enc.encode_embedded(&mut g, ev, &mask);
    let bound = model.params.bind(&mut g, false);
    let p = model.probs_var(&mut g, &bound, acts);
    let n = model.n();
    let raw: Vec<Vec<f64>> = match method {
        Method::TokenSimilarity => {
            let pv = g.value(p);
            (0..b)
                .map(|i| (0..docs[i].len()).map(|j| pv.data()[(i * t + j) * n + concepts[i]]).collect())
                .collect()
        }
        Method::GradInput => {
            // Pick each document's concept and average over its real tokens.
            let sel = match split.granularity {
                Granularity::SequenceLevel => Tensor::from_fn(&[b, n], |k| (k % n == concepts[k / n]) as u8 as f64),
                Granularity::TokenLevel => Tensor::from_fn(&[b, t, n], |k| {
                    let (row, c) = (k / n, k % n);
                    let i = row / t;
                    let m = mask.data()[row];
                    let len = docs[i].len().max(1) as f64;
                    if c == concepts[i] {
                        m / len
                    } else {
                        0.0
                    }
                }),
            };
            let picked = g.mul_const(p, sel);
            let total = g.sum(picked);
            let grads = g.backward(total);
            let gr = grads.get_or_zeros(ev, emb.shape());
            (0..b)
                .map(|i| {
                    (0..docs[i].len())
                        .map(|j| {
                            let o = (i * t + j) * e;
                            (0..e).map(|k| (gr.data()[o + k] * emb.data()[o + k]).abs()).sum()
                        })
                        .collect()
                })
                .collect()
        }
    };
    Ok(raw
        .into_iter()
        .map(|r| {
            let (scores, uniform_fallback) = normalize(r);
            if uniform_fallback {
                log::debug!("all-zero saliency; using a uniform distribution");
            }
            AttributionResult {
                scores,
                method,
                uniform_fallback,
            }
        })
        .collect())
}

/// Scores of every token of `doc` for one concept.
pub fn saliency_scores(model: &ConceptModel, enc: &dyn TokenEncoder, doc: &[u32], concept: usize, method: Method) -> Result<AttributionResult> {
    Ok(saliency_batch(model, enc, &[doc], &[concept], method)?.remove(0))
}

/// Sample-level concept probabilities of documents through `enc`.
pub fn doc_concept_probs(model: &ConceptModel, enc: &dyn TokenEncoder, docs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
    let Batch::Tokens { ids, mask } = token_batch::<f64>(docs) else {
        unreachable!()
    };
    let emb = enc.embed(&ids, docs.len())?;
    let mut g = Graph::new();
    let ev = g.constant(emb);
    let a = enc.encode_embedded(&mut g, ev, &mask);
    let values = g.value(a).clone();
    let mask = (values.ndim() == 3).then_some(mask);
    Ok(sample_concept_probs(model, &ActivationBatch { values, mask }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_concepts_order_and_ties() {
        let active = vec![true; 5];
        let top = top_concepts(&[0.5, 0.3, 0.1, 0.1, 0.9], &active, 3).unwrap();
        let idx: Vec<usize> = top.iter().map(|t| t.0).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!((top[0].1 - 0.5).abs() < 1e-12);
        let two = [true, false, true, false, true];
        assert_eq!(top_concepts(&[0.1, 0.2, 0.3, 0.4, 0.0], &two, 3).unwrap().len(), 2);
        assert!(top_concepts(&[0.1, 0.2], &[true, true], 0).is_err());
    }

    #[test]
    fn normalization_and_fallback() {
        let (s, f) = normalize(vec![1.0, -2.0, 3.0]);
        assert_eq!(s, vec![0.25, 0.0, 0.75]);
        assert!(!f);
        let (s, f) = normalize(vec![0.0, 0.0]);
        assert_eq!(s, vec![0.5, 0.5]);
        assert!(f);
    }
}
