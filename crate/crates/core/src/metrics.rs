//! Impact, accuracy and coherence scores for trained concept models.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use hiconcept_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::attribution::{doc_concept_probs, saliency_batch, top_concepts, Method, TokenEncoder};
use crate::conceptnet::ConceptModel;
use crate::targets::{argmax_classes, head_predictions, ActivationSet, Head};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    pub pmi: f64,
    pub npmi: f64,
    pub c_v: f64,
    pub skipped_pairs: usize,
}

/// Scores for one concept model on one evaluation set. Per-concept lists
/// cover every non-context concept by index; averages use active ones only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_concept_impact: Vec<f64>,
    pub avg_impact: f64,
    pub per_concept_delta_acc: Vec<f64>,
    pub delta_acc: f64,
    pub racc: f64,
    pub effective_concepts: usize,
    pub coherence: Option<Coherence>,
}

/// Per-sample total variation between two `[N, K, C]` outputs, averaged over heads.
pub fn tv_per_sample(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let s = a.shape();
    let (k, c) = (s[1], s[2]);
    a.data()
        .chunks(k * c)
        .zip(b.data().chunks(k * c))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()).sum::<f64>() / (2.0 * k as f64))
        .collect()
}

/// Fraction of (sample, head) argmax decisions on which two outputs agree.
pub fn agreement(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (x, y) = (argmax_classes(a), argmax_classes(b));
    if x.is_empty() {
        return 0.0;
    }
    x.iter().zip(&y).filter(|(u, v)| u == v).count() as f64 / x.len() as f64
}

/// Surrogate outputs `[N, K, C]` over a whole activation set with `removed` zeroed.
pub fn surrogate_predictions(
    model: &ConceptModel,
    head: &dyn Head,
    acts: &ActivationSet,
    removed: &[usize],
    batch_size: usize,
) -> Result<Tensor<f64>> {
    let idx: Vec<usize> = (0..acts.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        parts.push(model.forward(head, &acts.batch(chunk), removed)?.probs);
    }
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs))
}

/// RAcc: agreement of the surrogate with the original model's predictions.
pub fn recovering_accuracy(model: &ConceptModel, head: &dyn Head, acts: &ActivationSet, original: &Tensor<f64>, batch_size: usize) -> Result<f64> {
    let s = surrogate_predictions(model, head, acts, &[], batch_size)?;
    Ok(agreement(&s, original))
}

/// Per-sample impact of each non-context concept: `out[i][j]` is the total
/// variation for concept `i` on sample `j`.
pub fn impact_matrix(model: &ConceptModel, head: &dyn Head, acts: &ActivationSet, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let base = surrogate_predictions(model, head, acts, &[], batch_size)?;
    (0..model.context_index())
        .map(|i| {
            let r = surrogate_predictions(model, head, acts, &[i], batch_size)?;
            Ok(tv_per_sample(&base, &r))
        })
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn evaluate_concepts(model: &ConceptModel, head: &dyn Head, acts: &ActivationSet, batch_size: usize) -> Result<MetricsReport> {
    let original = head_predictions(head, acts, batch_size);
    let base = surrogate_predictions(model, head, acts, &[], batch_size)?;
    let racc = agreement(&base, &original);
    let mut impact = Vec::new();
    let mut delta = Vec::new();
    for i in 0..model.context_index() {
        let r = surrogate_predictions(model, head, acts, &[i], batch_size)?;
        impact.push(mean(tv_per_sample(&base, &r)));
        delta.push((racc - agreement(&r, &original)).abs());
    }
    let active = model.reported();
    if active.is_empty() {
        log::warn!("no active concepts; impact metrics reported as 0");
    }
    Ok(MetricsReport {
        avg_impact: mean(active.iter().map(|&i| impact[i])),
        delta_acc: mean(active.iter().map(|&i| delta[i])),
        per_concept_impact: impact,
        per_concept_delta_acc: delta,
        racc,
        effective_concepts: active.len(),
        coherence: None,
    })
}

/// `sum_i p_i * s_t(c_i)` over the selected concepts.
pub fn token_impact_scores(top: &[(usize, f64)], saliency: &[Vec<f64>]) -> Vec<f64> {
    let t = saliency.first().map_or(0, |s| s.len());
    let mut out = vec![0.0; t];
    for ((_, p), s) in top.iter().zip(saliency) {
        for (o, v) in out.iter_mut().zip(s) {
            *o += p * v;
        }
    }
    out
}

/// Token impact `I(x_t)` for each document: the top-`k` concepts by
/// renormalized probability, each weighted by its token saliency.
pub fn token_impact_batch(
    model: &ConceptModel,
    enc: &dyn TokenEncoder,
    docs: &[&[u32]],
    method: Method,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let probs = doc_concept_probs(model, enc, docs)?;
    let tops: Vec<Vec<(usize, f64)>> = probs
        .iter()
        .map(|p| top_concepts(p, &model.active, k))
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<f64>> = docs.iter().map(|d| vec![0.0; d.len()]).collect();
    for rank in 0..k {
        let rows: Vec<usize> = (0..docs.len()).filter(|&i| tops[i].len() > rank).collect();
        if rows.is_empty() {
            break;
        }
        let sub: Vec<&[u32]> = rows.iter().map(|&i| docs[i]).collect();
        let cs: Vec<usize> = rows.iter().map(|&i| tops[i][rank].0).collect();
        let sal = saliency_batch(model, enc, &sub, &cs, method)?;
        for (&i, s) in rows.iter().zip(sal) {
            let w = tops[i][rank].1;
            for (o, v) in out[i].iter_mut().zip(&s.scores) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// [`token_impact_batch`] for a single document with the top three concepts.
pub fn token_impact(model: &ConceptModel, enc: &dyn TokenEncoder, doc: &[u32], method: Method) -> Result<Vec<f64>> {
    Ok(token_impact_batch(model, enc, &[doc], method, 3)?.remove(0))
}

const SMOOTH: f64 = 1e-12;

struct WindowCounts<T> {
    windows: usize,
    single: HashMap<T, usize>,
    pair: HashMap<(T, T), usize>,
}

fn count_windows<T: Eq + Hash + Clone + Ord>(corpus: &[Vec<T>], vocab: &HashSet<T>, window: usize) -> WindowCounts<T> {
    let mut c = WindowCounts {
        windows: 0,
        single: HashMap::new(),
        pair: HashMap::new(),
    };
    for doc in corpus {
        let starts = if doc.len() <= window { 1 } else { doc.len() - window + 1 };
        for s in 0..starts {
            let end = (s + window).min(doc.len());
            let mut present: Vec<T> = doc[s..end].iter().filter(|w| vocab.contains(w)).cloned().collect();
            present.sort();
            present.dedup();
            c.windows += 1;
            for (i, a) in present.iter().enumerate() {
                *c.single.entry(a.clone()).or_default() += 1;
                for b in &present[i + 1..] {
                    *c.pair.entry((a.clone(), b.clone())).or_default() += 1;
                }
            }
        }
    }
    c
}

impl<T: Eq + Hash + Clone + Ord> WindowCounts<T> {
    fn p(&self, w: &T) -> f64 {
        *self.single.get(w).unwrap_or(&0) as f64 / self.windows.max(1) as f64
    }

    fn joint(&self, a: &T, b: &T) -> f64 {
        if a == b {
            return self.p(a);
        }
        let key = if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        *self.pair.get(&key).unwrap_or(&0) as f64 / self.windows.max(1) as f64
    }

    fn pmi(&self, a: &T, b: &T) -> f64 {
        ((self.joint(a, b) + SMOOTH) / (self.p(a) * self.p(b))).ln()
    }

    /// `-1` without co-occurrence, `1` when the pair fills every window.
    fn npmi(&self, a: &T, b: &T) -> f64 {
        let j = self.joint(a, b);
        if j == 0.0 {
            return -1.0;
        }
        let denom = -(j + SMOOTH).ln();
        if denom <= SMOOTH {
            return 1.0;
        }
        (self.pmi(a, b) / denom).clamp(-1.0, 1.0)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Sliding-window PMI, NPMI and c_v of each concept's keyword list,
/// averaged over concepts. Pairs with a keyword missing from the corpus are
/// skipped and counted.
pub fn coherence<T: Eq + Hash + Clone + Ord>(corpus: &[Vec<T>], keywords: &[Vec<T>], window: usize) -> Coherence {
    let vocab: HashSet<T> = keywords.iter().flatten().cloned().collect();
    let counts = count_windows(corpus, &vocab, window.max(1));
    let mut skipped = 0usize;
    let (mut pmi, mut npmi, mut cv) = (Vec::new(), Vec::new(), Vec::new());
    for words in keywords {
        let (mut cp, mut cn) = (Vec::new(), Vec::new());
        for i in 0..words.len() {
            for j in i + 1..words.len() {
                let (a, b) = (&words[i], &words[j]);
                if counts.p(a) == 0.0 || counts.p(b) == 0.0 {
                    skipped += 1;
                    continue;
                }
                cp.push(counts.pmi(a, b));
                cn.push(counts.npmi(a, b));
            }
        }
        if !cp.is_empty() {
            pmi.push(mean(cp));
            npmi.push(mean(cn));
        }
        let present: Vec<&T> = words.iter().filter(|w| counts.p(w) > 0.0).collect();
        if present.len() >= 2 {
            let vecs: Vec<Vec<f64>> = present
                .iter()
                .map(|a| present.iter().map(|b| counts.npmi(a, b)).collect())
                .collect();
            let mut total = vec![0.0; present.len()];
            for v in &vecs {
                for (t, x) in total.iter_mut().zip(v) {
                    *t += x;
                }
            }
            cv.push(mean(vecs.iter().map(|v| cosine(v, &total))));
        }
    }
    Coherence {
        pmi: mean(pmi),
        npmi: mean(npmi),
        c_v: mean(cv),
        skipped_pairs: skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(s: &[&str]) -> Vec<Vec<String>> {
        s.iter().map(|d| d.split_whitespace().map(String::from).collect()).collect()
    }

    fn kw(s: &[&str]) -> Vec<Vec<String>> {
        vec![s.iter().map(|w| w.to_string()).collect()]
    }

    #[test]
    fn npmi_bounds() {
        let c = docs(&["a b x", "y z w", "a b q", "r s t"]);
        let r = coherence(&c, &kw(&["a", "b"]), 10);
        assert!((r.npmi - 1.0).abs() < 1e-9, "{}", r.npmi);
        let c = docs(&["a x", "b y", "a z", "b w"]);
        let r = coherence(&c, &kw(&["a", "b"]), 10);
        assert_eq!(r.npmi, -1.0);
        assert_eq!(r.skipped_pairs, 0);
    }

    #[test]
    fn missing_keywords_are_skipped() {
        let c = docs(&["a b", "c d"]);
        let r = coherence(&c, &kw(&["a", "b", "zzz"]), 5);
        assert_eq!(r.skipped_pairs, 2);
    }

    #[test]
    fn tv_and_agreement() {
        let a = Tensor::new(&[1, 1, 2], vec![0.9, 0.1]).unwrap();
        let b = Tensor::new(&[1, 1, 2], vec![0.1, 0.9]).unwrap();
        assert!((tv_per_sample(&a, &b)[0] - 0.8).abs() < 1e-12);
        assert_eq!(agreement(&a, &b), 0.0);
        assert_eq!(agreement(&a, &a), 1.0);
    }

    #[test]
    fn token_impact_weighted_sum() {
        let s = vec![vec![0.0, 0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0, 1.0]];
        let out = token_impact_scores(&[(0, 0.7), (3, 0.3)], &s);
        assert_eq!(out, vec![0.0, 0.0, 0.7, 0.0, 0.3]);
    }
}
