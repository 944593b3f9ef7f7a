//! Planted-keyword text benchmark.
//!
//! Every class-k document carries one or more tokens from `causal_vocab[k]`
//! and one confound token, drawn from `confound_vocab[k]` with probability
//! `p_cor` and from another class's confound list otherwise. The rest is
//! filler. Planted positions are recorded as ground truth.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::build_text_dataset;
use super::Dataset;
use crate::rng::derived_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextCorpusSpec {
    pub num_classes: usize,
    pub causal_vocab: Vec<Vec<String>>,
    pub confound_vocab: Vec<Vec<String>>,
    pub filler_vocab: Vec<String>,
    pub p_cor: f64,
    pub length_range: (usize, usize),
    pub max_causal_tokens: usize,
    pub num_samples: usize,
    pub base_seed: u64,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

impl Default for TextCorpusSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            causal_vocab: vec![
                words("awful terrible boring dreadful horrible dull tedious lousy"),
                words("great excellent wonderful superb brilliant delightful fantastic splendid"),
            ],
            confound_vocab: vec![words("tuesday winter train paper"), words("sunday summer boat glass")],
            filler_vocab: words(
                "the a an this that it was is movie film story plot actor actress scene \
                 and but with of to in on for as at by from about really quite very \
                 character director ending music camera script show they we i he she \
                 watched saw thought felt seemed looked just also then there here some",
            ),
            p_cor: 0.8,
            length_range: (20, 40),
            max_causal_tokens: 2,
            num_samples: 10_000,
            base_seed: 0,
        }
    }
}

impl TextCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.causal_vocab.len() != self.num_classes || self.confound_vocab.len() != self.num_classes {
            return bad("causal_vocab and confound_vocab need one list per class".into());
        }
        if self.causal_vocab.iter().chain(&self.confound_vocab).any(|v| v.is_empty()) || self.filler_vocab.is_empty() {
            return bad("vocabulary lists must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.p_cor) {
            return bad(format!("p_cor {} outside [0, 1]", self.p_cor));
        }
        if self.max_causal_tokens == 0 {
            return bad("max_causal_tokens must be at least 1".into());
        }
        let (lo, hi) = self.length_range;
        if lo > hi {
            return bad(format!("length_range ({lo}, {hi}) is inverted"));
        }
        if lo < self.max_causal_tokens + 1 {
            return bad(format!(
                "length_range minimum {lo} cannot hold {} causal tokens plus a confound token",
                self.max_causal_tokens
            ));
        }
        if self.num_samples == 0 {
            return bad("num_samples must be positive".into());
        }
        let mut seen = HashSet::new();
        let all = self
            .causal_vocab
            .iter()
            .flatten()
            .chain(self.confound_vocab.iter().flatten())
            .chain(&self.filler_vocab);
        for w in all {
            if w.split_whitespace().count() != 1 || w.to_lowercase() != *w {
                return bad(format!("vocabulary entry {w:?} must be a single lowercase token"));
            }
            if !seen.insert(w) {
                return bad(format!("token {w:?} appears in more than one vocabulary slot"));
            }
        }
        Ok(())
    }
}

/// Planted positions for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub causal: Vec<usize>,
    pub confound: Vec<usize>,
    pub confound_class: usize,
}

fn pick<'a>(rng: &mut impl Rng, v: &'a [String]) -> &'a str {
    &v[rng.random_range(0..v.len())]
}

pub fn gen_synthetic_text(spec: &TextCorpusSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut docs = Vec::with_capacity(spec.num_samples);
    let mut labels = Vec::with_capacity(spec.num_samples);
    let mut truth = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let mut rng = derived_rng(spec.base_seed, i as u64);
        let k = rng.random_range(0..spec.num_classes);
        let len = rng.random_range(spec.length_range.0..=spec.length_range.1);
        let n_causal = rng.random_range(1..=spec.max_causal_tokens);
        let cc = if rng.random::<f64>() < spec.p_cor {
            k
        } else {
            let other = rng.random_range(0..spec.num_classes - 1);
            if other >= k {
                other + 1
            } else {
                other
            }
        };
        let pos = sample(&mut rng, len, n_causal + 1).into_vec();
        let mut doc: Vec<String> = (0..len).map(|_| pick(&mut rng, &spec.filler_vocab).to_string()).collect();
        let mut causal: Vec<usize> = pos[..n_causal].to_vec();
        for &p in &causal {
            doc[p] = pick(&mut rng, &spec.causal_vocab[k]).to_string();
        }
        doc[pos[n_causal]] = pick(&mut rng, &spec.confound_vocab[cc]).to_string();
        causal.sort_unstable();
        truth.push(Planted {
            causal,
            confound: vec![pos[n_causal]],
            confound_class: cc,
        });
        docs.push(doc);
        labels.push(k as u32);
    }
    let mut ds = build_text_dataset(docs, labels)?;
    ds.metadata = serde_json::json!({
        "source": "synthetic_text",
        "spec": spec,
        "ground_truth": truth,
    });
    Ok(ds)
}

/// Planted positions stored in a dataset's metadata, if it has any.
pub fn ground_truth(ds: &Dataset) -> Option<Vec<Planted>> {
    serde_json::from_value(ds.metadata.get("ground_truth")?.clone()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p_cor: f64, n: usize) -> TextCorpusSpec {
        TextCorpusSpec {
            p_cor,
            num_samples: n,
            ..Default::default()
        }
    }

    #[test]
    fn full_correlation_plants_own_confound() {
        let s = spec(1.0, 300);
        let ds = gen_synthetic_text(&s).unwrap();
        let v = ds.vocab.as_ref().unwrap();
        for i in 0..ds.len() {
            let k = ds.label(i)[0] as usize;
            let toks: Vec<&str> = ds.tokens(i).iter().map(|&t| v.token(t)).collect();
            assert!(s.confound_vocab[k].iter().any(|w| toks.contains(&w.as_str())));
        }
    }

    #[test]
    fn planted_positions_hold_planted_tokens() {
        let s = spec(0.8, 200);
        let ds = gen_synthetic_text(&s).unwrap();
        let v = ds.vocab.as_ref().unwrap();
        let gt = ground_truth(&ds).unwrap();
        for (i, g) in gt.iter().enumerate() {
            let k = ds.label(i)[0] as usize;
            let toks = ds.tokens(i);
            assert!(!g.causal.is_empty());
            for &p in &g.causal {
                assert!(s.causal_vocab[k].iter().any(|w| w == v.token(toks[p])));
            }
            for &p in &g.confound {
                assert!(s.confound_vocab[g.confound_class].iter().any(|w| w == v.token(toks[p])));
            }
            // never filler-only
            assert!(toks.iter().any(|&t| !s.filler_vocab.iter().any(|w| w == v.token(t))));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(0.8, 10);
        s.length_range = (2, 5);
        assert!(gen_synthetic_text(&s).is_err());
        let mut s = spec(0.8, 10);
        s.filler_vocab.push("great".into());
        assert!(gen_synthetic_text(&s).is_err());
        let mut s = spec(0.8, 10);
        s.num_classes = 1;
        assert!(gen_synthetic_text(&s).is_err());
    }
}
