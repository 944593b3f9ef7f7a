//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use hiconcept_core::conceptnet::{ConceptModel, ConceptSet};
use hiconcept_core::losses::{self, LossWeights};
use hiconcept_core::targets::{ActivationBatch, ActivationSet, Granularity, Head, LinearHead, OutputKind, SplitPoint};
use hiconcept_tensor::check::check_gradient;
use hiconcept_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seq_split() -> SplitPoint {
    SplitPoint {
        layer_index: 0,
        granularity: Granularity::SequenceLevel,
    }
}

pub fn token_split() -> SplitPoint {
    SplitPoint {
        layer_index: 0,
        granularity: Granularity::TokenLevel,
    }
}

pub fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

/// Concept model with every weight given explicitly.
pub fn model_from(vectors: Tensor<f64>, beta: f64, w1: Tensor<f64>, b1: Tensor<f64>, w2: Tensor<f64>, b2: Tensor<f64>, split: SplitPoint) -> ConceptModel {
    let cs = ConceptSet::new(vectors, Some(beta)).unwrap();
    let mut m = ConceptModel::new(&cs, split, b1.len(), 0).unwrap();
    for (name, v) in [("dec.w1", w1), ("dec.b1", b1), ("dec.w2", w2), ("dec.b2", b2)] {
        let id = m.params.find(name).unwrap();
        m.params.set(id, v);
    }
    m
}

pub fn seq_set(rows: &Tensor<f64>) -> ActivationSet {
    let mut s = ActivationSet::new(seq_split(), rows.shape()[1]);
    s.push(&ActivationBatch {
        values: rows.clone(),
        mask: None,
    });
    s
}

/// Concept 0 flips a 2-class head from (0.9, 0.1) to (0.1, 0.9) on every sample.
pub struct FlipFixture {
    pub model: ConceptModel,
    pub head: LinearHead,
    pub acts: Tensor<f64>,
}

pub fn flip_fixture(samples: usize) -> FlipFixture {
    let ln9 = 9f64.ln();
    let model = model_from(
        t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
        0.5,
        t(&[2, 1], &[1.0, 0.0]),
        t(&[1], &[0.0]),
        t(&[1, 2], &[2.0 * ln9, 0.0]),
        t(&[2], &[-ln9, 0.0]),
        seq_split(),
    );
    let head = LinearHead::new(t(&[2, 2], &[0.5, -0.5, 0.0, 0.0]), Tensor::zeros(&[2]), OutputKind::Softmax);
    let acts = Tensor::from_fn(&[samples, 2], |i| if i % 2 == 0 { 1.0 + (i / 2) as f64 } else { 0.0 });
    FlipFixture { model, head, acts }
}

// ---- brute-force surrogate, written without the library's code path ----

pub struct Plain {
    pub concepts: Vec<Vec<f64>>,
    pub beta: f64,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub hw: Vec<Vec<f64>>,
    pub hb: Vec<f64>,
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(|r| r.to_vec()).collect()
}

impl Plain {
    pub fn from(model: &ConceptModel, head: &LinearHead) -> Self {
        Self {
            concepts: rows(model.vectors()),
            beta: model.beta,
            w1: rows(model.param("dec.w1")),
            b1: model.param("dec.b1").data().to_vec(),
            w2: rows(model.param("dec.w2")),
            b2: model.param("dec.b2").data().to_vec(),
            hw: rows(&head.weight),
            hb: head.bias.data().to_vec(),
        }
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.concepts
            .iter()
            .map(|c| {
                let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = if nx == 0.0 { 0.0 } else { x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (nx * nc) };
                if cos >= self.beta {
                    cos
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Softmax head output after zeroing `removed`.
    pub fn output(&self, x: &[f64], removed: &[usize]) -> Vec<f64> {
        let mut p = self.probs(x);
        for &r in removed {
            p[r] = 0.0;
        }
        let h: Vec<f64> = (0..self.b1.len())
            .map(|j| (self.b1[j] + (0..p.len()).map(|i| p[i] * self.w1[i][j]).sum::<f64>()).max(0.0))
            .collect();
        let r: Vec<f64> = (0..self.b2.len())
            .map(|k| self.b2[k] + (0..h.len()).map(|j| h[j] * self.w2[j][k]).sum::<f64>())
            .collect();
        let z: Vec<f64> = (0..self.hb.len())
            .map(|c| self.hb[c] + (0..r.len()).map(|k| r[k] * self.hw[k][c]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    pub fn original(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = (0..self.hb.len())
            .map(|c| self.hb[c] + x.iter().enumerate().map(|(k, v)| v * self.hw[k][c]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut b = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[b] {
            b = i;
        }
    }
    b
}

/// Brute-force impact and accuracy numbers for a sequence-level fixture.
pub struct OracleReport {
    pub impact: Vec<f64>,
    pub delta_acc: Vec<f64>,
    pub racc: f64,
}

pub fn oracle_report(plain: &Plain, xs: &[Vec<f64>], reported: usize) -> OracleReport {
    let n = xs.len() as f64;
    let agree = |removed: &[usize]| {
        xs.iter()
            .filter(|x| argmax(&plain.output(x, removed)) == argmax(&plain.original(x)))
            .count() as f64
            / n
    };
    let racc = agree(&[]);
    let mut impact = Vec::new();
    let mut delta = Vec::new();
    for i in 0..reported {
        let tv: f64 = xs
            .iter()
            .map(|x| {
                let a = plain.output(x, &[]);
                let b = plain.output(x, &[i]);
                a.iter().zip(&b).map(|(u, v)| (u - v).abs()).sum::<f64>() / 2.0
            })
            .sum::<f64>()
            / n;
        impact.push(tv);
        delta.push((racc - agree(&[i])).abs());
    }
    OracleReport {
        impact,
        delta_acc: delta,
        racc,
    }
}

// ---- gradient suite ----

pub struct GradFixture {
    pub model: ConceptModel,
    pub head: LinearHead,
    pub acts: ActivationBatch<f64>,
    pub original: Tensor<f64>,
    pub top_n: usize,
    pub set: Vec<usize>,
}

pub fn grad_fixture(seed: u64, token_level: bool) -> GradFixture {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, h, c, b, tl) = (4, 5, 6, 3, 6, 3);
    let mut u = |shape: &[usize], a: f64| Tensor::from_fn(shape, |_| r.random_range(-a..a));
    let vectors = u(&[n, d], 1.0);
    let model = model_from(
        vectors,
        0.1,
        u(&[n, h], 1.0),
        u(&[h], 0.5),
        u(&[h, d], 1.0),
        u(&[d], 0.5),
        if token_level { token_split() } else { seq_split() },
    );
    let mut head = LinearHead::new(u(&[d, c], 1.0), u(&[c], 0.2), OutputKind::Softmax);
    let acts = if token_level {
        head = head.token_level();
        let mut mask = vec![1.0; b * tl];
        mask[tl - 1] = 0.0;
        mask[2 * tl - 1] = 0.0;
        let mut v = u(&[b, tl, d], 1.0);
        for (k, x) in v.data_mut().iter_mut().enumerate() {
            if mask[k / d] == 0.0 {
                *x = 0.0;
            }
        }
        ActivationBatch {
            values: v,
            mask: Some(Tensor::new(&[b, tl], mask).unwrap()),
        }
    } else {
        ActivationBatch {
            values: u(&[b, d], 1.0),
            mask: None,
        }
    };
    let original = head.predict(&acts.values, acts.mask.as_ref());
    let top_n = losses::neighborhood_size(&acts, 0.25);
    GradFixture {
        model,
        head,
        acts,
        original,
        top_n,
        set: vec![0, 1, 2],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Rec,
    Reg,
    Enc,
    Cau,
}

pub const TERMS: [Term; 4] = [Term::Rec, Term::Reg, Term::Enc, Term::Cau];
pub const PARAMS: [&str; 5] = ["concepts", "dec.w1", "dec.b1", "dec.w2", "dec.b2"];

/// Build loss `term` on `g`, routing parameter `param` through `x`.
pub fn build_term(f: &GradFixture, term: Term, param: &str, g: &mut Graph<f64>, x: Var) -> Var {
    let m = &f.model;
    let mut bound = m.params.bind(g, false);
    bound.set(m.params.find(param).unwrap(), x);
    let a = g.constant(f.acts.values.clone());
    let keep = m.decode_keep(&[]);
    let v = m.forward_vars(g, &bound, &f.head, a, f.acts.mask.as_ref(), &keep);
    let (p, recon, out) = (v.p, v.recon, v.out);
    match term {
        Term::Rec => losses::loss_rec_var(g, out, &f.original),
        Term::Reg => losses::loss_reg_var(g, bound.var(m.params.find("concepts").unwrap()), &f.acts, &LossWeights::default(), f.top_n).unwrap(),
        Term::Enc => losses::loss_enc_var(g, recon, &f.acts),
        Term::Cau => losses::loss_cau_var(g, m, &bound, &f.head, p, out, f.acts.mask.as_ref(), &keep, &f.set),
    }
}

/// True when no similarity, ReLU input, neighborhood boundary or causal
/// difference lies within the kink margin.
pub fn kink_free(f: &GradFixture) -> bool {
    let m = &f.model;
    let d = f.acts.values.last_dim();
    let valid: Vec<usize> = (0..f.acts.values.len() / d)
        .filter(|&r| f.acts.mask.as_ref().is_none_or(|mk| mk.data()[r] != 0.0))
        .collect();
    let cn: Vec<Vec<f64>> = rows(&m.concept_set().vectors);
    let w1 = rows(m.param("dec.w1"));
    let b1 = m.param("dec.b1").data().to_vec();
    let mut sims_by_concept = vec![Vec::new(); m.n()];
    for &r in &valid {
        let x = &f.acts.values.data()[r * d..(r + 1) * d];
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut p = Vec::new();
        for (i, c) in cn.iter().enumerate() {
            let cos: f64 = x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / nx;
            if (cos - m.beta).abs() < 1e-3 {
                return false;
            }
            sims_by_concept[i].push(cos);
            p.push(if cos >= m.beta { cos } else { 0.0 });
        }
        let mut variants = vec![p.clone()];
        for &s in &f.set {
            let mut q = p.clone();
            q[s] = 0.0;
            variants.push(q);
        }
        for q in variants {
            for j in 0..b1.len() {
                let pre = b1[j] + (0..q.len()).map(|i| q[i] * w1[i][j]).sum::<f64>();
                if pre.abs() < 1e-3 {
                    return false;
                }
            }
        }
    }
    // |delta| of the causal term must stay clear of zero unless it is
    // exactly zero (concept inactive on the whole sample).
    let base = m.forward(&f.head, &f.acts, &[]).unwrap().probs;
    for &s in &f.set {
        let out = m.forward(&f.head, &f.acts, &[s]).unwrap().probs;
        if out.data().iter().zip(base.data()).any(|(a, b)| (a - b).abs() > 0.0 && (a - b).abs() < 1e-4) {
            return false;
        }
    }
    for mut s in sims_by_concept {
        s.sort_by(|a, b| b.total_cmp(a));
        if f.top_n < s.len() && (s[f.top_n - 1] - s[f.top_n]).abs() < 1e-3 {
            return false;
        }
    }
    true
}

/// Worst vector relative error per loss term over `points` kink-free draws.
pub fn gradient_suite(points: usize) -> Vec<(Term, f64)> {
    let mut worst = vec![0.0f64; TERMS.len()];
    let mut found = 0;
    let mut seed = 0u64;
    while found < points {
        let f = grad_fixture(seed, seed % 2 == 1);
        seed += 1;
        if !kink_free(&f) {
            continue;
        }
        found += 1;
        for (ti, &term) in TERMS.iter().enumerate() {
            for param in PARAMS {
                if term == Term::Reg && param != "concepts" {
                    continue;
                }
                let x = f.model.param(param).clone();
                let r = check_gradient(&x, 1e-4, None, |g, v| build_term(&f, term, param, g, v));
                worst[ti] = worst[ti].max(r.vector_rel_err);
            }
        }
    }
    TERMS.iter().copied().zip(worst).collect()
}

pub fn mean_per_sample_impact(model: &ConceptModel, head: &dyn Head, acts: &ActivationSet, concepts: &[usize]) -> f64 {
    let m = hiconcept_core::metrics::impact_matrix(model, head, acts, 64).unwrap();
    let vals: Vec<f64> = concepts.iter().flat_map(|&i| m[i].clone()).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Two reported concepts plus context over three dimensions, two classes.
pub fn two_concept_fixture() -> (ConceptModel, LinearHead, Tensor<f64>) {
    let model = model_from(
        t(&[3, 3], &[1.0, 0.2, 0.0, 0.1, 1.0, 0.3, 0.3, 0.3, 1.0]),
        0.2,
        t(&[3, 4], &[1.0, -0.5, 0.3, 0.0, -0.7, 1.2, 0.1, 0.4, 0.2, 0.2, -0.3, 0.9]),
        t(&[4], &[0.1, 0.05, -0.02, 0.2]),
        t(&[4, 3], &[0.9, -0.4, 0.1, -0.2, 1.1, 0.3, 0.5, 0.5, -0.6, 0.1, -0.2, 0.8]),
        t(&[3], &[0.0, 0.1, -0.1]),
        seq_split(),
    );
    let head = LinearHead::new(t(&[3, 2], &[1.5, -1.0, -1.2, 1.4, 0.3, 0.2]), t(&[2], &[0.05, -0.05]), OutputKind::Softmax);
    let acts = Tensor::from_fn(&[40, 3], |k| (((k * 37 + 11) % 29) as f64 / 29.0) - 0.3);
    (model, head, acts)
}
