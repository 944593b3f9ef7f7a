//! The concept bottleneck: concept vectors, thresholded similarities and the
//! decoder that maps concept probabilities back to activations.
//!
//! The last concept is the context concept. It takes part in decoding but is
//! never masked, filtered or reported.

use std::path::Path;

use hiconcept_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::rng::{derived_rng, stream};
use crate::targets::{ActivationBatch, Granularity, Head, SplitPoint};
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 500;

/// `n` concept directions plus threshold and filtering state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSet {
    /// `[n, d]`, unit rows.
    pub vectors: Tensor<f64>,
    pub beta: f64,
    pub active: Vec<bool>,
}

impl ConceptSet {
    pub fn new(vectors: Tensor<f64>, beta: Option<f64>) -> Result<Self> {
        if vectors.ndim() != 2 || vectors.shape()[0] < 2 || vectors.shape()[1] == 0 {
            return Err(Error::Invalid(format!(
                "concept vectors must be [n >= 2, d > 0], got {:?}",
                vectors.shape()
            )));
        }
        let n = vectors.shape()[0];
        let beta = beta.unwrap_or(1.0 / n as f64);
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Invalid(format!("beta {beta} outside (0, 1)")));
        }
        Ok(Self {
            vectors: normalize_rows(&vectors),
            beta,
            active: vec![true; n],
        })
    }

    pub fn n(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn context_index(&self) -> usize {
        self.n() - 1
    }

    /// Active concepts other than the context concept.
    pub fn reported(&self) -> Vec<usize> {
        reported(&self.active)
    }
}

pub(crate) fn reported(active: &[bool]) -> Vec<usize> {
    let ctx = active.len() - 1;
    (0..ctx).filter(|&i| active[i]).collect()
}

pub(crate) fn normalize_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let d = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Uniform draws on `[-1/sqrt(d), 1/sqrt(d)]`, row-normalized.
pub fn init_concepts(n: usize, d: usize, seed: u64) -> Result<ConceptSet> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 concepts (one plus the context concept), got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::Invalid("activation width must be positive".into()));
    }
    let a = 1.0 / (d as f64).sqrt();
    let mut rng = derived_rng(seed, stream::CONCEPT_INIT);
    let v = Tensor::from_fn(&[n, d], |_| rng.random_range(-a..=a));
    ConceptSet::new(v, None)
}

/// Elementwise: keep values `>= beta`, zero the rest.
pub fn threshold(v: &[f64], beta: f64) -> Vec<f64> {
    v.iter().map(|&x| if x >= beta { x } else { 0.0 }).collect()
}

/// Zero the given concept columns of `p` (`[.., n]`).
pub fn perturb(p: &Tensor<f64>, indices: &[usize]) -> Result<Tensor<f64>> {
    let n = p.last_dim();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Invalid(format!("concept index {bad} out of range for {n} concepts")));
    }
    let mut out = p.clone();
    for row in out.data_mut().chunks_mut(n) {
        for &i in indices {
            row[i] = 0.0;
        }
    }
    Ok(out)
}

/// Thresholded cosine between activations `[.., d]` and concepts `[n, d]`,
/// giving `[.., n]`. Zero-norm activations give 0.
pub(crate) fn probs_graph(g: &mut Graph<f64>, concepts: Var, acts: Var, beta: f64) -> Var {
    let shape = g.shape(acts).to_vec();
    let d = *shape.last().unwrap();
    let rows = shape.iter().product::<usize>() / d;
    let n = g.shape(concepts)[0];
    let flat = g.reshape(acts, &[rows, d]);
    let an = g.l2_normalize(flat);
    let cn = g.l2_normalize(concepts);
    let sim = g.matmul_t(an, cn, false, true);
    let p = g.threshold(sim, beta);
    let mut out = shape;
    *out.last_mut().unwrap() = n;
    g.reshape(p, &out)
}

/// Per-column 0/1 tensor broadcast to the shape of `p`.
pub(crate) fn column_mask(shape: &[usize], keep: &[f64]) -> Tensor<f64> {
    let n = keep.len();
    Tensor::from_fn(shape, |i| keep[i % n])
}

/// Graph handles from one surrogate pass.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateVars {
    /// Concept probabilities before decode masking.
    pub p: Var,
    pub recon: Var,
    pub out: Var,
}

/// Tensors from one surrogate pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub p: Tensor<f64>,
    pub recon: Tensor<f64>,
    pub probs: Tensor<f64>,
}

/// Concept vectors and decoder for one split point.
#[derive(Debug, Clone)]
pub struct ConceptModel {
    /// `concepts` `[n, d]` and decoder weights `dec.w1`, `dec.b1`, `dec.w2`, `dec.b2`.
    pub params: ParamStore<f64>,
    pub beta: f64,
    pub active: Vec<bool>,
    pub split: SplitPoint,
    /// Free-form provenance (config snapshot, method).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    beta: f64,
    active: Vec<bool>,
    split: SplitPoint,
    n: usize,
    d: usize,
    hidden: usize,
    meta: serde_json::Value,
}

impl ConceptModel {
    /// Wrap a concept set with a freshly initialized decoder.
    pub fn new(cs: &ConceptSet, split: SplitPoint, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Invalid("decoder hidden width must be positive".into()));
        }
        let (n, d) = (cs.n(), cs.d());
        let mut rng = derived_rng(seed, stream::DECODER_INIT);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-a..a))
        };
        let mut params = ParamStore::new();
        params.add("concepts", cs.vectors.clone());
        params.add("dec.w1", uniform(&[n, hidden], n));
        params.add("dec.b1", uniform(&[hidden], n));
        params.add("dec.w2", uniform(&[hidden, d], hidden));
        params.add("dec.b2", uniform(&[d], hidden));
        Ok(Self {
            params,
            beta: cs.beta,
            active: cs.active.clone(),
            split,
            meta: serde_json::Value::Null,
        })
    }

    pub fn n(&self) -> usize {
        self.vectors().shape()[0]
    }

    pub fn d(&self) -> usize {
        self.vectors().shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.param("dec.b1").len()
    }

    pub fn context_index(&self) -> usize {
        self.n() - 1
    }

    pub fn param(&self, name: &str) -> &Tensor<f64> {
        self.params.get(self.params.find(name).expect("concept model parameter"))
    }

    /// Raw concept vectors (normalized only when used).
    pub fn vectors(&self) -> &Tensor<f64> {
        self.param("concepts")
    }

    pub fn concept_set(&self) -> ConceptSet {
        ConceptSet {
            vectors: normalize_rows(self.vectors()),
            beta: self.beta,
            active: self.active.clone(),
        }
    }

    pub fn reported(&self) -> Vec<usize> {
        reported(&self.active)
    }

    pub fn set_decoder_trainable(&mut self, on: bool) {
        for name in ["dec.w1", "dec.b1", "dec.w2", "dec.b2"] {
            let id = self.params.find(name).unwrap();
            self.params.set_trainable(id, on);
        }
    }

    pub fn set_concepts_trainable(&mut self, on: bool) {
        let id = self.params.find("concepts").unwrap();
        self.params.set_trainable(id, on);
    }

    /// 0/1 per concept: decoded unless filtered out or listed in `removed`.
    /// The context concept is always decoded.
    pub fn decode_keep(&self, removed: &[usize]) -> Vec<f64> {
        let ctx = self.context_index();
        (0..self.n())
            .map(|i| {
                let on = (self.active[i] || i == ctx) && !removed.contains(&i);
                if on {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn check_head(&self, head: &dyn Head) -> Result<()> {
        if head.width() != self.d() {
            return Err(Error::Invalid(format!(
                "activation width {} does not match concept width {}",
                head.width(),
                self.d()
            )));
        }
        if head.split().granularity != self.split.granularity {
            return Err(Error::Invalid(format!(
                "concept model expects {:?} activations but the head is {:?}",
                self.split.granularity,
                head.split().granularity
            )));
        }
        Ok(())
    }

    #[doc(hidden)]
    pub fn probs_var(&self, g: &mut Graph<f64>, bound: &Bound, acts: Var) -> Var {
        let c = bound.var(self.params.find("concepts").unwrap());
        probs_graph(g, c, acts, self.beta)
    }

    #[doc(hidden)]
    pub fn decode_var(&self, g: &mut Graph<f64>, bound: &Bound, p: Var) -> Var {
        let v = |n: &str| bound.var(self.params.find(n).unwrap());
        let h = g.linear(p, v("dec.w1"), v("dec.b1"));
        let h = g.relu(h);
        g.linear(h, v("dec.w2"), v("dec.b2"))
    }

    /// Concept probabilities, reconstruction and head output, with `keep`
    /// (see [`Self::decode_keep`]) applied before decoding.
    pub fn forward_vars(
        &self,
        g: &mut Graph<f64>,
        bound: &Bound,
        head: &dyn Head,
        acts: Var,
        mask: Option<&Tensor<f64>>,
        keep: &[f64],
    ) -> SurrogateVars {
        let p = self.probs_var(g, bound, acts);
        let cm = column_mask(g.shape(p), keep);
        let pm = g.mul_const(p, cm);
        let recon = self.decode_var(g, bound, pm);
        let out = head.forward(g, recon, mask);
        SurrogateVars { p, recon, out }
    }

    pub fn concept_probs(&self, acts: &ActivationBatch<f64>) -> Tensor<f64> {
        concept_probs(acts, &self.concept_set())
    }

    /// Surrogate pass with `removed` concepts zeroed.
    pub fn forward(&self, head: &dyn Head, acts: &ActivationBatch<f64>, removed: &[usize]) -> Result<SurrogateOutput> {
        self.check_head(head)?;
        expect_layout(acts, self.split.granularity)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let a = g.constant(acts.values.clone());
        let keep = self.decode_keep(removed);
        let v = self.forward_vars(&mut g, &bound, head, a, acts.mask.as_ref(), &keep);
        Ok(SurrogateOutput {
            p: g.value(v.p).clone(),
            recon: g.value(v.recon).clone(),
            probs: g.value(v.out).clone(),
        })
    }

    pub fn state_hash(&self) -> String {
        let mut c = Container::new("concepts", self.meta_json());
        c.put_params("p.", &self.params);
        c.content_hash()
    }

    pub fn decoder_hash(&self) -> String {
        let mut s = ParamStore::<f64>::new();
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with("dec.")) {
            s.add(name, t.clone());
        }
        crate::checkpoint::params_hash(&s)
    }

    fn meta_json(&self) -> serde_json::Value {
        serde_json::to_value(CheckpointMeta {
            beta: self.beta,
            active: self.active.clone(),
            split: self.split,
            n: self.n(),
            d: self.d(),
            hidden: self.hidden(),
            meta: self.meta.clone(),
        })
        .expect("checkpoint metadata serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new("concepts", self.meta_json());
        c.put_params("p.", &self.params);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("concepts", path)?;
        let m: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        let cs = ConceptSet {
            vectors: Tensor::zeros(&[m.n, m.d]),
            beta: m.beta,
            active: m.active.clone(),
        };
        let mut model = ConceptModel::new(&cs, m.split, m.hidden, 0)?;
        c.load_params("p.", &mut model.params)?;
        model.beta = m.beta;
        model.active = m.active;
        model.meta = m.meta;
        Ok(model)
    }
}

/// Thresholded cosine similarities `[B, n]` or `[B, T, n]`.
pub fn concept_probs(acts: &ActivationBatch<f64>, cs: &ConceptSet) -> Tensor<f64> {
    let mut g = Graph::new();
    let a = g.constant(acts.values.clone());
    let c = g.constant(cs.vectors.clone());
    let p = probs_graph(&mut g, c, a, cs.beta);
    g.value(p).clone()
}

/// Convenience wrapper over [`ConceptModel::forward`] with nothing removed.
pub fn surrogate_forward(model: &ConceptModel, head: &dyn Head, acts: &ActivationBatch<f64>) -> Result<SurrogateOutput> {
    model.forward(head, acts, &[])
}

/// Granularity check shared by training and evaluation.
pub(crate) fn expect_layout(acts: &ActivationBatch<f64>, granularity: Granularity) -> Result<()> {
    let want = match granularity {
        Granularity::SequenceLevel => 2,
        Granularity::TokenLevel => 3,
    };
    if acts.values.ndim() != want {
        return Err(Error::Invalid(format!(
            "{granularity:?} split expects rank-{want} activations, got {:?}",
            acts.values.shape()
        )));
    }
    Ok(())
}
