//! Target classifiers and the encoder/head split.
//!
//! A model is a chain of stages. Splitting at layer `L` gives an encoder
//! that runs the input stage and stages `1..=L`, and a head that runs the
//! remaining stages and the output layer. The unsplit prediction is the same
//! chain, so `head(encoder(x))` reproduces it exactly at every split.
//!
//! All outputs have shape `[B, K, C]`: `K` categorical heads with `C`
//! classes each (see [`Task`]).

pub mod cnn;
mod linear;
mod train;
pub mod transformer;

use std::path::Path;

use hiconcept_tensor::{Binder, Elem, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use cnn::CnnConfig;
pub use linear::{LinearHead, OutputKind};
pub use train::{accuracy, train_target, TrainConfig, TrainReport};
pub use transformer::TransformerConfig;

use crate::checkpoint::Container;
use crate::datagen::{Dataset, Inputs, Task};
use crate::rng::{derived_rng, stream, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    ToyCnn,
    TextTransformer,
}

impl std::str::FromStr for TargetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_cnn" => Ok(TargetKind::ToyCnn),
            "text_transformer" => Ok(TargetKind::TextTransformer),
            other => Err(Error::Config(format!(
                "unsupported target kind '{other}' (expected toy_cnn or text_transformer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    TokenLevel,
    SequenceLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPoint {
    pub layer_index: usize,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    ToyCnn(CnnConfig),
    TextTransformer(TransformerConfig),
}

impl ArchConfig {
    pub fn kind(&self) -> TargetKind {
        match self {
            ArchConfig::ToyCnn(_) => TargetKind::ToyCnn,
            ArchConfig::TextTransformer(_) => TargetKind::TextTransformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchConfig::ToyCnn(c) => c.validate(),
            ArchConfig::TextTransformer(c) => c.validate(),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            ArchConfig::ToyCnn(c) => Task::MultilabelBinary { labels: c.outputs },
            ArchConfig::TextTransformer(c) => Task::Multiclass { classes: c.classes },
        }
    }

    fn last_layer(&self) -> usize {
        match self {
            ArchConfig::ToyCnn(c) => c.last_layer(),
            ArchConfig::TextTransformer(c) => c.last_layer(),
        }
    }

    fn first_layer(&self) -> usize {
        match self {
            ArchConfig::ToyCnn(_) => 1,
            ArchConfig::TextTransformer(_) => 0,
        }
    }
}

/// Model inputs for one batch.
#[derive(Debug, Clone)]
pub enum Batch<T> {
    /// `[B, H, W, 3]` in `[0, 1]`.
    Images(Tensor<T>),
    /// Row-major `[B, T]` ids padded with 0, and the matching 0/1 mask.
    Tokens { ids: Vec<usize>, mask: Tensor<T> },
}

impl<T: Elem> Batch<T> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Images(t) => t.shape()[0],
            Batch::Tokens { mask, .. } => mask.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pad token sequences to the longest in the batch.
pub fn token_batch<T: Elem>(docs: &[&[u32]]) -> Batch<T> {
    let t = docs.iter().map(|d| d.len()).max().unwrap_or(0).max(1);
    let b = docs.len();
    let mut ids = vec![0usize; b * t];
    let mut mask = vec![T::zero(); b * t];
    for (i, d) in docs.iter().enumerate() {
        for (j, &tok) in d.iter().enumerate() {
            ids[i * t + j] = tok as usize;
            mask[i * t + j] = T::one();
        }
    }
    Batch::Tokens {
        ids,
        mask: Tensor::new(&[b, t], mask).expect("mask shape"),
    }
}

pub fn make_batch<T: Elem>(ds: &Dataset, idx: &[usize]) -> Batch<T> {
    match &ds.inputs {
        Inputs::Images { size, .. } => {
            let px = size * size * 3;
            let mut data = Vec::with_capacity(idx.len() * px);
            for &i in idx {
                data.extend(ds.image(i).iter().map(|&v| T::lit(v as f64 / 255.0)));
            }
            Batch::Images(Tensor::new(&[idx.len(), *size, *size, 3], data).expect("image batch"))
        }
        Inputs::Tokens { docs } => {
            let d: Vec<&[u32]> = idx.iter().map(|&i| docs[i].as_slice()).collect();
            token_batch(&d)
        }
    }
}

/// Activations flowing between stages; `mask` is `[B, T]` for token layouts.
pub(crate) struct Flow<T> {
    pub var: Var,
    pub mask: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct TargetModel<T> {
    pub arch: ArchConfig,
    pub params: ParamStore<T>,
    pub seed: u64,
    pub frozen: bool,
    pub metadata: serde_json::Value,
}

/// Fresh model with seeded initial weights.
pub fn build_target(arch: &ArchConfig, seed: u64) -> Result<TargetModel<f32>> {
    arch.validate()?;
    let mut rng = derived_rng(seed, stream::TARGET_INIT);
    let params = match arch {
        ArchConfig::ToyCnn(c) => cnn::init_params(c, &mut rng),
        ArchConfig::TextTransformer(c) => transformer::init_params(c, &mut rng),
    };
    Ok(TargetModel {
        arch: arch.clone(),
        params,
        seed,
        frozen: false,
        metadata: serde_json::Value::Null,
    })
}

impl<T: Elem> TargetModel<T> {
    pub fn kind(&self) -> TargetKind {
        self.arch.kind()
    }

    pub fn task(&self) -> Task {
        self.arch.task()
    }

    pub fn cast<U: Elem>(&self) -> TargetModel<U> {
        TargetModel {
            arch: self.arch.clone(),
            params: self.params.cast(),
            seed: self.seed,
            frozen: self.frozen,
            metadata: self.metadata.clone(),
        }
    }

    pub fn last_layer(&self) -> usize {
        self.arch.last_layer()
    }

    /// Validate a layer index and derive its granularity.
    pub fn split_point(&self, layer: usize) -> Result<SplitPoint> {
        let (lo, hi) = (self.arch.first_layer(), self.last_layer());
        if layer < lo || layer > hi {
            return Err(Error::Invalid(format!(
                "split layer {layer} out of range {lo}..={hi} for {:?}",
                self.kind()
            )));
        }
        let granularity = if layer == hi {
            Granularity::SequenceLevel
        } else {
            Granularity::TokenLevel
        };
        Ok(SplitPoint {
            layer_index: layer,
            granularity,
        })
    }

    pub fn default_split(&self) -> SplitPoint {
        self.split_point(self.last_layer()).expect("last layer is valid")
    }

    pub fn width_at(&self, layer: usize) -> usize {
        match &self.arch {
            ArchConfig::ToyCnn(c) => c.width_at(layer),
            ArchConfig::TextTransformer(c) => c.d_model,
        }
    }

    pub(crate) fn input_flow(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        batch: &Batch<T>,
        drop: Option<&mut Rng>,
    ) -> Flow<T> {
        match (&self.arch, batch) {
            (ArchConfig::ToyCnn(_), Batch::Images(x)) => Flow {
                var: g.constant(x.clone()),
                mask: None,
            },
            (ArchConfig::TextTransformer(c), Batch::Tokens { ids, mask }) => {
                let e = transformer::embed(c, g, b, ids, mask.shape()[0]);
                let var = transformer::after_embed(c, g, e, mask, drop);
                Flow {
                    var,
                    mask: Some(mask.clone()),
                }
            }
            _ => panic!("batch type does not match model kind"),
        }
    }

    pub(crate) fn stage(&self, g: &mut Graph<T>, b: &mut Binder<T>, k: usize, f: Flow<T>) -> Flow<T> {
        match &self.arch {
            ArchConfig::ToyCnn(c) => Flow {
                var: cnn::stage(c, g, b, k, f.var),
                mask: f.mask,
            },
            ArchConfig::TextTransformer(c) => {
                let mask = f.mask.expect("transformer flow carries a mask");
                if k <= c.layers {
                    let var = transformer::encoder_layer(c, g, b, k, f.var, &mask);
                    Flow { var, mask: Some(mask) }
                } else {
                    Flow {
                        var: g.masked_mean_pool(f.var, &mask),
                        mask: None,
                    }
                }
            }
        }
    }

    pub(crate) fn output(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Var {
        match &self.arch {
            ArchConfig::ToyCnn(_) => cnn::head(g, b, x),
            ArchConfig::TextTransformer(c) => transformer::head(c, g, b, x),
        }
    }

    /// Scaled token embeddings `[B, T, d]` before positional encoding.
    pub(crate) fn embed_tokens(&self, ids: &[usize], batch: usize) -> Result<Tensor<T>> {
        let ArchConfig::TextTransformer(c) = &self.arch else {
            return Err(Error::Invalid("token embeddings need a text_transformer target".into()));
        };
        let mut g = Graph::new();
        let mut b = self.params.binder(false);
        let e = transformer::embed(c, &mut g, &mut b, ids, batch);
        Ok(g.value(e).clone())
    }

    /// Encoder up to `layer` starting from token embeddings `e` on `g`.
    pub(crate) fn phi_from_embeddings(&self, g: &mut Graph<T>, e: Var, mask: &Tensor<T>, layer: usize) -> Flow<T> {
        let ArchConfig::TextTransformer(c) = &self.arch else {
            panic!("phi_from_embeddings on a non-text target");
        };
        let mut b = self.params.binder(false);
        let mut f = Flow {
            var: transformer::after_embed(c, g, e, mask, None),
            mask: Some(mask.clone()),
        };
        for k in 1..=layer {
            f = self.stage(g, &mut b, k, f);
        }
        f
    }

    /// Encoder up to `layer` on a graph.
    pub(crate) fn phi_graph(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        batch: &Batch<T>,
        layer: usize,
        mut drop: Option<&mut Rng>,
    ) -> Flow<T> {
        let mut f = self.input_flow(g, b, batch, drop.as_deref_mut());
        for k in 1..=layer {
            f = self.stage(g, b, k, f);
        }
        // Conv outputs are exposed as token layouts; give them an all-ones mask.
        if f.mask.is_none() && g.shape(f.var).len() == 3 {
            let s = g.shape(f.var);
            f.mask = Some(Tensor::full(&[s[0], s[1]], T::one()));
        }
        f
    }

    /// Head from `layer` on a graph. `mask` is required for token layouts of the transformer.
    pub(crate) fn psi_graph(&self, g: &mut Graph<T>, b: &mut Binder<T>, f: Flow<T>, layer: usize) -> Var {
        let mut f = f;
        if self.kind() == TargetKind::ToyCnn {
            f.mask = None;
        }
        for k in layer + 1..=self.last_layer() {
            f = self.stage(g, b, k, f);
        }
        self.output(g, b, f.var)
    }

    /// Full forward pass; `drop` enables dropout (training only).
    pub(crate) fn forward_graph(&self, g: &mut Graph<T>, b: &mut Binder<T>, batch: &Batch<T>, drop: Option<&mut Rng>) -> Var {
        let last = self.last_layer();
        let f = self.phi_graph(g, b, batch, last, drop);
        self.psi_graph(g, b, f, last)
    }

    /// Class probabilities `[B, K, C]`.
    pub fn predict(&self, batch: &Batch<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let mut b = self.params.binder(false);
        let out = self.forward_graph(&mut g, &mut b, batch, None);
        g.value(out).clone()
    }

    /// Predictions for dataset rows `idx`, in chunks of `batch_size`.
    pub fn predict_dataset(&self, ds: &Dataset, idx: &[usize], batch_size: usize) -> Tensor<T> {
        let parts: Vec<Tensor<T>> = idx
            .chunks(batch_size.max(1))
            .map(|c| self.predict(&make_batch(ds, c)))
            .collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }

    /// Encoder and head for a split at `layer`.
    pub fn split_at(&self, layer: usize) -> Result<(SplitEncoder<'_, T>, SplitHead<'_, T>)> {
        let split = self.split_point(layer)?;
        Ok((SplitEncoder { model: self, split }, SplitHead { model: self, split }))
    }

    pub fn params_hash(&self) -> String {
        crate::checkpoint::params_hash(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "arch": self.arch,
            "seed": self.seed,
            "frozen": self.frozen,
            "dtype": T::DTYPE.name(),
            "metadata": self.metadata,
        });
        let mut c = Container::new("target", meta);
        c.put_params("p.", &self.params);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("target", path)?;
        let arch: ArchConfig = serde_json::from_value(c.meta["arch"].clone())?;
        let seed = c.meta["seed"].as_u64().unwrap_or(0);
        let fresh = build_target(&arch, seed)?;
        let mut params = fresh.params.cast::<T>();
        c.load_params("p.", &mut params)?;
        Ok(TargetModel {
            arch,
            params,
            seed,
            frozen: c.meta["frozen"].as_bool().unwrap_or(false),
            metadata: c.meta["metadata"].clone(),
        })
    }
}

/// The encoder half of a split model.
pub struct SplitEncoder<'a, T> {
    pub model: &'a TargetModel<T>,
    pub split: SplitPoint,
}

/// Activations `[B, d]` or `[B, T, d]` plus the `[B, T]` mask for token layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch<T> {
    pub values: Tensor<T>,
    pub mask: Option<Tensor<T>>,
}

impl<T: Elem> SplitEncoder<'_, T> {
    pub fn encode(&self, batch: &Batch<T>) -> ActivationBatch<T> {
        let mut g = Graph::new();
        let mut b = self.model.params.binder(false);
        let f = self.model.phi_graph(&mut g, &mut b, batch, self.split.layer_index, None);
        ActivationBatch {
            values: g.value(f.var).clone(),
            mask: f.mask,
        }
    }

    pub fn width(&self) -> usize {
        self.model.width_at(self.split.layer_index)
    }
}

/// The head half of a split model: activations to class probabilities.
pub struct SplitHead<'a, T> {
    pub model: &'a TargetModel<T>,
    pub split: SplitPoint,
}

impl<T: Elem> SplitHead<'_, T> {
    pub fn forward_graph(&self, g: &mut Graph<T>, acts: Var, mask: Option<&Tensor<T>>) -> Var {
        let mut b = self.model.params.binder(false);
        let f = Flow {
            var: acts,
            mask: mask.cloned(),
        };
        self.model.psi_graph(g, &mut b, f, self.split.layer_index)
    }

    pub fn predict(&self, acts: &ActivationBatch<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let a = g.constant(acts.values.clone());
        let out = self.forward_graph(&mut g, a, acts.mask.as_ref());
        g.value(out).clone()
    }
}

/// The frozen head as seen by the concept model (always `f64`).
pub trait Head {
    fn task(&self) -> Task;
    fn split(&self) -> SplitPoint;
    fn width(&self) -> usize;
    /// `[B, K, C]` probabilities from activations `acts` on `g`.
    fn forward(&self, g: &mut Graph<f64>, acts: Var, mask: Option<&Tensor<f64>>) -> Var;

    fn predict(&self, acts: &Tensor<f64>, mask: Option<&Tensor<f64>>) -> Tensor<f64> {
        let mut g = Graph::new();
        let a = g.constant(acts.clone());
        let out = self.forward(&mut g, a, mask);
        g.value(out).clone()
    }
}

impl Head for SplitHead<'_, f64> {
    fn task(&self) -> Task {
        self.model.task()
    }

    fn split(&self) -> SplitPoint {
        self.split
    }

    fn width(&self) -> usize {
        self.model.width_at(self.split.layer_index)
    }

    fn forward(&self, g: &mut Graph<f64>, acts: Var, mask: Option<&Tensor<f64>>) -> Var {
        self.forward_graph(g, acts, mask)
    }
}

/// Cached encoder outputs for a set of samples, stored in `f64`.
/// Token layouts keep only the unpadded positions of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub split: SplitPoint,
    pub width: usize,
    values: Vec<f64>,
    offsets: Vec<usize>,
    lengths: Vec<usize>,
}

impl ActivationSet {
    pub fn new(split: SplitPoint, width: usize) -> Self {
        Self {
            split,
            width,
            values: Vec::new(),
            offsets: Vec::new(),
            lengths: Vec::new(),
        }
    }

    /// Append the samples of `acts`, dropping padded positions.
    pub fn push<T: Elem>(&mut self, acts: &ActivationBatch<T>) {
        let v = &acts.values;
        let d = self.width;
        let b = v.shape()[0];
        match self.split.granularity {
            Granularity::SequenceLevel => {
                for i in 0..b {
                    self.offsets.push(self.values.len());
                    self.lengths.push(1);
                    self.values.extend(v.data()[i * d..(i + 1) * d].iter().map(|x| x.as_f64()));
                }
            }
            Granularity::TokenLevel => {
                let t = v.shape()[1];
                for i in 0..b {
                    self.offsets.push(self.values.len());
                    let mut n = 0;
                    for j in 0..t {
                        let keep = acts.mask.as_ref().is_none_or(|m| m.data()[i * t + j] != T::zero());
                        if keep {
                            let row = &v.data()[(i * t + j) * d..(i * t + j + 1) * d];
                            self.values.extend(row.iter().map(|x| x.as_f64()));
                            n += 1;
                        }
                    }
                    self.lengths.push(n);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Positions stored for sample `i`.
    pub fn length(&self, i: usize) -> usize {
        self.lengths[i]
    }

    /// Raw rows for sample `i` (`length(i) x width`).
    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.offsets[i];
        &self.values[s..s + self.lengths[i] * self.width]
    }

    /// Re-pad the selected samples into a batch.
    pub fn batch(&self, idx: &[usize]) -> ActivationBatch<f64> {
        let d = self.width;
        match self.split.granularity {
            Granularity::SequenceLevel => {
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    data.extend_from_slice(self.sample(i));
                }
                ActivationBatch {
                    values: Tensor::new(&[idx.len(), d], data).expect("batch shape"),
                    mask: None,
                }
            }
            Granularity::TokenLevel => {
                let t = idx.iter().map(|&i| self.lengths[i]).max().unwrap_or(0).max(1);
                let mut data = vec![0.0; idx.len() * t * d];
                let mut mask = vec![0.0; idx.len() * t];
                for (r, &i) in idx.iter().enumerate() {
                    let n = self.lengths[i];
                    data[r * t * d..(r * t + n) * d].copy_from_slice(self.sample(i));
                    mask[r * t..r * t + n].iter_mut().for_each(|m| *m = 1.0);
                }
                ActivationBatch {
                    values: Tensor::new(&[idx.len(), t, d], data).expect("batch shape"),
                    mask: Some(Tensor::new(&[idx.len(), t], mask).expect("mask shape")),
                }
            }
        }
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> ActivationSet {
        let mut out = ActivationSet::new(self.split, self.width);
        for &i in idx {
            out.offsets.push(out.values.len());
            out.lengths.push(self.lengths[i]);
            out.values.extend_from_slice(self.sample(i));
        }
        out
    }
}

/// Encode dataset rows `idx` at `layer`, caching the result in `f64`.
pub fn encode_dataset<T: Elem>(
    model: &TargetModel<T>,
    ds: &Dataset,
    idx: &[usize],
    layer: usize,
    batch_size: usize,
) -> Result<ActivationSet> {
    let (enc, _) = model.split_at(layer)?;
    let mut set = ActivationSet::new(enc.split, enc.width());
    for chunk in idx.chunks(batch_size.max(1)) {
        let acts = enc.encode(&make_batch(ds, chunk));
        if !acts.values.all_finite() {
            return Err(Error::Numerical(format!("non-finite activations at layer {layer}")));
        }
        set.push(&acts);
    }
    Ok(set)
}

/// Head predictions for every sample of an activation set, `[N, K, C]`.
pub fn head_predictions(head: &dyn Head, acts: &ActivationSet, batch_size: usize) -> Tensor<f64> {
    let idx: Vec<usize> = (0..acts.len()).collect();
    let parts: Vec<Tensor<f64>> = idx
        .chunks(batch_size.max(1))
        .map(|c| {
            let b = acts.batch(c);
            head.predict(&b.values, b.mask.as_ref())
        })
        .collect();
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Argmax over the class axis of `[N, K, C]`, ties to the lower class.
pub fn argmax_classes(probs: &Tensor<f64>) -> Vec<usize> {
    probs
        .data()
        .chunks(probs.last_dim())
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::corpus::build_text_dataset;

    fn small_cnn() -> ArchConfig {
        ArchConfig::ToyCnn(CnnConfig {
            canvas_size: 32,
            channels: 4,
            conv_layers: 2,
            hidden: 8,
            outputs: 3,
            ..Default::default()
        })
    }

    fn small_transformer(vocab: usize) -> ArchConfig {
        ArchConfig::TextTransformer(TransformerConfig {
            vocab_size: vocab,
            d_model: 8,
            heads: 2,
            layers: 2,
            ff_dim: 8,
            classes: 3,
            ..Default::default()
        })
    }

    fn text_ds() -> Dataset {
        let docs = vec![
            vec!["a".to_string(), "b".into(), "c".into()],
            vec!["c".to_string()],
            vec!["b".to_string(), "b".into(), "a".into(), "d".into(), "e".into()],
        ];
        build_text_dataset(docs, vec![0, 1, 2]).unwrap()
    }

    fn image_batch(n: usize, size: usize) -> Batch<f64> {
        Batch::Images(Tensor::from_fn(&[n, size, size, 3], |i| ((i * 37) % 101) as f64 / 100.0))
    }

    #[test]
    fn cnn_split_reproduces_prediction_at_every_layer() {
        let m = build_target(&small_cnn(), 3).unwrap().cast::<f64>();
        let batch = image_batch(2, 32);
        let full = m.predict(&batch);
        assert_eq!(full.shape(), &[2, 3, 2]);
        for layer in 1..=m.last_layer() {
            let (enc, head) = m.split_at(layer).unwrap();
            let acts = enc.encode(&batch);
            let again = head.predict(&acts);
            assert!(full.max_abs_diff(&again) < 1e-12, "layer {layer}");
        }
        assert!(m.split_at(0).is_err());
        assert!(m.split_at(4).is_err());
        assert_eq!(m.default_split().granularity, Granularity::SequenceLevel);
        assert_eq!(m.split_point(1).unwrap().granularity, Granularity::TokenLevel);
    }

    #[test]
    fn transformer_split_reproduces_prediction_through_cache() {
        let ds = text_ds();
        let vocab = ds.vocab.as_ref().unwrap().len();
        let m = build_target(&small_transformer(vocab), 5).unwrap().cast::<f64>();
        let idx = [0, 1, 2];
        let full = m.predict_dataset(&ds, &idx, 3);
        for layer in 0..=m.last_layer() {
            let set = encode_dataset(&m, &ds, &idx, layer, 2).unwrap();
            let (_, head) = m.split_at(layer).unwrap();
            let preds = head_predictions(&head, &set, 3);
            assert!(full.max_abs_diff(&preds) < 1e-9, "layer {layer}");
        }
        let set = encode_dataset(&m, &ds, &idx, 1, 3).unwrap();
        assert_eq!(set.length(2), 5);
        assert_eq!(set.length(1), 1);
    }

    #[test]
    fn padding_does_not_change_predictions() {
        let ds = text_ds();
        let vocab = ds.vocab.as_ref().unwrap().len();
        let m = build_target(&small_transformer(vocab), 9).unwrap().cast::<f64>();
        let alone = m.predict_dataset(&ds, &[1], 1);
        let padded = m.predict_dataset(&ds, &[2, 1], 2);
        assert!(alone.max_abs_diff(&padded.select_rows(&[1])) < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.hicpt");
        let m = build_target(&small_cnn(), 1).unwrap();
        m.save(&path).unwrap();
        let back = TargetModel::<f32>::load(&path).unwrap();
        assert_eq!(back.arch, m.arch);
        assert_eq!(back.params_hash(), m.params_hash());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = build_target(&small_cnn(), 4).unwrap();
        let b = build_target(&small_cnn(), 4).unwrap();
        let c = build_target(&small_cnn(), 5).unwrap();
        assert_eq!(a.params_hash(), b.params_hash());
        assert_ne!(a.params_hash(), c.params_hash());
    }

    #[test]
    fn activation_set_select_and_batch() {
        let split = SplitPoint {
            layer_index: 1,
            granularity: Granularity::TokenLevel,
        };
        let mut set = ActivationSet::new(split, 2);
        let values = Tensor::new(&[2, 3, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        let mask = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        set.push(&ActivationBatch {
            values,
            mask: Some(mask),
        });
        assert_eq!(set.sample(0), &[0.0, 1.0, 2.0, 3.0]);
        let b = set.select(&[1, 0]).batch(&[1]);
        assert_eq!(b.values.shape(), &[1, 2, 2]);
        assert_eq!(b.mask.unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_head_outputs_distributions() {
        let head = LinearHead::new(
            Tensor::new(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 2.0, 0.0]).unwrap(),
            Tensor::zeros(&[3]),
            OutputKind::Softmax,
        );
        let p = head.predict(&Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap(), None);
        assert_eq!(p.shape(), &[1, 1, 3]);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }
}
