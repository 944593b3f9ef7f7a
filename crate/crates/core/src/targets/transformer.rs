//! Small post-LN transformer encoder for text classification.

use hiconcept_tensor::{Binder, Elem, Graph, ParamStore, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub classes: usize,
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 200,
            heads: 2,
            layers: 6,
            ff_dim: 200,
            dropout: 0.2,
            max_len: 512,
            classes: 2,
            positional_encoding: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return bad("layers, ff_dim and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        Ok(())
    }

    /// Split layers: 0 = embeddings, `1..=layers` = encoder outputs,
    /// `layers + 1` = mean-pooled sequence vector.
    pub fn last_layer(&self) -> usize {
        self.layers + 1
    }

    /// Logit count: one sigmoid logit for binary tasks, else one per class.
    pub fn logits(&self) -> usize {
        if self.classes == 2 {
            1
        } else {
            self.classes
        }
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
}

fn add_linear(p: &mut ParamStore<f32>, rng: &mut Rng, name: &str, i: usize, o: usize) {
    let bound = 1.0 / (i as f64).sqrt();
    p.add(format!("{name}.w"), uniform(rng, &[i, o], bound));
    p.add(format!("{name}.b"), uniform(rng, &[o], bound));
}

pub(crate) fn init_params(cfg: &TransformerConfig, rng: &mut Rng) -> ParamStore<f32> {
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    p.add("emb", uniform(rng, &[cfg.vocab_size, d], 0.1));
    for l in 1..=cfg.layers {
        for n in ["q", "k", "v", "o"] {
            add_linear(&mut p, rng, &format!("enc{l}.{n}"), d, d);
        }
        add_linear(&mut p, rng, &format!("enc{l}.ff1"), d, cfg.ff_dim);
        add_linear(&mut p, rng, &format!("enc{l}.ff2"), cfg.ff_dim, d);
        for ln in ["ln1", "ln2"] {
            p.add(format!("enc{l}.{ln}.g"), Tensor::full(&[d], 1.0));
            p.add(format!("enc{l}.{ln}.b"), Tensor::zeros(&[d]));
        }
    }
    add_linear(&mut p, rng, "head", d, cfg.logits());
    p
}

pub fn sinusoid(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// `[B, T]` mask broadcast to `[B, T, d]`.
pub(crate) fn expand_mask<T: Elem>(mask: &Tensor<T>, d: usize) -> Tensor<T> {
    let m = mask.data();
    Tensor::from_fn(&[m.len(), d], |i| m[i / d])
        .reshape(&[mask.shape()[0], mask.shape()[1], d])
        .expect("mask shape")
}

/// Scaled token embeddings `[B, T, d]`, before positional encoding.
pub(crate) fn embed<T: Elem>(cfg: &TransformerConfig, g: &mut Graph<T>, b: &mut Binder<T>, ids: &[usize], batch: usize) -> Var {
    let t = ids.len() / batch;
    let table = b.named(g, "emb");
    let e = g.embedding(table, ids);
    let e = g.reshape(e, &[batch, t, cfg.d_model]);
    g.scale(e, T::lit((cfg.d_model as f64).sqrt()))
}

/// Positional encoding, dropout and pad zeroing applied to embeddings.
pub(crate) fn after_embed<T: Elem>(
    cfg: &TransformerConfig,
    g: &mut Graph<T>,
    e: Var,
    mask: &Tensor<T>,
    drop: Option<&mut Rng>,
) -> Var {
    let (batch, t, d) = (mask.shape()[0], mask.shape()[1], cfg.d_model);
    let mut x = e;
    if cfg.positional_encoding {
        let pe = sinusoid(t, d);
        let tiled = Tensor::from_fn(&[batch, t, d], |i| T::lit(pe[i % (t * d)]));
        x = g.add_const(x, &tiled);
    }
    if let Some(rng) = drop {
        if cfg.dropout > 0.0 {
            let keep = 1.0 - cfg.dropout;
            let m = Tensor::from_fn(&[batch, t, d], |_| {
                if rng.random::<f64>() < keep {
                    T::lit(1.0 / keep)
                } else {
                    T::zero()
                }
            });
            x = g.mul_const(x, m);
        }
    }
    g.mul_const(x, expand_mask(mask, d))
}

fn attention_bias<T: Elem>(mask: &Tensor<T>, heads: usize) -> Tensor<T> {
    let (batch, t) = (mask.shape()[0], mask.shape()[1]);
    let m = mask.data();
    Tensor::from_fn(&[batch * heads, t, t], |i| {
        let bh = i / (t * t);
        let key = i % t;
        if m[(bh / heads) * t + key] == T::zero() {
            T::lit(-1e9)
        } else {
            T::zero()
        }
    })
}

fn lin<T: Elem>(g: &mut Graph<T>, b: &mut Binder<T>, x: Var, name: &str) -> Var {
    let w = b.named(g, &format!("{name}.w"));
    let bias = b.named(g, &format!("{name}.b"));
    g.linear(x, w, bias)
}

/// Encoder layer `l` on `[B, T, d]`.
pub(crate) fn encoder_layer<T: Elem>(
    cfg: &TransformerConfig,
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    l: usize,
    x: Var,
    mask: &Tensor<T>,
) -> Var {
    let (batch, t, d) = (mask.shape()[0], mask.shape()[1], cfg.d_model);
    let h = cfg.heads;
    let dh = d / h;
    let split_heads = |g: &mut Graph<T>, v: Var| {
        let v = g.reshape(v, &[batch, t, h, dh]);
        let v = g.permute(v, &[0, 2, 1, 3]);
        g.reshape(v, &[batch * h, t, dh])
    };
    let q = lin(g, b, x, &format!("enc{l}.q"));
    let k = lin(g, b, x, &format!("enc{l}.k"));
    let v = lin(g, b, x, &format!("enc{l}.v"));
    let (q, k, v) = (split_heads(g, q), split_heads(g, k), split_heads(g, v));
    let s = g.matmul_t(q, k, false, true);
    let s = g.scale(s, T::lit(1.0 / (dh as f64).sqrt()));
    let s = g.add_const(s, &attention_bias(mask, h));
    let a = g.softmax(s);
    let c = g.matmul(a, v);
    let c = g.reshape(c, &[batch, h, t, dh]);
    let c = g.permute(c, &[0, 2, 1, 3]);
    let c = g.reshape(c, &[batch, t, d]);
    let o = lin(g, b, c, &format!("enc{l}.o"));
    let r = g.add(x, o);
    let (g1, b1) = (b.named(g, &format!("enc{l}.ln1.g")), b.named(g, &format!("enc{l}.ln1.b")));
    let x1 = g.layer_norm(r, g1, b1);
    let f = lin(g, b, x1, &format!("enc{l}.ff1"));
    let f = g.relu(f);
    let f = lin(g, b, f, &format!("enc{l}.ff2"));
    let r = g.add(x1, f);
    let (g2, b2) = (b.named(g, &format!("enc{l}.ln2.g")), b.named(g, &format!("enc{l}.ln2.b")));
    let x2 = g.layer_norm(r, g2, b2);
    g.mul_const(x2, expand_mask(mask, d))
}

pub(crate) fn head<T: Elem>(cfg: &TransformerConfig, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Var {
    let logits = lin(g, b, x, "head");
    if cfg.classes == 2 {
        g.sigmoid_pair(logits)
    } else {
        let batch = g.shape(logits)[0];
        let l = g.reshape(logits, &[batch, 1, cfg.classes]);
        g.softmax(l)
    }
}
