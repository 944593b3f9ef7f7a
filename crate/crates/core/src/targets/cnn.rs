//! Convolutional target for the toy image benchmark.

use hiconcept_tensor::{Binder, Elem, Graph, ParamStore, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub canvas_size: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub conv_layers: usize,
    pub padding: usize,
    /// Width of the first fully connected layer.
    pub hidden: usize,
    pub outputs: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            in_channels: 3,
            channels: 64,
            kernel: 5,
            conv_layers: 3,
            padding: 0,
            hidden: 128,
            outputs: 15,
        }
    }
}

impl CnnConfig {
    /// `(height, width, channels)` after each conv block, input first.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut s = vec![(self.canvas_size, self.canvas_size, self.in_channels)];
        let mut h = self.canvas_size;
        for _ in 0..self.conv_layers {
            h = (h + 2 * self.padding + 1).saturating_sub(self.kernel) / 2;
            s.push((h, h, self.channels));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_layers == 0 || self.channels == 0 || self.kernel == 0 || self.hidden == 0 || self.outputs == 0 {
            return bad("toy_cnn sizes must be positive".into());
        }
        let mut h = self.canvas_size;
        for i in 0..self.conv_layers {
            if h + 2 * self.padding < self.kernel + 1 {
                return bad(format!("canvas {} too small for conv block {}", self.canvas_size, i + 1));
            }
            h = (h + 2 * self.padding + 1 - self.kernel) / 2;
        }
        Ok(())
    }

    /// Split layers: conv blocks `1..=conv_layers`, then the hidden layer.
    pub fn last_layer(&self) -> usize {
        self.conv_layers + 1
    }

    pub fn width_at(&self, layer: usize) -> usize {
        if layer <= self.conv_layers {
            self.channels
        } else {
            self.hidden
        }
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
}

pub(crate) fn init_params(cfg: &CnnConfig, rng: &mut Rng) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    let mut cin = cfg.in_channels;
    for i in 0..cfg.conv_layers {
        let fan_in = cfg.kernel * cfg.kernel * cin;
        let bound = 1.0 / (fan_in as f64).sqrt();
        p.add(format!("conv{}.w", i + 1), uniform(rng, &[fan_in, cfg.channels], bound));
        p.add(format!("conv{}.b", i + 1), uniform(rng, &[cfg.channels], bound));
        cin = cfg.channels;
    }
    let (h, w, c) = *cfg.shapes().last().unwrap();
    let flat = h * w * c;
    let b1 = 1.0 / (flat as f64).sqrt();
    p.add("fc1.w", uniform(rng, &[flat, cfg.hidden], b1));
    p.add("fc1.b", uniform(rng, &[cfg.hidden], b1));
    let b2 = 1.0 / (cfg.hidden as f64).sqrt();
    p.add("fc2.w", uniform(rng, &[cfg.hidden, cfg.outputs], b2));
    p.add("fc2.b", uniform(rng, &[cfg.outputs], b2));
    p
}

/// Run split stage `k`. Conv stages take and return `[B, H*W, C]`
/// (the input stage is `[B, H, W, C]`); the final stage returns `[B, hidden]`.
pub(crate) fn stage<T: Elem>(cfg: &CnnConfig, g: &mut Graph<T>, b: &mut Binder<T>, k: usize, x: Var) -> Var {
    let shapes = cfg.shapes();
    let batch = g.shape(x)[0];
    if k <= cfg.conv_layers {
        let (h, w, c) = shapes[k - 1];
        let x = g.reshape(x, &[batch, h, w, c]);
        let wv = b.named(g, &format!("conv{k}.w"));
        let bv = b.named(g, &format!("conv{k}.b"));
        let y = g.conv2d(x, wv, bv, cfg.kernel, cfg.padding);
        let y = g.relu(y);
        let y = g.max_pool2(y);
        let (oh, ow, oc) = shapes[k];
        g.reshape(y, &[batch, oh * ow, oc])
    } else {
        let (h, w, c) = shapes[cfg.conv_layers];
        let x = g.reshape(x, &[batch, h * w * c]);
        let wv = b.named(g, "fc1.w");
        let bv = b.named(g, "fc1.b");
        let y = g.linear(x, wv, bv);
        g.relu(y)
    }
}

pub(crate) fn head<T: Elem>(g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Var {
    let wv = b.named(g, "fc2.w");
    let bv = b.named(g, "fc2.b");
    let logits = g.linear(x, wv, bv);
    g.sigmoid_pair(logits)
}
