//! A fixed linear head, used as a small known target in tests and examples.

use hiconcept_tensor::{Graph, Tensor, Var};

use super::{Granularity, Head, SplitPoint};
use crate::datagen::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// One logit per label, each turned into a (negative, positive) pair.
    SigmoidPair,
    /// One logit per class with a softmax over them.
    Softmax,
}

/// `probs = out(pool(acts) W + b)`; token layouts are mean pooled first.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
    pub kind: OutputKind,
    pub granularity: Granularity,
}

impl LinearHead {
    pub fn new(weight: Tensor<f64>, bias: Tensor<f64>, kind: OutputKind) -> Self {
        assert_eq!(weight.ndim(), 2);
        assert_eq!(bias.shape(), &[weight.shape()[1]]);
        Self {
            weight,
            bias,
            kind,
            granularity: Granularity::SequenceLevel,
        }
    }

    pub fn token_level(mut self) -> Self {
        self.granularity = Granularity::TokenLevel;
        self
    }
}

impl Head for LinearHead {
    fn task(&self) -> Task {
        let o = self.weight.shape()[1];
        match self.kind {
            OutputKind::SigmoidPair => Task::MultilabelBinary { labels: o },
            OutputKind::Softmax => Task::Multiclass { classes: o },
        }
    }

    fn split(&self) -> SplitPoint {
        SplitPoint {
            layer_index: 0,
            granularity: self.granularity,
        }
    }

    fn width(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, g: &mut Graph<f64>, acts: Var, mask: Option<&Tensor<f64>>) -> Var {
        let x = match (self.granularity, mask) {
            (Granularity::TokenLevel, Some(m)) => g.masked_mean_pool(acts, m),
            (Granularity::TokenLevel, None) => {
                let s = g.shape(acts).to_vec();
                g.masked_mean_pool(acts, &Tensor::full(&[s[0], s[1]], 1.0))
            }
            (Granularity::SequenceLevel, _) => acts,
        };
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let logits = g.linear(x, w, b);
        match self.kind {
            OutputKind::SigmoidPair => g.sigmoid_pair(logits),
            OutputKind::Softmax => {
                let n = g.shape(logits)[0];
                let o = self.weight.shape()[1];
                let l = g.reshape(logits, &[n, 1, o]);
                g.softmax(l)
            }
        }
    }
}
