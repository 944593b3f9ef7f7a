//! Named parameter storage and the Adam optimizer.

use crate::{Elem, Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors that persist across graphs.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "set: shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.trainable.iter_mut().for_each(|t| *t = trainable);
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Place every parameter on `g`; trainable ones become gradient leaves
    /// unless `grad` is false. The returned vector is indexed by `ParamId`.
    pub fn bind(&self, g: &mut Graph<T>, grad: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| Some(g.leaf(v.clone(), grad && t)))
            .collect();
        Bound { vars }
    }

    /// Like [`Self::bind`] but parameters are placed on the graph only when
    /// first requested, so unused weights are never copied.
    pub fn binder(&self, grad: bool) -> Binder<'_, T> {
        Binder {
            store: self,
            vars: vec![None; self.values.len()],
            grad,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            trainable: self.trainable.clone(),
        }
    }

    /// Order-sensitive byte digest input: names, shapes, and little-endian values.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, v) in self.iter() {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            for &d in v.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in v.data() {
                x.write_le(&mut out);
            }
        }
        out
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter was not bound")
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Route parameter `id` through another graph node.
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }
}

/// Lazy parameter binding; see [`ParamStore::binder`].
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    grad: bool,
}

impl<'a, T: Elem> Binder<'a, T> {
    pub fn get(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(self.store.values[id.0].clone(), self.grad && self.store.trainable[id.0]);
        self.vars[id.0] = Some(v);
        v
    }

    /// Look up by name; panics if the store has no such parameter.
    pub fn named(&mut self, g: &mut Graph<T>, name: &str) -> Var {
        let id = self
            .store
            .find(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.get(g, id)
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn finish(self) -> Bound {
        Bound { vars: self.vars }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: Vec<u64>,
}

impl<T: Elem> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Apply one update to every trainable parameter that received a gradient.
    /// Moment estimates and step counts are tracked per parameter, so freezing
    /// a parameter simply pauses its schedule.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>) {
        let n = store.len();
        if self.m.len() < n {
            for id in self.m.len()..n {
                let len = store.values[id].len();
                self.m.push(vec![T::zero(); len]);
                self.v.push(vec![T::zero(); len]);
                self.steps.push(0);
            }
        }
        let c = self.config;
        for id in 0..n {
            if !store.trainable[id] {
                continue;
            }
            let Some(var) = bound.vars[id] else { continue };
            let Some(g) = grads.get(var) else { continue };
            self.steps[id] += 1;
            let t = self.steps[id] as f64;
            let bc1 = 1.0 - c.beta1.powf(t);
            let bc2 = 1.0 - c.beta2.powf(t);
            let step = T::lit(c.lr * bc2.sqrt() / bc1);
            let eps = T::lit(c.eps * bc2.sqrt());
            let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
            let (ob1, ob2) = (T::one() - b1, T::one() - b2);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = store.values[id].data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *pi -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}
