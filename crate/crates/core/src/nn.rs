//! Parameter storage and the small set of layers the network is assembled from.
//!
//! Layers hold only [`ParamId`]s, so one layer description serves `f32`
//! training and `f64` gradient checking alike.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffops::{BatchNormConfig, ConvGeom, Graph, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    /// False for running statistics, which are state rather than weights.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        debug_assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn trainable_count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        g.param(id.0, || e.value.clone(), e.trainable)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Applies running-statistic updates collected by a training graph.
    pub fn apply_stat_updates(&mut self, updates: Vec<(usize, Tensor<T>)>) {
        for (key, value) in updates {
            self.set(ParamId(key), value);
        }
    }
}

/// Shared state for building layers: parameter store, RNG and naming prefix.
pub struct Builder<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub bn: BatchNormConfig,
    prefix: Vec<String>,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, bn: BatchNormConfig) -> Self {
        Self {
            store,
            rng,
            bn,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<F, O>(&mut self, name: &str, f: F) -> O
    where
        F: FnOnce(&mut Self) -> O,
    {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut n = self.prefix.join(".");
        if !n.is_empty() {
            n.push('.');
        }
        n.push_str(leaf);
        n
    }

    fn add(&mut self, leaf: &str, t: Tensor<T>, trainable: bool) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, t, trainable)
    }

    /// He-scaled zero-mean Gaussian weights, zero bias.
    pub fn conv(&mut self, in_ch: usize, out_ch: usize, geom: ConvGeom) -> Conv {
        let fan_in = in_ch * geom.kernel_volume();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let mut shape = vec![out_ch, in_ch];
        if geom.is_2d() {
            shape.extend_from_slice(&geom.kernel[1..]);
        } else {
            shape.extend_from_slice(&geom.kernel);
        }
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)));
        Conv {
            w: self.add("weight", w, true),
            b: self.add("bias", Tensor::zeros([out_ch]), true),
            geom,
        }
    }

    pub fn batch_norm(&mut self, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.add("bn.gamma", Tensor::full([channels], T::one()), true),
            beta: self.add("bn.beta", Tensor::zeros([channels]), true),
            mean: self.add("bn.running_mean", Tensor::zeros([channels]), false),
            var: self.add("bn.running_var", Tensor::full([channels], T::one()), false),
            cfg: self.bn,
        }
    }

    /// Convolution, optionally followed by batch norm and ReLU.
    pub fn block(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
        norm: bool,
        relu: bool,
    ) -> ConvBlock {
        self.scoped(name, |b| {
            let conv = b.conv(in_ch, out_ch, geom);
            let bn = norm.then(|| b.batch_norm(out_ch));
            ConvBlock { conv, bn, relu }
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, self.w);
        let b = store.bind(g, self.b);
        g.conv(x, w, Some(b), self.geom)
    }

    pub fn param_count(in_ch: usize, out_ch: usize, geom: &ConvGeom) -> usize {
        out_ch * in_ch * geom.kernel_volume() + out_ch
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub cfg: BatchNormConfig,
}

impl BatchNorm {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = store.bind(g, self.gamma);
        let beta = store.bind(g, self.beta);
        let (y, running) = g.batch_norm(
            x,
            gamma,
            beta,
            store.get(self.mean),
            store.get(self.var),
            self.cfg,
        )?;
        if let Some((m, v)) = running {
            g.queue_stat_update(self.mean.0, m);
            g.queue_stat_update(self.var.0, v);
        }
        Ok(y)
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

impl ConvBlock {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(g, store, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(g, store, y)?;
        }
        if self.relu {
            y = g.relu(y);
        }
        Ok(y)
    }

    /// Trainable parameters of a block with the given layout.
    pub fn param_count(in_ch: usize, out_ch: usize, geom: &ConvGeom, norm: bool) -> usize {
        Conv::param_count(in_ch, out_ch, geom) + if norm { BatchNorm::param_count(out_ch) } else { 0 }
    }
}
