//! Named parameter storage, layer primitives, and SGD.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted names in a canonical
//! insertion order; the order is what checkpoints, EMA updates, and gradient
//! extraction all rely on. A [`ForwardCtx`] lazily registers parameters on a
//! tape — as gradient leaves on the query path, as constants on the momentum
//! path.

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: ArrayD<f64>,
    /// False for running statistics and other buffers.
    pub trainable: bool,
}

/// Ordered, named parameter tree.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter {name}"
        );
        self.entries
            .insert(name.to_string(), ParamEntry { value, trainable });
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    /// Total number of scalar parameters (trainable only).
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, ae), (bn, be))| {
                    an == bn && ae.value.shape() == be.value.shape() && ae.trainable == be.trainable
                })
    }

    /// In-place exponential moving average: `self = beta*self + (1-beta)*src`
    /// for every entry, trainable and buffer alike.
    pub fn ema_update_from(&mut self, src: &ParamSet, beta: f64) -> Result<()> {
        if !self.same_structure(src) {
            return Err(Error::internal("EMA update on mismatched parameter trees"));
        }
        for ((_, dst), (_, s)) in self.entries.iter_mut().zip(src.entries.iter()) {
            dst.value.zip_mut_with(&s.value, |d, &sv| {
                *d = beta * *d + (1.0 - beta) * sv;
            });
        }
        Ok(())
    }
}

/// Forward-pass context: a tape plus the parameter set it reads from.
pub struct ForwardCtx<'t, 'p> {
    pub tape: &'t Tape,
    pub params: &'p ParamSet,
    /// Training mode: batch-norm uses batch statistics.
    pub train: bool,
    /// Register parameters as gradient leaves (query path) or constants
    /// (momentum path / evaluation).
    pub grad: bool,
    registered: RefCell<HashMap<String, Var<'t>>>,
    bn_updates: RefCell<Vec<(String, Vec<f64>, Vec<f64>)>>,
}

impl<'t, 'p> ForwardCtx<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamSet, train: bool, grad: bool) -> Self {
        ForwardCtx {
            tape,
            params,
            train,
            grad,
            registered: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Tape node for the named parameter, registered on first use.
    pub fn p(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.registered.borrow().get(name) {
            return *v;
        }
        let entry = self
            .params
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let var = if self.grad && entry.trainable {
            self.tape.param(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.registered.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradients keyed by parameter name after a backward pass.
    pub fn grads_by_name(&self, grads: &crate::tensor::Grads) -> IndexMap<String, ArrayD<f64>> {
        let mut out = IndexMap::new();
        for (name, _) in self.params.entries.iter() {
            if let Some(var) = self.registered.borrow().get(name) {
                if let Some(g) = grads.get(*var) {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    fn record_bn(&self, name: &str, mean: Vec<f64>, var: Vec<f64>) {
        self.bn_updates
            .borrow_mut()
            .push((name.to_string(), mean, var));
    }

    /// Batch-norm running-stat updates observed during this forward pass.
    pub fn take_bn_updates(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Apply recorded batch statistics to running buffers.
pub fn apply_bn_updates(params: &mut ParamSet, updates: &[(String, Vec<f64>, Vec<f64>)]) {
    for (name, mean, var) in updates {
        let rm = params.get_mut(&format!("{name}.running_mean"));
        for (d, &m) in rm.iter_mut().zip(mean.iter()) {
            *d = (1.0 - BN_MOMENTUM) * *d + BN_MOMENTUM * m;
        }
        let rv = params.get_mut(&format!("{name}.running_var"));
        for (d, &v) in rv.iter_mut().zip(var.iter()) {
            *d = (1.0 - BN_MOMENTUM) * *d + BN_MOMENTUM * v;
        }
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// 2-D convolution layer descriptor.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            name: name.to_string(),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let w = he_normal(
            &[self.out_ch, self.in_ch, self.k, self.k],
            self.in_ch * self.k * self.k,
            rng,
        );
        params.insert(&format!("{}.w", self.name), w, true);
        params.insert(
            &format!("{}.b", self.name),
            ArrayD::zeros(IxDyn(&[self.out_ch])),
            true,
        );
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Var<'t> {
        let w = ctx.p(&format!("{}.w", self.name));
        let b = ctx.p(&format!("{}.b", self.name));
        x.conv2d(w, Some(b), self.stride, self.pad)
    }
}

/// Batch normalization layer descriptor.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub ch: usize,
}

impl BatchNorm2d {
    pub fn new(name: &str, ch: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            ch,
        }
    }

    pub fn init(&self, params: &mut ParamSet) {
        params.insert(
            &format!("{}.gamma", self.name),
            ArrayD::from_elem(IxDyn(&[self.ch]), 1.0),
            true,
        );
        params.insert(
            &format!("{}.beta", self.name),
            ArrayD::zeros(IxDyn(&[self.ch])),
            true,
        );
        params.insert(
            &format!("{}.running_mean", self.name),
            ArrayD::zeros(IxDyn(&[self.ch])),
            false,
        );
        params.insert(
            &format!("{}.running_var", self.name),
            ArrayD::from_elem(IxDyn(&[self.ch]), 1.0),
            false,
        );
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Var<'t> {
        if ctx.train {
            let gamma = ctx.p(&format!("{}.gamma", self.name));
            let beta = ctx.p(&format!("{}.beta", self.name));
            let (y, mean, var) = x.batch_norm(gamma, beta, BN_EPS);
            ctx.record_bn(&self.name, mean, var);
            y
        } else {
            let gamma = ctx.params.get(&format!("{}.gamma", self.name));
            let beta = ctx.params.get(&format!("{}.beta", self.name));
            let rm = ctx.params.get(&format!("{}.running_mean", self.name));
            let rv = ctx.params.get(&format!("{}.running_var", self.name));
            let mut scale = Vec::with_capacity(self.ch);
            let mut shift = Vec::with_capacity(self.ch);
            for c in 0..self.ch {
                let inv = 1.0 / (rv[[c]] + BN_EPS).sqrt();
                scale.push(gamma[[c]] * inv);
                shift.push(beta[[c]] - gamma[[c]] * rm[[c]] * inv);
            }
            x.channel_affine(scale, shift)
        }
    }
}

/// Fully connected layer descriptor, `x [M,in] -> [M,out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let w = he_normal(&[self.in_dim, self.out_dim], self.in_dim, rng);
        params.insert(&format!("{}.w", self.name), w, true);
        params.insert(
            &format!("{}.b", self.name),
            ArrayD::zeros(IxDyn(&[self.out_dim])),
            true,
        );
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Var<'t> {
        let w = ctx.p(&format!("{}.w", self.name));
        let b = ctx.p(&format!("{}.b", self.name));
        x.matmul(w).add_row_vec(b)
    }
}

/// SGD with heavy-ball momentum.
pub struct Sgd {
    pub momentum: f64,
    velocity: IndexMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, ArrayD<f64>>, lr: f64) {
        for (name, grad) in grads {
            let entry = params
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            if !entry.trainable {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            v.zip_mut_with(grad, |vi, &gi| *vi = *vi * self.momentum + gi);
            entry.value.zip_mut_with(v, |p, &vi| *p -= lr * vi);
        }
    }

    pub fn velocity(&self) -> &IndexMap<String, ArrayD<f64>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: IndexMap<String, ArrayD<f64>>) {
        self.velocity = velocity;
    }
}
