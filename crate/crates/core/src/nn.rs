//! Parameter storage, per-pass binding, and shared layers.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named model parameters in registration order. Registration order is
/// the checkpoint order and the optimizer order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Registers a parameter excluded from optimization.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }

    /// Glorot-uniform.
    pub fn xavier<T: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        use rand_distr::{Distribution, StandardNormal};
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            T::lit(z * std)
        })
    }
}

/// One forward pass: a fresh tape, lazily bound parameters, and an
/// optional dropout stream.
pub struct Ctx<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Inference pass: dropout disabled.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            dropout: None,
        }
    }

    /// Training pass with inverted dropout of rate `p` drawn from `seed`.
    pub fn train(store: &'a ParamStore<T>, p: f64, seed: u64) -> Self {
        let mut ctx = Self::eval(store);
        if p > 0.0 {
            ctx.dropout = Some((p, ChaCha8Rng::seed_from_u64(seed)));
        }
        ctx
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *p;
        let scale = T::lit(1.0 / keep);
        let n = self.graph.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        self.graph.mul_const(x, Arc::new(mask))
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.get(ParamId(i)).trainable {
                    return None;
                }
                self.graph.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

/// Affine map `x·W + b` over the rows of `x`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(&[d_in, d_out], d_in, d_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.graph.matmul(x, w)?;
        ctx.graph.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gain);
        let b = ctx.param(self.bias);
        ctx.graph.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention. Queries come from one token
/// set, keys and values from another (the same set for self-attention).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

pub struct Attended {
    pub out: Var,
    /// One `[n_q × n_ctx]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{name}: width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.q"), d, d),
            key: Linear::new(store, init, &format!("{name}.k"), d, d),
            value: Linear::new(store, init, &format!("{name}.v"), d, d),
            output: Linear::new(store, init, &format!("{name}.o"), d, d),
            heads,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, queries: Var, context: Var) -> Result<Attended> {
        let d = self.query.d_in;
        let (qs, cs) = (ctx.graph.shape(queries).to_vec(), ctx.graph.shape(context).to_vec());
        if qs.len() != 2 || cs.len() != 2 || qs[1] != d || cs[1] != d {
            return Err(Error::Shape {
                op: "attention",
                lhs: qs,
                rhs: cs,
            });
        }
        let dh = d / self.heads;
        let q = self.query.forward(ctx, queries)?;
        let k = self.key.forward(ctx, context)?;
        let v = self.value.forward(ctx, context)?;
        let wo = ctx.param(self.output.weight);
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut acc: Option<Var> = None;
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = ctx.graph.slice_cols(q, lo, hi)?;
            let kh = ctx.graph.slice_cols(k, lo, hi)?;
            let vh = ctx.graph.slice_cols(v, lo, hi)?;
            let scores = ctx.graph.matmul_nt(qh, kh)?;
            let scores = ctx.graph.scale(scores, scale);
            let attn = ctx.graph.softmax_rows(scores);
            weights.push(attn);
            let oh = ctx.graph.matmul(attn, vh)?;
            let wo_h = ctx.graph.slice_rows(wo, lo, hi)?;
            let part = ctx.graph.matmul(oh, wo_h)?;
            acc = Some(match acc {
                Some(a) => ctx.graph.add(a, part)?,
                None => part,
            });
        }
        let bo = ctx.param(self.output.bias);
        let out = ctx.graph.add_row(acc.expect("at least one head"), bo)?;
        Ok(Attended { out, weights })
    }
}
