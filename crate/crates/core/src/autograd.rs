//! Minimal reverse-mode differentiation over the kernels in [`crate::kernels`].
//!
//! Network code is written once against the [`Ops`] trait and runs either on
//! the recording [`Graph`] (training) or on [`Eager`] (inference, no tape).
//! Scalar losses are evaluated outside the tape: the caller computes the
//! gradient of its loss with respect to some recorded values and hands those
//! to [`Graph::backward`] as seeds.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::kernels::{self, ConvSpec, ConvTransposeSpec};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Ops<T: Scalar> {
    type Var;

    /// Named parameter from the backing store.
    ///
    /// Panics if the name is unknown; networks validate their stores up front.
    fn param(&mut self, name: &str) -> Self::Var;
    fn constant(&mut self, value: Tensor<T>) -> Self::Var;
    fn value<'s>(&'s self, v: &'s Self::Var) -> &'s Tensor<T>;

    fn conv1d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var, spec: ConvSpec) -> Self::Var;
    fn conv_transpose1d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: &Self::Var,
        spec: ConvTransposeSpec,
    ) -> Self::Var;
    fn reflect_pad(&mut self, x: &Self::Var, left: usize, right: usize) -> Self::Var;
    fn avg_pool(&mut self, x: &Self::Var) -> Self::Var;
    fn leaky_relu(&mut self, x: &Self::Var, slope: T) -> Self::Var;
    fn tanh(&mut self, x: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn weight_norm(&mut self, g: &Self::Var, v: &Self::Var) -> Self::Var;
}

fn leaky<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// Tape-free evaluation borrowing parameters from a store.
pub struct Eager<'a, T: Scalar> {
    store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Eager<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store }
    }
}

impl<'a, T: Scalar> Ops<T> for Eager<'a, T> {
    type Var = Cow<'a, Tensor<T>>;

    fn param(&mut self, name: &str) -> Self::Var {
        Cow::Borrowed(self.store.get(name).unwrap_or_else(|| panic!("missing parameter {name}")))
    }

    fn constant(&mut self, value: Tensor<T>) -> Self::Var {
        Cow::Owned(value)
    }

    fn value<'s>(&'s self, v: &'s Self::Var) -> &'s Tensor<T> {
        v
    }

    fn conv1d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var, spec: ConvSpec) -> Self::Var {
        Cow::Owned(kernels::conv1d(x, w, Some(b), &spec))
    }

    fn conv_transpose1d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: &Self::Var,
        spec: ConvTransposeSpec,
    ) -> Self::Var {
        Cow::Owned(kernels::conv_transpose1d(x, w, Some(b), &spec))
    }

    fn reflect_pad(&mut self, x: &Self::Var, left: usize, right: usize) -> Self::Var {
        Cow::Owned(kernels::reflect_pad(x, left, right))
    }

    fn avg_pool(&mut self, x: &Self::Var) -> Self::Var {
        Cow::Owned(kernels::avg_pool(x))
    }

    fn leaky_relu(&mut self, x: &Self::Var, slope: T) -> Self::Var {
        Cow::Owned(leaky(x, slope))
    }

    fn tanh(&mut self, x: &Self::Var) -> Self::Var {
        Cow::Owned(x.map(|v| v.tanh()))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Cow::Owned(add(a, b))
    }

    fn weight_norm(&mut self, g: &Self::Var, v: &Self::Var) -> Self::Var {
        Cow::Owned(kernels::weight_norm(g, v))
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv { x: usize, w: usize, b: usize, spec: ConvSpec },
    ConvT { x: usize, w: usize, b: usize, spec: ConvTransposeSpec },
    ReflectPad { x: usize, left: usize },
    AvgPool { x: usize },
    LeakyRelu { x: usize, slope: T },
    Tanh { x: usize },
    Add { a: usize, b: usize },
    WeightNorm { g: usize, v: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape. Parameters are copied in from one or more stores with
/// [`Graph::load`]; each store can be marked trainable or frozen.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, (usize, bool)>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    /// Registers every tensor of `store` as a leaf. Frozen parameters
    /// receive no gradient but still propagate gradients to their consumers.
    pub fn load(&mut self, store: &ParamStore<T>, trainable: bool) {
        for (name, t) in store.iter() {
            let id = self.push(t.clone(), Op::Leaf, trainable);
            self.params.insert(name.to_string(), (id, trainable));
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> usize {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Accumulates gradients from the given seeds, which pair a recorded
    /// value with `∂loss/∂value`. Repeated calls accumulate.
    pub fn backward(&mut self, seeds: &[(Var, Tensor<T>)]) {
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut highest = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "seed shape mismatch");
            accumulate(&mut pending[v.0], g.clone());
            highest = highest.max(v.0 + 1);
        }
        for id in (0..highest).rev() {
            let Some(dy) = pending[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => accumulate(&mut self.grads[id], dy),
                Op::Conv { x, w, b, spec } => {
                    let (nx, nw) = (self.nodes[x].requires_grad, self.nodes[w].requires_grad);
                    let (dx, dw) =
                        kernels::conv1d_backward(&self.nodes[x].value, &self.nodes[w].value, &dy, &spec, nx, nw);
                    if self.nodes[b].requires_grad {
                        accumulate(&mut pending[b], kernels::bias_grad(&dy));
                    }
                    put(&mut pending, x, dx);
                    put(&mut pending, w, dw);
                }
                Op::ConvT { x, w, b, spec } => {
                    let (nx, nw) = (self.nodes[x].requires_grad, self.nodes[w].requires_grad);
                    let (dx, dw) = kernels::conv_transpose1d_backward(
                        &self.nodes[x].value,
                        &self.nodes[w].value,
                        &dy,
                        &spec,
                        nx,
                        nw,
                    );
                    if self.nodes[b].requires_grad {
                        accumulate(&mut pending[b], kernels::bias_grad(&dy));
                    }
                    put(&mut pending, x, dx);
                    put(&mut pending, w, dw);
                }
                Op::ReflectPad { x, left } => {
                    let len = self.nodes[x].value.dims3().2;
                    accumulate(&mut pending[x], kernels::reflect_pad_backward(&dy, len, left));
                }
                Op::AvgPool { x } => {
                    let len = self.nodes[x].value.dims3().2;
                    accumulate(&mut pending[x], kernels::avg_pool_backward(&dy, len));
                }
                Op::LeakyRelu { x, slope } => {
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[x].value.data()) {
                        if v <= T::zero() {
                            *d *= slope;
                        }
                    }
                    accumulate(&mut pending[x], dx);
                }
                Op::Tanh { x } => {
                    let mut dx = dy;
                    for (d, &y) in dx.data_mut().iter_mut().zip(self.nodes[id].value.data()) {
                        *d *= T::one() - y * y;
                    }
                    accumulate(&mut pending[x], dx);
                }
                Op::Add { a, b } => {
                    if self.nodes[b].requires_grad {
                        accumulate(&mut pending[b], dy.clone());
                    }
                    accumulate(&mut pending[a], dy);
                }
                Op::WeightNorm { g, v } => {
                    let (dg, dv) =
                        kernels::weight_norm_backward(&self.nodes[g].value, &self.nodes[v].value, &dy);
                    accumulate(&mut pending[g], dg);
                    accumulate(&mut pending[v], dv);
                }
            }
        }
    }

    /// Gradient accumulated at a leaf, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all trainable parameters, zero where no gradient reached.
    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(name, &(id, _))| {
                let g = self
                    .grads
                    .get(id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape()));
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn put<T: Scalar>(pending: &mut [Option<Tensor<T>>], id: usize, g: Option<Tensor<T>>) {
    if let Some(g) = g {
        accumulate(&mut pending[id], g);
    }
}

impl<T: Scalar> Ops<T> for Graph<T> {
    type Var = Var;

    fn param(&mut self, name: &str) -> Var {
        let (id, _) = *self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        Var(id)
    }

    fn constant(&mut self, value: Tensor<T>) -> Var {
        Var(self.push(value, Op::Leaf, false))
    }

    fn value<'s>(&'s self, v: &'s Var) -> &'s Tensor<T> {
        &self.nodes[v.0].value
    }

    fn conv1d(&mut self, x: &Var, w: &Var, b: &Var, spec: ConvSpec) -> Var {
        let y = kernels::conv1d(&self.nodes[x.0].value, &self.nodes[w.0].value, Some(&self.nodes[b.0].value), &spec);
        let rg = self.needs(&[x.0, w.0, b.0]);
        Var(self.push(y, Op::Conv { x: x.0, w: w.0, b: b.0, spec }, rg))
    }

    fn conv_transpose1d(&mut self, x: &Var, w: &Var, b: &Var, spec: ConvTransposeSpec) -> Var {
        let y = kernels::conv_transpose1d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            Some(&self.nodes[b.0].value),
            &spec,
        );
        let rg = self.needs(&[x.0, w.0, b.0]);
        Var(self.push(y, Op::ConvT { x: x.0, w: w.0, b: b.0, spec }, rg))
    }

    fn reflect_pad(&mut self, x: &Var, left: usize, right: usize) -> Var {
        let y = kernels::reflect_pad(&self.nodes[x.0].value, left, right);
        let rg = self.needs(&[x.0]);
        Var(self.push(y, Op::ReflectPad { x: x.0, left }, rg))
    }

    fn avg_pool(&mut self, x: &Var) -> Var {
        let y = kernels::avg_pool(&self.nodes[x.0].value);
        let rg = self.needs(&[x.0]);
        Var(self.push(y, Op::AvgPool { x: x.0 }, rg))
    }

    fn leaky_relu(&mut self, x: &Var, slope: T) -> Var {
        let y = leaky(&self.nodes[x.0].value, slope);
        let rg = self.needs(&[x.0]);
        Var(self.push(y, Op::LeakyRelu { x: x.0, slope }, rg))
    }

    fn tanh(&mut self, x: &Var) -> Var {
        let y = self.nodes[x.0].value.map(|v| v.tanh());
        let rg = self.needs(&[x.0]);
        Var(self.push(y, Op::Tanh { x: x.0 }, rg))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = add(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.needs(&[a.0, b.0]);
        Var(self.push(y, Op::Add { a: a.0, b: b.0 }, rg))
    }

    fn weight_norm(&mut self, g: &Var, v: &Var) -> Var {
        let y = kernels::weight_norm(&self.nodes[g.0].value, &self.nodes[v.0].value);
        let rg = self.needs(&[g.0, v.0]);
        Var(self.push(y, Op::WeightNorm { g: g.0, v: v.0 }, rg))
    }
}
