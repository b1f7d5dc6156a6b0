//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure that maps the output gradient to input gradients. Parameters are
//! bound lazily from a [`ParamStore`]; frozen parameters enter the tape as
//! constants and never receive gradients.
//!
//! The graph also counts forward floating point operations for the linear
//! algebra it executes (matrix products, convolutions and bias additions; one
//! multiply-accumulate counts as two FLOPs). Elementwise work is not counted.

mod conv;
mod ops;

use std::collections::{BTreeMap, HashMap};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::archive::DType;
use crate::params::ParamStore;

pub use conv::conv_out_len;
pub use ops::{causal_mask, key_mask, reduce_to};

/// Row-major copy of an array, or the array itself when already row-major.
pub(crate) trait IntoStandard {
    fn into_standard(self) -> Self;
}

impl<F: Scalar> IntoStandard for ArrayD<F> {
    fn into_standard(self) -> Self {
        if self.is_standard_layout() {
            self
        } else {
            self.as_standard_layout().into_owned()
        }
    }
}

/// Floating point element type usable on the tape (`f32` for training, `f64` for verification).
pub trait Scalar:
    Float
    + FromPrimitive
    + ScalarOperand
    + LinalgScalar
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<F> =
    Box<dyn Fn(&[&ArrayD<F>], &ArrayD<F>, &ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

pub struct Graph<'p, F: Scalar> {
    store: Option<&'p ParamStore<F>>,
    bound: HashMap<String, Var>,
    nodes: Vec<Node<F>>,
    flops: u64,
    grad_enabled: bool,
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// A graph that binds parameters from `store` and records gradients.
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self {
            store: Some(store),
            bound: HashMap::new(),
            nodes: Vec::new(),
            flops: 0,
            grad_enabled: true,
        }
    }

    /// A graph that evaluates `store` without building backward closures.
    pub fn inference(store: &'p ParamStore<F>) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    /// A graph without a parameter store (inputs and constants only).
    pub fn detached() -> Self {
        Self {
            store: None,
            bound: HashMap::new(),
            nodes: Vec::new(),
            flops: 0,
            grad_enabled: true,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs executed by counted operations so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub(crate) fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    /// Bytes held by node values on the tape.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.value.len() * std::mem::size_of::<F>())
            .sum()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar(&self, v: Var) -> F {
        let value = self.value(v);
        assert_eq!(
            value.len(),
            1,
            "scalar() on tensor of shape {:?}",
            value.shape()
        );
        *value.iter().next().expect("one element")
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient when `requires_grad` is set.
    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds the named parameter, inserting it on first use.
    ///
    /// Panics if the store has no such parameter; model entry points check
    /// their parameter sets before building graphs.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let trainable = store.is_trainable(name);
        let v = self.leaf(value, trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.is_some_and(|s| s.get(name).is_some())
    }

    pub(crate) fn push<B>(&mut self, value: ArrayD<F>, parents: &[Var], backward: B) -> Var
    where
        B: Fn(&[&ArrayD<F>], &ArrayD<F>, &ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>> + 'static,
    {
        debug_assert!(value.is_standard_layout());
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<F>),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let seed = ArrayD::from_elem(self.value(root).raw_dim(), F::one());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: ArrayD<F>) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                Some(bw) => {
                    let inputs: Vec<&ArrayD<F>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect();
                    let parent_grads = bw(&inputs, &node.value, &g, &needs);
                    for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let (true, Some(pg)) = (need, pg) else {
                            continue;
                        };
                        let pg = pg.into_standard();
                        debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => *acc += &pg,
                            slot => *slot = Some(pg),
                        }
                    }
                }
                // leaves keep their gradient
                None => grads[i] = Some(g),
            }
        }
        Gradients {
            by_node: grads,
            names: self.bound.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        }
    }
}

/// Gradients of leaves after a reverse pass.
pub struct Gradients<F: Scalar> {
    by_node: Vec<Option<ArrayD<F>>>,
    names: BTreeMap<String, Var>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<F>> {
        self.names.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients of every bound parameter that received one, keyed by name.
    pub fn into_params(mut self) -> BTreeMap<String, ArrayD<F>> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.names) {
            if let Some(g) = self.by_node[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}
