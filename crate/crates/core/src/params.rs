use std::collections::{BTreeMap, BTreeSet};

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{NamedTensors, TensorData};
use crate::autograd::Scalar;
use crate::error::{Error, Result};

/// Named parameter tensors plus the set of names excluded from training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F: Scalar> {
    tensors: BTreeMap<String, ArrayD<F>>,
    frozen: BTreeSet<String>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a String, &'a ArrayD<F>)> {
        self.tensors
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Total number of scalars in tensors whose name starts with `prefix`.
    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, t)| t.len()).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if trainable {
            self.frozen.remove(name);
        } else {
            self.frozen.insert(name.to_string());
        }
    }

    /// Freezes (or unfreezes) every tensor under `prefix`.
    pub fn set_prefix_trainable(&mut self, prefix: &str, trainable: bool) {
        let names: Vec<String> = self.with_prefix(prefix).map(|(k, _)| k.clone()).collect();
        for n in names {
            self.set_trainable(&n, trainable);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| !self.frozen.contains(*k))
            .cloned()
            .collect()
    }

    /// Moves every tensor of `other` into `self`, keeping `other`'s frozen flags.
    pub fn merge(&mut self, other: ParamStore<F>) {
        for name in other.frozen {
            self.frozen.insert(name);
        }
        self.tensors.extend(other.tensors);
    }

    /// Copy of the tensors under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (k, v) in self.with_prefix(prefix) {
            out.insert(k.clone(), v.clone());
            if !self.is_trainable(k) {
                out.set_trainable(k, false);
            }
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (k, v) in &self.tensors {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Value(format!("parameter `{k}` is not finite")));
            }
        }
        Ok(())
    }

    /// Archive entries for tensors under `prefix` (empty prefix: everything).
    pub fn to_archive(&self, prefix: &str) -> NamedTensors {
        self.with_prefix(prefix)
            .map(|(k, v)| (k.clone(), to_tensor_data(v)))
            .collect()
    }

    /// Loads every floating entry under `prefix`, converting to `F`.
    pub fn from_archive(entries: &NamedTensors, prefix: &str) -> Result<Self> {
        let mut out = ParamStore::new();
        for (k, v) in entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let arr = match v {
                TensorData::F32(a) => a.mapv(|x| F::c(x as f64)),
                TensorData::F64(a) => a.mapv(F::c),
                TensorData::I64(_) => {
                    return Err(Error::ArchiveFormat(format!(
                        "parameter `{k}` has integer dtype"
                    )))
                }
            };
            out.insert(k.clone(), arr);
        }
        Ok(out)
    }

    /// Verifies that every name in `expected` is present with the given shape.
    pub fn check_shapes(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            match self.get(name) {
                None => return Err(Error::MissingParam(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn to_tensor_data<F: Scalar>(a: &ArrayD<F>) -> TensorData {
    match F::DTYPE {
        crate::archive::DType::F32 => TensorData::F32(a.mapv(|x| x.to_f32().expect("f32"))),
        _ => TensorData::F64(a.mapv(|x| x.f64())),
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for a named module, independent of the order modules are initialised in.
    pub fn for_module(seed: u64, module: &str) -> Self {
        Self::new(derive_seed(seed, module))
    }

    pub fn normal<F: Scalar>(&mut self, shape: &[usize], std: f64) -> ArrayD<F> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let v = (0..n).map(|_| F::c(dist.sample(&mut self.rng))).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}

/// splitmix64 over the seed mixed with an FNV-1a hash of `tag`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(seed ^ h)
}

pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// How a tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// Normal with standard deviation `1 / sqrt(fan_in)`.
    Fan(usize),
    Normal(f64),
    Zeros,
    Ones,
}

/// Name, shape and initialiser of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: InitKind) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn count_specs(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

/// Materialises `specs`. Each tensor draws from its own stream keyed by
/// `(seed, name)`, so values do not depend on declaration order.
pub fn init_params<F: Scalar>(specs: &[ParamSpec], seed: u64) -> ParamStore<F> {
    let mut store = ParamStore::new();
    for s in specs {
        let value = match s.init {
            InitKind::Fan(fan_in) => Init::for_module(seed, &s.name)
                .normal(&s.shape, (1.0 / fan_in.max(1) as f64).sqrt()),
            InitKind::Normal(std) => Init::for_module(seed, &s.name).normal(&s.shape, std),
            InitKind::Zeros => zeros(&s.shape),
            InitKind::Ones => ones(&s.shape),
        };
        store.insert(s.name.clone(), value);
    }
    store
}
