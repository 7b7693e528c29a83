//! Named parameter storage with per-name seeded initialization.
//!
//! Every parameter draws its initial values from an RNG seeded by
//! `(store seed, parameter name)`, so two models that share a sub-network
//! (e.g. a baseline and a crossway model) start from identical weights for
//! the shared names regardless of construction order.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{integrity, invalid, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-bound, bound)
    Uniform(f64),
    Const(f64),
    /// Per-element constants, e.g. FiLM heads whose scale half starts at 1.
    Split { first: usize, head: f64, tail: f64 },
}

impl Init {
    /// PyTorch-style default for a layer with the given fan-in.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

pub(crate) fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    vars: RefCell<BTreeMap<String, Var>>,
    used: RefCell<BTreeSet<String>>,
    /// When set, `get` refuses to create parameters that are not already present.
    frozen: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            seed,
            vars: RefCell::new(BTreeMap::new()),
            used: RefCell::new(BTreeSet::new()),
            frozen: false,
        }
    }

    /// A store whose parameter set is fixed to `tensors` (checkpoint loading).
    pub fn from_tensors(dtype: DType, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self {
            dtype,
            device: Device::Cpu,
            seed: 0,
            vars: RefCell::new(vars),
            used: RefCell::new(BTreeSet::new()),
            frozen: true,
        })
    }

    /// Independent copy of all values (used for the EMA shadow).
    pub fn deep_copy(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, v) in self.vars.borrow().iter() {
            vars.insert(name.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            dtype: self.dtype,
            device: self.device.clone(),
            seed: self.seed,
            vars: RefCell::new(vars),
            used: RefCell::new(BTreeSet::new()),
            frozen: true,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Params<'_> {
        Params { store: self, prefix: String::new(), detach: false }
    }

    /// Like [`root`](Self::root) but hands out tensors detached from the
    /// autodiff graph. They share storage with the variables, so in-place
    /// updates stay visible to networks built from this view.
    pub fn root_detached(&self) -> Params<'_> {
        Params { store: self, prefix: String::new(), detach: true }
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    pub fn get_var(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    /// All parameters in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.borrow().values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// Names that exist in the store but were never requested by a builder.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.vars.borrow().keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    /// Fails unless every stored parameter was consumed by the model build.
    pub fn check_all_used(&self) -> Result<()> {
        let unused = self.unused();
        if unused.is_empty() {
            Ok(())
        } else {
            integrity(format!("parameters not used by the model: {}", unused.join(", ")))
        }
    }

    fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.used.borrow_mut().insert(name.to_string());
        if let Some(v) = self.vars.borrow().get(name) {
            if v.as_tensor().dims() != shape {
                return integrity(format!(
                    "parameter `{name}` has shape {:?}, model expects {shape:?}",
                    v.as_tensor().dims()
                ));
            }
            return Ok(v.as_tensor().clone());
        }
        if self.frozen {
            return integrity(format!("missing parameter `{name}`"));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let data: Vec<f64> = match init {
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
            Init::Const(c) => vec![c; n],
            Init::Split { first, head, tail } => (0..n).map(|i| if i < first { head } else { tail }).collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(out)
    }
}

/// A prefixed view into a [`ParamStore`], handed down the module tree.
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
    detach: bool,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Params<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Params { store: self.store, prefix, detach: self.detach }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return invalid(format!("parameter `{}.{name}` has an empty dimension {shape:?}", self.prefix));
        }
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        let t = self.store.get_or_init(&full, shape, init)?;
        Ok(if self.detach { t.detach() } else { t })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let a = ParamStore::new(DType::F64, 3);
        let b = ParamStore::new(DType::F64, 3);
        let x1 = a.root().pp("m").get(&[4], "w", Init::Uniform(1.0)).unwrap();
        let _ = b.root().pp("other").get(&[7], "w", Init::Uniform(1.0)).unwrap();
        let x2 = b.root().pp("m").get(&[4], "w", Init::Uniform(1.0)).unwrap();
        assert_eq!(x1.to_vec1::<f64>().unwrap(), x2.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn frozen_store_rejects_missing_and_wrong_shape() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        let s = ParamStore::from_tensors(DType::F32, m).unwrap();
        assert!(s.root().get(&[3], "b", Init::Const(0.0)).is_err());
        assert!(s.root().get(&[4], "a", Init::Const(0.0)).is_err());
        assert!(s.root().get(&[3], "a", Init::Const(0.0)).is_ok());
        assert!(s.check_all_used().is_ok());
    }
}
