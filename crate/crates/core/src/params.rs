//! Named trainable tensors with gradient and AdamW moment slots, plus
//! non-trainable buffers (batch-norm running statistics).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Substring that marks a name as a non-trainable buffer.
pub const BUFFER_MARK: &str = ".running_";

pub fn is_buffer_name(name: &str) -> bool {
    name.contains(BUFFER_MARK)
}

/// Initialization rule for a freshly declared tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let z = value.zeros_like();
        ParamEntry {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
            step: 0,
        }
    }
}

/// FNV-1a, used to give every parameter its own RNG stream so initial values
/// do not depend on declaration order.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
    })
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    buffers: BTreeMap<String, Tensor>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            buffers: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Declares a trainable tensor. Its initial value depends only on the
    /// store seed, the name and the rule.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if is_buffer_name(name) {
            return Err(Error::Contract(format!(
                "parameter name `{name}` collides with the buffer naming scheme"
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` declared twice")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape)?,
            Init::Ones => Tensor::ones(shape)?,
            Init::Constant(c) => Tensor::full(shape, c)?,
            Init::FanIn(fan_in) => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            }
        };
        self.entries.insert(name.to_string(), ParamEntry::new(value));
        Ok(())
    }

    /// Declares a buffer (name must contain [`BUFFER_MARK`]).
    pub fn declare_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        if !is_buffer_name(name) {
            return Err(Error::Contract(format!(
                "buffer name `{name}` must contain `{BUFFER_MARK}`"
            )));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    /// Value of a parameter or buffer.
    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .or_else(|| self.buffers.get(name))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    /// Replaces the value of a parameter or buffer, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = match self.entries.get_mut(name) {
            Some(e) => &mut e.value,
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown tensor `{name}`")))?,
        };
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Adds `g` to the gradient slot of parameter `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if e.grad.shape() != g.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("`{name}` is {:?}, gradient {:?}", e.grad.shape(), g.shape()),
            ));
        }
        e.grad
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Trainable parameters, sorted by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Buffers, sorted by name.
    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Every tensor (parameters then buffers), each group sorted by name.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params().map(|(k, e)| (k, &e.value)).chain(self.buffers())
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len() + self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a tensor restored from disk; buffers are recognised by name.
    pub(crate) fn insert_raw(&mut self, name: String, value: Tensor) {
        if is_buffer_name(&name) {
            self.buffers.insert(name, value);
        } else {
            self.entries.insert(name, ParamEntry::new(value));
        }
    }

    /// True when both stores hold the same names with bit-identical values.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        let a: Vec<_> = self.tensors().collect();
        let b: Vec<_> = other.tensors().collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
