//! Named parameter tables with gradients, Adam state and binary checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// A parameter tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, value: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > 2 || n != value.len() {
            return Err(Error::Shape(format!(
                "{} values for dims {dims:?}",
                value.len()
            )));
        }
        Ok(Self {
            dims,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            value,
        })
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Columns of a 2-D tensor, length of a 1-D one.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.value[i * c..(i + 1) * c]
    }

    pub fn grad_row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.grad[i * c..(i + 1) * c]
    }
}

/// Insertion-ordered table of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; replaces any previous tensor of the same name, resetting
    /// its optimizer state.
    pub fn insert(&mut self, name: &str, dims: Vec<usize>, value: Vec<f64>) -> Result<()> {
        self.tensors.insert(name.to_string(), Tensor::new(dims, value)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Values only, in insertion order.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.dims == b.dims && a.value == b.value)
    }

    /// One bias-corrected Adam update on every tensor, then zeroes gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, t) in &self.tensors {
            if let Some(i) = t.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at {name}[{i}]",
                    t.grad[i]
                )));
            }
        }
        for t in self.tensors.values_mut() {
            t.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(t.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(t.step as i32);
            for i in 0..t.value.len() {
                let g = t.grad[i];
                t.m[i] = cfg.beta1 * t.m[i] + (1.0 - cfg.beta1) * g;
                t.v[i] = cfg.beta2 * t.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = t.m[i] / bc1;
                let vhat = t.v[i] / bc2;
                t.value[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                t.grad[i] = 0.0;
            }
        }
        Ok(())
    }

    /// Writes values in the CPKT layout: magic, then per tensor the name
    /// length, name, rank and dims as u32 LE, then values as f64 LE.
    pub fn write_cpkt<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"CPKT")?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.value {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_cpkt(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_cpkt(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses a CPKT byte buffer into a fresh store (optimizer state zeroed).
    pub fn from_cpkt(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |msg: &str| Error::Format {
            line: 0,
            msg: format!("checkpoint: {msg}"),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != b"CPKT" {
            return Err(bad("bad magic"));
        }
        let u32_at = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated record"))?;
            Ok(u32::from_le_bytes(b))
        };
        let mut store = ParamStore::new();
        while !r.is_empty() {
            let len = u32_at(&mut r)? as usize;
            if r.len() < len {
                return Err(bad("truncated name"));
            }
            let name = std::str::from_utf8(&r[..len])
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            r = &r[len..];
            let rank = u32_at(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| u32_at(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            if r.len() < n * 8 {
                return Err(bad("truncated values"));
            }
            let value = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[n * 8..];
            store.insert(&name, dims, value)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_cpkt()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cpkt(&bytes)
    }

    /// Copies values from `other` into same-named tensors, leaving optimizer
    /// state untouched.
    pub fn assign_values(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in &other.tensors {
            let dst = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))?;
            if dst.dims != t.dims {
                return Err(Error::Shape(format!(
                    "{name}: dims {:?} vs {:?}",
                    dst.dims, t.dims
                )));
            }
            dst.value.clone_from(&t.value);
        }
        Ok(())
    }

    /// Appends every tensor of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for (name, t) in &other.tensors {
            self.insert(&format!("{prefix}{name}"), t.dims.clone(), t.value.clone())?;
        }
        Ok(())
    }
}

/// Anything that owns a trainable [`ParamStore`].
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Maximum relative error between analytic and central-difference gradients,
/// `|a - n| / max(1, |a|, |n|)`.
///
/// `loss_fn` evaluates the loss at the current values and accumulates its
/// analytic gradient into the model's store. Only tensors listed in `names`
/// are perturbed (all tensors when `names` is empty).
pub fn grad_check<T, F>(model: &mut T, eps: f64, names: &[&str], mut loss_fn: F) -> Result<f64>
where
    T: HasParams,
    F: FnMut(&mut T) -> Result<f64>,
{
    model.params_mut().zero_grads();
    loss_fn(model)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .filter(|(n, _)| names.is_empty() || names.contains(n))
        .map(|(n, t)| (n.to_string(), t.grad.clone()))
        .collect();

    let mut worst: f64 = 0.0;
    for (name, grads) in analytic {
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params().get(&name).value[i];
            model.params_mut().get_mut(&name).value[i] = orig + eps;
            let hi = loss_fn(model)?;
            model.params_mut().get_mut(&name).value[i] = orig - eps;
            let lo = loss_fn(model)?;
            model.params_mut().get_mut(&name).value[i] = orig;
            let num = (hi - lo) / (2.0 * eps);
            worst = worst.max((a - num).abs() / 1f64.max(a.abs()).max(num.abs()));
        }
    }
    model.params_mut().zero_grads();
    Ok(worst)
}
