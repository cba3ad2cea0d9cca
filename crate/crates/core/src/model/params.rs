//! Named parameter tensors, Adam state, the learning-rate schedule and the
//! `LDCP` checkpoint container.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which sub-network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Extractor,
    Confidence,
    Threshold,
    Scale,
}

impl ParamGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Extractor => "extractor",
            ParamGroup::Confidence => "confidence",
            ParamGroup::Threshold => "threshold",
            ParamGroup::Scale => "scale",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        [
            ParamGroup::Extractor,
            ParamGroup::Confidence,
            ParamGroup::Threshold,
            ParamGroup::Scale,
        ]
        .into_iter()
        .find(|g| g.prefix() == head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Per-tensor gradient buffers aligned with a [`ParamStore`]; one per sample
/// so backward passes can run concurrently against a shared store.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub(crate) tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0]
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.tensors[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], value: Vec<f64>) -> ParamId {
        let name = name.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "tensor {name}: shape/value length mismatch");
        assert!(self.find(&name).is_none(), "duplicate tensor {name}");
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            group,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Fresh zeroed gradient buffers shaped like this store.
    pub fn new_grads(&self) -> Grads {
        Grads {
            tensors: self.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Copies accumulated gradients into the store's own buffers.
    pub fn set_grads(&mut self, grads: &Grads) {
        for (p, g) in self.params.iter_mut().zip(&grads.tensors) {
            p.grad.copy_from_slice(g);
        }
    }

    /// Bias-corrected Adam with one learning rate for every tensor.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<()> {
        self.adam_step_grouped(|_| lr, cfg)
    }

    /// Adam with a per-group learning rate. Fails without touching any
    /// parameter if a gradient is not finite.
    pub fn adam_step_grouped(&mut self, lr: impl Fn(ParamGroup) -> f64, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient {
                tensor: p.name.clone(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let rate = lr(p.group);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                p.value[i] -= rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Overwrites values from another store with identical names and shapes.
    /// Optimizer state is reset.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::format(
                0,
                format!(
                    "checkpoint has {} tensors, model expects {}",
                    other.params.len(),
                    self.params.len()
                ),
            ));
        }
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.param(id))
                .ok_or_else(|| Error::format(0, format!("checkpoint lacks tensor `{}`", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::format(
                    0,
                    format!("tensor `{}`: shape {:?} vs expected {:?}", p.name, src.shape, p.shape),
                ));
            }
            p.value.copy_from_slice(&src.value);
            p.m.fill(0.0);
            p.v.fill(0.0);
            p.grad.fill(0.0);
        }
        self.step = 0;
        Ok(())
    }
}

/// He-normal initialisation, `N(0, 2 / fan_in)`.
pub fn he_normal(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Polynomial decay `base * (1 - iteration/total)^0.9`, zero past the end.
pub fn poly_lr(base: f64, iteration: usize, total: usize) -> f64 {
    if total == 0 || iteration >= total {
        return 0.0;
    }
    base * (1.0 - iteration as f64 / total as f64).powf(0.9)
}

const CKPT_MAGIC: &[u8; 4] = b"LDCP";
const CKPT_VERSION: u8 = 1;

/// Serializes tensor names, shapes and values (optimizer state is not saved).
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.push(CKPT_VERSION);
    buf.extend_from_slice(&(store.params.len() as u32).to_le_bytes());
    for p in &store.params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::format(0, "bad magic, expected `LDCP`"));
    }
    let version = r.take(1, "version")?[0];
    if version != CKPT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let group = ParamGroup::from_name(&name)
            .ok_or_else(|| Error::format(at + 4, format!("unknown tensor group in `{name}`")))?;
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")?);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 8, "values")?;
        let value = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.find(&name).is_some() {
            return Err(Error::format(at, format!("duplicate tensor `{name}`")));
        }
        store.register(name, group, &shape, value);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after last tensor"));
    }
    Ok(store)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
