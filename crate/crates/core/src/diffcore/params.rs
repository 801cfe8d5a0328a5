//! Named learnable arrays, the Adam update, and the `CKPT1` checkpoint
//! format.
//!
//! Parameter values and Adam moments are held at `f32` precision (the
//! checkpoint precision) and widened to `f64` whenever they enter a tape, so
//! a written checkpoint restores the exact optimizer state. Gradients are
//! accumulated in `f64`.
//!
//! `CKPT1` layout (little-endian): ASCII `CKPT1`, `u32` entry count, then
//! per entry a `u32` name length, UTF-8 name, `u32` rank, `rank` `u32`
//! dims, and `prod(dims)` `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DiffError, Result, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CKPT1";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_STEP: &str = "adam.step";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Option<Vec<f64>>,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        let n = value.len();
        Self {
            shape,
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.value.iter().map(|&x| x as f64).collect())
    }

    pub fn first_moment(&self) -> &[f32] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f32] {
        &self.v
    }
}

/// Ordered (by name) collection of learnable arrays with gradient slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn new() -> Self {
        Self { vars: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_owned(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl Default for BoundParams {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
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

    /// Inserts (or replaces) a parameter; values are rounded to `f32`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) {
        let value = tensor.data().iter().map(|&x| x as f32).collect();
        self.params
            .insert(name.into(), Param::new(tensor.shape().to_vec(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total learnable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Zeroes every value (moments and gradients untouched).
    pub fn fill_zero(&mut self) {
        for p in self.params.values_mut() {
            p.value.fill(0.0);
        }
    }

    /// Puts every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.bind_with(tape, true)
    }

    /// Puts every parameter on `tape` as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.tensor(), requires_grad)))
            .collect();
        BoundParams { vars }
    }

    /// Gradients of every bound parameter from `tape`, in store order.
    pub fn collect_grads(&self, tape: &Tape, bound: &BoundParams) -> Vec<Vec<f64>> {
        self.params
            .keys()
            .map(|name| tape.grad_or_zero(bound.get(name)))
            .collect()
    }

    /// Adds `grads` (store order) into the gradient slots.
    pub fn accumulate_grads(&mut self, grads: &[Vec<f64>]) {
        for (p, g) in self.params.values_mut().zip(grads) {
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    /// Sets every gradient slot to zeros.
    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Some(vec![0.0; p.value.len()]);
        }
    }

    /// Clears gradient slots entirely.
    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One Adam update on every parameter; increments the step counter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(DiffError::MissingGrad(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut() {
            let g = p.grad.as_ref().unwrap();
            for i in 0..p.value.len() {
                let m = cfg.beta1 * p.m[i] as f64 + (1.0 - cfg.beta1) * g[i];
                let v = cfg.beta2 * p.v[i] as f64 + (1.0 - cfg.beta2) * g[i] * g[i];
                p.m[i] = m as f32;
                p.v[i] = v as f32;
                let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                p.value[i] = (p.value[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }

    /// Parameter values only.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for (name, p) in &self.params {
            ckpt.insert(name.clone(), p.shape.clone(), p.value.clone());
        }
        ckpt
    }

    /// Values plus Adam moments and step counter.
    pub fn to_checkpoint_with_optimizer(&self) -> Checkpoint {
        let mut ckpt = self.to_checkpoint();
        for (name, p) in &self.params {
            ckpt.insert(format!("{ADAM_M}{name}"), p.shape.clone(), p.m.clone());
            ckpt.insert(format!("{ADAM_V}{name}"), p.shape.clone(), p.v.clone());
        }
        // A low 16-bit part and the remaining high bits keep the counter
        // exact past 2^24.
        let lo = (self.step & 0xFFFF) as f32;
        let hi = (self.step >> 16) as f32;
        ckpt.insert(ADAM_STEP.to_owned(), vec![2], vec![lo, hi]);
        ckpt
    }

    /// Rebuilds a store from the entries under `prefix` (which is stripped).
    /// Optimizer entries, when present, are restored too.
    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Self {
        let mut store = ParamStore::new();
        let opt_m = format!("{ADAM_M}{prefix}");
        let opt_v = format!("{ADAM_V}{prefix}");
        for (name, (shape, values)) in &ckpt.entries {
            if name.starts_with(ADAM_M) || name.starts_with(ADAM_V) || name == ADAM_STEP {
                continue;
            }
            if let Some(stripped) = name.strip_prefix(prefix) {
                let mut p = Param::new(shape.clone(), values.clone());
                if let Some((_, m)) = ckpt.entries.get(&format!("{opt_m}{stripped}")) {
                    p.m = m.clone();
                }
                if let Some((_, v)) = ckpt.entries.get(&format!("{opt_v}{stripped}")) {
                    p.v = v.clone();
                }
                store.params.insert(stripped.to_owned(), p);
            }
        }
        if let Some((_, s)) = ckpt.entries.get(ADAM_STEP) {
            store.step = s[0] as u64 + ((s[1] as u64) << 16);
        }
        store
    }

    /// Copies values of every parameter in `other` whose name is present here.
    pub fn load_values(&mut self, other: &ParamStore) {
        for (name, p) in &other.params {
            if let Some(mine) = self.params.get_mut(name) {
                if mine.shape == p.shape {
                    mine.value.clone_from(&p.value);
                }
            }
        }
    }
}

/// Ordered named `f32` arrays as stored in a `CKPT1` file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: String, shape: Vec<usize>, values: Vec<f32>) {
        self.entries.insert(name, (shape, values));
    }

    pub fn get(&self, name: &str) -> Option<&(Vec<usize>, Vec<f32>)> {
        self.entries.get(name)
    }

    /// Stores integers exactly: each `u64` becomes four 16-bit chunks
    /// (least significant first), each held in an `f32`.
    pub fn insert_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        let chunks = values
            .iter()
            .flat_map(|&v| (0..4).map(move |k| ((v >> (16 * k)) & 0xFFFF) as f32))
            .collect();
        self.insert(name.into(), vec![values.len(), 4], chunks);
    }

    /// Inverse of [`Checkpoint::insert_u64s`].
    pub fn get_u64s(&self, name: &str) -> Result<Vec<u64>> {
        let (shape, chunks) = self
            .get(name)
            .ok_or_else(|| DiffError::Checkpoint(format!("missing entry {name:?}")))?;
        if shape.len() != 2 || shape[1] != 4 {
            return Err(DiffError::Checkpoint(format!("{name:?} is not an integer entry")));
        }
        chunks
            .chunks(4)
            .map(|c| {
                c.iter().enumerate().try_fold(0u64, |acc, (k, &x)| {
                    if x.fract() != 0.0 || !(0.0..65536.0).contains(&x) {
                        return Err(DiffError::Checkpoint(format!("{name:?} holds a non-integer chunk")));
                    }
                    Ok(acc | ((x as u64) << (16 * k)))
                })
            })
            .collect()
    }

    /// Stores `f64` values bit-exactly via [`Checkpoint::insert_u64s`].
    pub fn insert_f64s(&mut self, name: impl Into<String>, values: &[f64]) {
        let bits: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        self.insert_u64s(name, &bits);
    }

    pub fn get_f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get_u64s(name)?.into_iter().map(f64::from_bits).collect())
    }

    /// The entries under `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter_map(|(name, e)| name.strip_prefix(prefix).map(|n| (n.to_owned(), e.clone())))
                .collect(),
        }
    }

    /// Adds every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (name, (shape, values)) in &other.entries {
            self.insert(format!("{prefix}{name}"), shape.clone(), values.clone());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, (shape, values)) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(5)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(DiffError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| DiffError::Checkpoint("entry name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ckpt.insert(name, shape, values);
        }
        if r.pos != bytes.len() {
            return Err(DiffError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DiffError::Checkpoint(format!(
                "truncated: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
