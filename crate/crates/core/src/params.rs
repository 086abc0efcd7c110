//! Named learnable parameters and the checkpoint format.
//!
//! A checkpoint is a little-endian binary file:
//!
//! ```text
//! magic   b"MPRNCKPT"
//! version u32 (= 1)
//! width   u8  (4 = f32, 8 = f64)
//! count   u32
//! count x { name_len u32, name utf8, rank u32, dims u64 x rank, data width x numel }
//! ```
//!
//! Values are written at their native width, so save/load is bit exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

const MAGIC: &[u8; 8] = b"MPRNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar = f64> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
}

/// Parameters in registration order, addressable by id or dotted name
/// (e.g. `layer3.hpe.fusion_conv1.weight`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar = f64> {
    params: Vec<Parameter<S>>,
    index: BTreeMap<String, usize>,
}

/// Tape leaves for every parameter of a store, created once per tape.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad: None });
        Ok(ParamId(self.params.len() - 1))
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

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "{}: {} vs {}",
                p.name,
                p.value.shape(),
                value.shape()
            ))
            .into());
        }
        p.value = value;
        Ok(())
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
        Binding { vars }
    }

    /// Binds values as constants: nothing is recorded for backward.
    pub fn bind_constants(&self, tape: &mut Tape<S>) -> Binding {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Binding { vars }
    }

    /// Adds the tape gradients of a bound store into the parameter grads.
    pub fn collect_grads(&mut self, tape: &Tape<S>, binding: &Binding) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(v) {
                p.grad = Some(match p.grad.take() {
                    Some(prev) => prev.add(g)?,
                    None => g.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let width: u8 = if S::DTYPE == "f32" { 4 } else { 8 };
        w.write_all(&[width])?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.dims() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in p.value.data() {
                if width == 4 {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                } else {
                    w.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every parameter from a checkpoint. Names, order and shapes
    /// must match this store exactly.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = read_checkpoint::<S>(bytes)?;
        if entries.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds {} parameters, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (p, (name, value)) in self.params.iter().zip(&entries) {
            if &p.name != name {
                return Err(Error::CheckpointMismatch(format!(
                    "expected parameter `{}`, found `{name}`",
                    p.name
                )));
            }
            if p.value.shape() != value.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "checkpoint parameter `{name}` has shape {}, model expects {}",
                    value.shape(),
                    p.value.shape()
                ))
                .into());
            }
        }
        for (p, (_, value)) in self.params.iter_mut().zip(entries) {
            p.value = value;
            p.grad = None;
        }
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

fn read_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    let bad = |m: &str| Error::MalformedCheckpoint(m.to_string());
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut width = [0u8; 1];
    r.read_exact(&mut width).map_err(|_| bad("truncated header"))?;
    let width = width[0];
    if width != 4 && width != 8 {
        return Err(bad(&format!("unsupported element width {width}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if r.len() < name_len {
            return Err(bad("truncated name"));
        }
        let name = std::str::from_utf8(&r[..name_len]).map_err(|_| bad("name is not utf-8"))?.to_string();
        r = &r[name_len..];
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated dims"))?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = if width == 4 {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|_| bad("truncated data"))?;
                f32::from_le_bytes(b) as f64
            } else {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated data"))?;
                f64::from_le_bytes(b)
            };
            data.push(S::of(v));
        }
        out.push((name, Tensor::new(dims, data)?));
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::MalformedCheckpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}
