use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Reserved prefix for optimizer state inside checkpoints.
pub const OPT_PREFIX: &str = "opt/";
const CHECKPOINT_MAGIC: &[u8; 4] = b"KGF1";

/// Named parameters, their gradients, and Adam moment buffers.
///
/// Names are kept in a `BTreeMap` so every iteration (clipping norms, Adam
/// updates, checkpoint layout) runs in the same order on every run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.grads.remove(&name);
        self.first_moment.remove(&name);
        self.second_moment.remove(&name);
        self.params.insert(name, value);
    }

    /// Drops a parameter together with its gradient and moments.
    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.grads.remove(name);
        self.first_moment.remove(name);
        self.second_moment.remove(name);
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_values_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Resets every gradient to zeros of the parameter's shape.
    pub fn zero_grad(&mut self) {
        self.grads = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros_like(v)))
            .collect();
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn grads_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.values_mut()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let param = self
            .params
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        if param.len() != g.len() {
            return Err(Error::contract(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                param.len()
            )));
        }
        match self.grads.get_mut(name) {
            Some(existing) => existing.add_assign(g)?,
            None => {
                let mut fresh = Tensor::zeros_like(param);
                fresh.add_assign(g)?;
                self.grads.insert(name.to_string(), fresh);
            }
        }
        Ok(())
    }

    pub(crate) fn moments_mut(&mut self, name: &str) -> (&mut Tensor, &mut Tensor) {
        let shape_of = &self.params[name];
        let m = self
            .first_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros_like(shape_of));
        let v = self
            .second_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros_like(shape_of));
        (m, v)
    }

    pub(crate) fn split_for_update(
        &mut self,
    ) -> (
        &mut BTreeMap<String, Tensor>,
        &BTreeMap<String, Tensor>,
        &mut BTreeMap<String, Tensor>,
        &mut BTreeMap<String, Tensor>,
    ) {
        (
            &mut self.params,
            &self.grads,
            &mut self.first_moment,
            &mut self.second_moment,
        )
    }

    /// Copies the parameters (not gradients or moments) matching `prefix`.
    pub fn extract_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.insert(k.clone(), v.clone());
        }
        out
    }

    /// Copies every parameter of `other` into `self`.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.insert(k.clone(), v.clone());
        }
    }

    // ---- checkpoint format ----

    /// Flat list of named tensors written to a checkpoint, moments included
    /// under `opt/m/`, `opt/v/` and the step counter as `opt/step`.
    fn checkpoint_entries(&self, with_optimizer: bool) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if with_optimizer {
            for (k, v) in &self.first_moment {
                out.push((format!("{OPT_PREFIX}m/{k}"), v.clone()));
            }
            for (k, v) in &self.second_moment {
                out.push((format!("{OPT_PREFIX}v/{k}"), v.clone()));
            }
            out.push((
                format!("{OPT_PREFIX}step"),
                Tensor::new(vec![1], vec![self.step as f64]).unwrap(),
            ));
        }
        out
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, with_optimizer: bool) -> std::io::Result<()> {
        let entries = self.checkpoint_entries(with_optimizer);
        write_tensors(&mut w, &entries)
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<ParamStore> {
        let entries = read_tensors(r)?;
        let mut store = ParamStore::new();
        let mut moments = Vec::new();
        for (name, tensor) in entries {
            if let Some(rest) = name.strip_prefix(OPT_PREFIX) {
                moments.push((rest.to_string(), tensor));
            } else {
                store.insert(name, tensor);
            }
        }
        for (rest, tensor) in moments {
            if rest == "step" {
                store.step = tensor.item()? as u64;
            } else if let Some(name) = rest.strip_prefix("m/") {
                store.first_moment.insert(name.to_string(), tensor);
            } else if let Some(name) = rest.strip_prefix("v/") {
                store.second_moment.insert(name.to_string(), tensor);
            } else {
                return Err(Error::data(format!("unknown optimizer entry `opt/{rest}`")));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, with_optimizer)
            .map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamStore::read_checkpoint(bytes.as_slice()).map_err(|e| match e {
            Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Writes `KGF1` tensors: magic, u32 count, then per entry
/// (u32 name length, name bytes, u32 rank, u64 dims, f64 payload), all
/// little-endian.
pub fn write_tensors<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in tensor.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let truncated = |_| Error::data("truncated checkpoint");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::data("not a KGF1 checkpoint (bad magic)"));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::data("parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(truncated)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::data("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::data("truncated checkpoint"))?;
    Ok(u64::from_le_bytes(buf))
}
