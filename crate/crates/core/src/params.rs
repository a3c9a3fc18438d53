//! Named parameter storage shared by the model, optimizer and checkpoints.
//!
//! Model structs hold [`ParamId`]s; the tensors themselves live in one
//! [`ParamStore`]. A forward pass binds the store onto a tape and indexes the
//! resulting [`Bound`] with the same ids.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Index;
use std::path::Path;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const MANIFEST: &str = "manifest";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of a subset of parameters.
    pub fn numel_of(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).numel()).sum()
    }

    /// Binds every parameter as a trainable leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t)).collect())
    }

    /// Binds every parameter as a constant leaf.
    pub fn bind_frozen<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.frozen(t)).collect())
    }

    /// Per-parameter gradients, zero where none flowed.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Tensor> {
        bound
            .0
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }

    /// Replaces all tensors, checking shapes against the current ones.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Writes `manifest` plus one `<name>.tnsr` per tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            manifest.push_str(name);
            manifest.push(' ');
            manifest.push_str(&t.ndim().to_string());
            for d in t.shape() {
                manifest.push_str(&format!(" {d}"));
            }
            manifest.push('\n');
            t.save(dir.join(format!("{name}.tnsr")))?;
        }
        let path = dir.join(MANIFEST);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(manifest.as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    /// Loads tensors saved by [`ParamStore::save`] into a store whose names
    /// and shapes must match exactly.
    pub fn load_into(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let entries = read_manifest(dir)?;
        if entries.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint {} lists {} tensors, model expects {}",
                dir.display(),
                entries.len(),
                self.len()
            )));
        }
        let mut loaded = Vec::with_capacity(entries.len());
        for (i, (name, shape)) in entries.into_iter().enumerate() {
            if name != self.names[i] || shape != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "checkpoint entry {i} is {name} {shape:?}, model expects {} {:?}",
                    self.names[i],
                    self.tensors[i].shape()
                )));
            }
            let t = Tensor::load(dir.join(format!("{name}.tnsr")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "{name}.tnsr has shape {:?}, manifest says {shape:?}",
                    t.shape()
                )));
            }
            loaded.push(t);
        }
        self.tensors = loaded;
        Ok(())
    }
}

/// Reads a manifest as `(name, shape)` pairs in file order.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut it = line.split_whitespace();
            let bad = || Error::Data(format!("malformed manifest line {line:?}"));
            let name = it.next().ok_or_else(bad)?.to_string();
            let nd: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let shape = (0..nd)
                .map(|_| it.next().and_then(|s| s.parse().ok()).ok_or_else(bad))
                .collect::<Result<Vec<usize>>>()?;
            Ok((name, shape))
        })
        .collect()
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.add("layer.w", Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        a.add("layer.b", Tensor::vector(vec![0.5, -0.5]));
        a.save(dir.path()).unwrap();

        let mut b = ParamStore::new();
        b.add("layer.w", Tensor::zeros([2, 2]));
        b.add("layer.b", Tensor::zeros([2]));
        b.load_into(dir.path()).unwrap();
        assert_eq!(a, b);

        let mut wrong = ParamStore::new();
        wrong.add("layer.w", Tensor::zeros([2, 3]));
        wrong.add("layer.b", Tensor::zeros([2]));
        assert!(matches!(wrong.load_into(dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_lists_names_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.add("x", Tensor::zeros([3, 4]));
        a.save(dir.path()).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m, vec![("x".to_string(), vec![3, 4])]);
    }
}
