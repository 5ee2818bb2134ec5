//! Named, ordered parameter collections.
//!
//! Every model owns exactly one [`ParamSet`]. Order is insertion order and
//! is part of the contract: the optimizer's moment vectors, checkpoint
//! files and tape registration all line up by index.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::tape::{GradTape, NodeId};
use crate::tensor::Tensor;
use crate::util::fnv1a64;

pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

impl std::fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ParamSet({} tensors, {} elements)",
            self.len(),
            self.total_elements()
        )
    }
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a parameter and returns its index. Duplicate names are a
    /// construction bug, not a runtime condition, hence the panic.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        i
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, i: usize, tensor: Tensor) -> Result<()> {
        if self.tensors[i].shape() != tensor.shape() {
            return Err(Error::shape(
                "param_set.set",
                format!(
                    "parameter {} has shape {:?}, replacement has {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    tensor.shape()
                ),
            ));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::value("param_set.set_by_name", format!("unknown parameter {name}")))?;
        self.set(i, tensor)
    }

    /// In-place update used by the optimizer.
    pub fn update(&mut self, i: usize, f: impl FnOnce(&mut [f64])) {
        f(self.tensors[i].data_mut());
    }

    /// Overwrites every parameter from named checkpoint tensors. The
    /// set must already hold the expected layout; name or shape drift
    /// is an error, as is a missing or surplus tensor.
    pub fn import_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.len() {
            return Err(Error::value(
                "param_set.import",
                format!(
                    "checkpoint holds {} tensors, model defines {}",
                    tensors.len(),
                    self.len()
                ),
            ));
        }
        for (name, t) in tensors {
            self.set_by_name(name, t.clone())?;
        }
        Ok(())
    }

    /// Registers every parameter on a tape in set order. `trainable`
    /// selects between tracked parameters (training) and constants
    /// (inference; nothing gets recorded downstream).
    pub fn register_all(&self, tape: &mut GradTape, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Content hash over names, shapes and exact bit patterns. Two sets
    /// fingerprint equal iff a checkpoint round-trip would reproduce one
    /// from the other.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.iter() {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Deep copy with unshared payloads.
    pub fn deep_clone(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .expect("existing tensor is valid");
            out.push(name, copy);
        }
        out
    }
}
