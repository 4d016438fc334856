use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Contiguous placement of every parameter inside a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Digest of names and shapes in declaration order.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update((e.name.len() as u64).to_le_bytes());
            h.update(e.name.as_bytes());
            h.update((e.shape.len() as u64).to_le_bytes());
            for d in &e.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Flattened gradient bound to the layout it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGrad {
    pub values: Vec<f64>,
    pub layout_hash: u64,
}

impl FlatGrad {
    pub fn new(values: Vec<f64>, layout_hash: u64) -> Self {
        Self {
            values,
            layout_hash,
        }
    }

    pub fn zeros(layout: &Layout) -> Self {
        Self::new(vec![0.0; layout.total()], layout.hash())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &FlatGrad) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_compatible(&self, other: &FlatGrad) -> Result<()> {
        if self.layout_hash != other.layout_hash || self.len() != other.len() {
            return Err(Error::Layout(format!(
                "gradient layouts differ ({:016x}/{} vs {:016x}/{})",
                self.layout_hash,
                self.len(),
                other.layout_hash,
                other.len()
            )));
        }
        Ok(())
    }

    /// Elementwise sum of two gradients over the same layout.
    pub fn add(&self, other: &FlatGrad) -> Result<FlatGrad> {
        self.check_compatible(other)?;
        Ok(FlatGrad::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            self.layout_hash,
        ))
    }
}

/// Named parameter tensors in a fixed declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Layout(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let entries = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let e = LayoutEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        Layout {
            entries,
            total: offset,
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Parameter values concatenated in layout order.
    pub fn flatten_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in &self.tensors {
            out.extend_from_slice(t.values());
        }
        out
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Layout(format!(
                "{} values for a layout of {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.variable(t.clone()))
            .collect()
    }

    /// Places every parameter on `tape` as a constant; gradients stop here.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Copies gradients from a differentiated tape into each tensor's `grad`; parameters
    /// the loss did not reach get zeros.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Layout(format!(
                "{} tape handles for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            let g = match tape.grad(*v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            };
            t.grad = Some(g);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.grad = None);
    }

    pub fn flatten_grads(&self) -> Result<FlatGrad> {
        let mut values = Vec::with_capacity(self.num_values());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            match &t.grad {
                Some(g) => values.extend_from_slice(g),
                None => return Err(Error::Layout(format!("parameter {name} has no gradient"))),
            }
        }
        Ok(FlatGrad::new(values, self.layout().hash()))
    }

    pub fn unflatten_apply(&mut self, g: &FlatGrad) -> Result<()> {
        let layout = self.layout();
        if g.len() != layout.total() || g.layout_hash != layout.hash() {
            return Err(Error::Layout(format!(
                "gradient of length {} does not fit layout of {}",
                g.len(),
                layout.total()
            )));
        }
        for (t, e) in self.tensors.iter_mut().zip(layout.entries()) {
            t.grad = Some(g.values[e.offset..e.offset + e.len()].to_vec());
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}
