use std::collections::{BTreeMap, HashMap};

use super::{DiffError, Tensor};

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Insertion order is the canonical order used by checkpoints, the optimizer
/// and gradient checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    frozen_rows: Vec<(ParamId, usize)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on duplicate names; the parameter inventory
    /// is fixed at model construction time.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.tensors.len());
        let mut tensor = tensor;
        tensor.set_requires_grad(true);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId, DiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Pins a row at its current value: gradients routed into it are dropped.
    pub fn freeze_row(&mut self, id: ParamId, row: usize) {
        self.frozen_rows.push((id, row));
    }

    pub fn is_row_frozen(&self, id: ParamId, row: usize) -> bool {
        self.frozen_rows.iter().any(|&(p, r)| p == id && r == row)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds one backward pass worth of gradients into the tensors' grad slots.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in &grads.dense {
            self.tensors[id.0].accumulate_grad(g);
        }
        for (id, rows) in &grads.rows {
            for (&r, g) in rows {
                self.tensors[id.0].accumulate_grad_row(r, g);
            }
        }
        for &(id, r) in &self.frozen_rows {
            let cols = self.tensors[id.0].cols();
            if let Some(g) = self.tensors[id.0].grad_mut() {
                g[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Flattened parameter values in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrites every value from a flat vector in canonical order.
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<(), DiffError> {
        if values.len() != self.numel() {
            return Err(DiffError::DataLength {
                rows: 1,
                cols: self.numel(),
                len: values.len(),
            });
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Multiplies every stored gradient by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Flattened gradients in canonical order (zeros where absent).
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
        out
    }

    /// Maps a flat coordinate back to (parameter, offset).
    pub fn locate(&self, mut coord: usize) -> Option<(ParamId, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if coord < t.len() {
                return Some((ParamId(i), coord));
            }
            coord -= t.len();
        }
        None
    }
}

/// Parameter gradients produced by one backward pass.
///
/// Embedding lookups produce sparse row gradients; everything else is dense.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub(crate) dense: BTreeMap<ParamId, Vec<f64>>,
    pub(crate) rows: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>>,
}

impl ParamGrads {
    /// Adds `g`, taking ownership of it when the parameter has no gradient yet.
    pub(crate) fn add_dense(&mut self, id: ParamId, g: Vec<f64>) {
        match self.dense.entry(id) {
            std::collections::btree_map::Entry::Occupied(mut e) => {
                for (d, s) in e.get_mut().iter_mut().zip(&g) {
                    *d += s;
                }
            }
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(g);
            }
        }
    }

    pub(crate) fn row_mut(&mut self, id: ParamId, row: usize, cols: usize) -> &mut Vec<f64> {
        self.rows
            .entry(id)
            .or_default()
            .entry(row)
            .or_insert_with(|| vec![0.0; cols])
    }

    pub fn is_empty(&self) -> bool {
        self.dense.is_empty() && self.rows.is_empty()
    }

    /// Densified gradient for one parameter, or `None` if it received none.
    pub fn get_dense(&self, store: &ParamStore, id: ParamId) -> Option<Vec<f64>> {
        let t = store.get(id);
        let mut out: Option<Vec<f64>> = self.dense.get(&id).cloned();
        if let Some(rows) = self.rows.get(&id) {
            let buf = out.get_or_insert_with(|| vec![0.0; t.len()]);
            for (&r, g) in rows {
                for (a, b) in buf[r * t.cols()..(r + 1) * t.cols()].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        out
    }

    /// Gradient flattened in the store's canonical order.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.numel());
        for id in store.ids() {
            match self.get_dense(store, id) {
                Some(g) => out.extend(g),
                None => out.extend(std::iter::repeat(0.0).take(store.get(id).len())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_rows_drop_gradient() {
        let mut store = ParamStore::new();
        let emb = store.insert("emb", Tensor::filled(3, 2, 1.0));
        store.freeze_row(emb, 0);
        let mut grads = ParamGrads::default();
        grads.row_mut(emb, 0, 2).copy_from_slice(&[5.0, 5.0]);
        grads.row_mut(emb, 2, 2).copy_from_slice(&[1.0, -1.0]);
        store.accumulate(&grads);
        assert_eq!(store.get(emb).grad().unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
    }

    #[test]
    fn locate_walks_canonical_order() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::zeros(2, 2));
        let b = store.insert("b", Tensor::zeros(1, 3));
        assert_eq!(store.locate(0), Some((a, 0)));
        assert_eq!(store.locate(4), Some((b, 0)));
        assert_eq!(store.locate(6), Some((b, 2)));
        assert_eq!(store.locate(7), None);
    }
}
