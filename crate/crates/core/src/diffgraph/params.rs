use std::collections::BTreeMap;

use super::Tensor;

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Tensor,
    row_sparse: bool,
}

/// Named collection of parameter tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a dense parameter.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    /// Registers a lookup table whose gradients are accumulated row by row.
    pub fn add_table(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        assert_eq!(value.rank(), 2, "lookup tables are matrices");
        self.push(name.into(), value, true)
    }

    fn push(&mut self, name: String, value: Tensor, row_sparse: bool) -> ParamId {
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            row_sparse,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_row_sparse(&self, id: ParamId) -> bool {
        self.entries[id.0].row_sparse
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

#[derive(Clone, Debug)]
enum GradSlot {
    Dense(Vec<f64>),
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

/// Gradient accumulator keyed by [`ParamId`].
///
/// Lookup tables keep only the rows that were touched, so a per-example
/// gradient stays small even for large vocabularies.
#[derive(Clone, Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    row_sparse: Vec<bool>,
    slots: Vec<Option<GradSlot>>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            shapes: store.entries.iter().map(|e| e.value.shape().to_vec()).collect(),
            row_sparse: store.entries.iter().map(|e| e.row_sparse).collect(),
            slots: vec![None; store.len()],
        }
    }

    fn numel(&self, id: ParamId) -> usize {
        self.shapes[id.0].iter().product()
    }

    fn cols(&self, id: ParamId) -> usize {
        *self.shapes[id.0].last().unwrap()
    }

    pub(crate) fn add_dense(&mut self, id: ParamId, values: &[f64]) {
        debug_assert_eq!(values.len(), self.numel(id));
        if self.row_sparse[id.0] {
            let cols = self.cols(id);
            for (r, chunk) in values.chunks(cols).enumerate() {
                if chunk.iter().any(|&v| v != 0.0) {
                    self.add_row(id, r, chunk);
                }
            }
            return;
        }
        let n = self.numel(id);
        match self.slots[id.0].get_or_insert_with(|| GradSlot::Dense(vec![0.0; n])) {
            GradSlot::Dense(acc) => acc.iter_mut().zip(values).for_each(|(a, v)| *a += v),
            GradSlot::Rows { .. } => unreachable!("dense slot expected"),
        }
    }

    pub(crate) fn add_row(&mut self, id: ParamId, row: usize, values: &[f64]) {
        let cols = self.cols(id);
        debug_assert_eq!(values.len(), cols);
        if !self.row_sparse[id.0] {
            let n = self.numel(id);
            match self.slots[id.0].get_or_insert_with(|| GradSlot::Dense(vec![0.0; n])) {
                GradSlot::Dense(acc) => acc[row * cols..(row + 1) * cols]
                    .iter_mut()
                    .zip(values)
                    .for_each(|(a, v)| *a += v),
                GradSlot::Rows { .. } => unreachable!("dense slot expected"),
            }
            return;
        }
        let slot = self.slots[id.0].get_or_insert_with(|| GradSlot::Rows {
            cols,
            rows: BTreeMap::new(),
        });
        match slot {
            GradSlot::Rows { rows, .. } => {
                let acc = rows.entry(row).or_insert_with(|| vec![0.0; cols]);
                acc.iter_mut().zip(values).for_each(|(a, v)| *a += v);
            }
            GradSlot::Dense(_) => unreachable!("row slot expected"),
        }
    }

    /// Adds `other` into `self`. Both must come from the same store layout.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.shapes, other.shapes, "gradient layouts differ");
        for (i, slot) in other.slots.iter().enumerate() {
            let id = ParamId(i);
            match slot {
                None => {}
                Some(GradSlot::Dense(values)) => self.add_dense(id, values),
                Some(GradSlot::Rows { rows, .. }) => {
                    for (&r, values) in rows {
                        self.add_row(id, r, values);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in self.slots.iter_mut().flatten() {
            match slot {
                GradSlot::Dense(values) => values.iter_mut().for_each(|v| *v *= factor),
                GradSlot::Rows { rows, .. } => rows
                    .values_mut()
                    .flat_map(|r| r.iter_mut())
                    .for_each(|v| *v *= factor),
            }
        }
    }

    /// Whether any gradient reached `id`.
    pub fn touched(&self, id: ParamId) -> bool {
        self.slots[id.0].is_some()
    }

    /// Dense copy of the gradient for `id` (zeros if untouched).
    pub fn dense(&self, id: ParamId) -> Tensor {
        let mut out = Tensor::zeros(&self.shapes[id.0]);
        self.write_dense(id, out.data_mut());
        out
    }

    pub(crate) fn write_dense(&self, id: ParamId, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.slots[id.0] {
            None => {}
            Some(GradSlot::Dense(values)) => out.copy_from_slice(values),
            Some(GradSlot::Rows { cols, rows }) => {
                for (&r, values) in rows {
                    out[r * cols..(r + 1) * cols].copy_from_slice(values);
                }
            }
        }
    }

    /// Largest absolute gradient coordinate for `id`.
    pub fn max_abs(&self, id: ParamId) -> f64 {
        match &self.slots[id.0] {
            None => 0.0,
            Some(GradSlot::Dense(values)) => values.iter().fold(0.0, |m, v| m.max(v.abs())),
            Some(GradSlot::Rows { rows, .. }) => rows
                .values()
                .flat_map(|r| r.iter())
                .fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|slot| match slot {
            GradSlot::Dense(values) => values.iter().all(|v| v.is_finite()),
            GradSlot::Rows { rows, .. } => rows.values().flatten().all(|v| v.is_finite()),
        })
    }
}
