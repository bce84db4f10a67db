use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::tape::{Gradients, GroupStats, Tape, Var};
use crate::math::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    /// Running statistics are stored here too, with `trainable == false`.
    pub trainable: bool,
}

/// Owns every number of a model: trainable weights and running buffers.
/// Layers only hold [`ParamId`]s into a store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces values by name, checking that names and shapes line up with
    /// the existing layout.
    pub fn load_values(&mut self, values: Vec<(String, Matrix)>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (entry, (name, value)) in self.entries.iter_mut().zip(values) {
            if entry.name != name || entry.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match layout entry {} {:?}",
                    value.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            entry.value = value;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch norm momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// One forward/backward pass: a fresh tape bound to a parameter store.
///
/// Parameters become tape leaves lazily, at most once each. In train mode,
/// batch norm layers queue running-statistic updates which the caller
/// applies to the store after the pass.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    mode: Mode,
    leaves: Vec<Option<Var>>,
    track_params: bool,
    buffer_updates: Vec<(ParamId, Matrix)>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            leaves: vec![None; store.len()],
            track_params: true,
            buffer_updates: Vec::new(),
        }
    }

    /// Parameters enter the tape as constants; useful when only input or
    /// mask gradients are wanted.
    pub fn frozen(store: &'s ParamStore, mode: Mode) -> Self {
        let mut s = Self::new(store, mode);
        s.track_params = false;
        s
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = if self.track_params && entry.trainable {
            self.tape.variable(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.leaves[id.0] = Some(v);
        v
    }

    /// Queues `running = (1 - m) * running + m * batch` for a batch norm
    /// layer, averaging the per-group statistics.
    pub(crate) fn record_bn_stats(
        &mut self,
        running_mean: ParamId,
        running_var: ParamId,
        stats: &GroupStats,
        group: usize,
    ) {
        let groups = stats.mean.rows() as f64;
        let mean = stats.mean.col_sums().scale(1.0 / groups);
        let unbias = group as f64 / (group as f64 - 1.0);
        let var = stats.var.col_sums().scale(unbias / groups);
        let m = BN_MOMENTUM;
        let new_mean = self
            .store
            .get(running_mean)
            .scale(1.0 - m)
            .add(&mean.scale(m))
            .expect("running mean shape");
        let new_var = self
            .store
            .get(running_var)
            .scale(1.0 - m)
            .add(&var.scale(m))
            .expect("running var shape");
        self.buffer_updates.push((running_mean, new_mean));
        self.buffer_updates.push((running_var, new_var));
    }

    /// Gradients of every trainable parameter that took part in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Matrix)> {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(i, leaf)| {
                let v = (*leaf)?;
                if !self.store.entries[i].trainable {
                    return None;
                }
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(self.tape.shape(v).0, self.tape.shape(v).1));
                Some((ParamId(i), g))
            })
            .collect()
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Matrix)> {
        std::mem::take(&mut self.buffer_updates)
    }
}

impl ParamStore {
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Matrix)>) {
        for (id, value) in updates {
            self.entries[id.0].value = value;
        }
    }
}
