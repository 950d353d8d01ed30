//! Named parameter storage, initialization and the fully-connected layer.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of parameter matrices addressed by path strings such
/// as `context.fc1.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// Names and shapes, in insertion order.
    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(Array2::dim))
            .collect()
    }

    pub fn to_archive(&self) -> Vec<TensorRecord> {
        self.iter()
            .map(|(name, value)| TensorRecord {
                name: name.to_owned(),
                shape: [value.nrows(), value.ncols()],
                data: value.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites every parameter from an archive. Names and shapes must match
    /// this store exactly.
    pub fn load_archive(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, archive has {}",
                self.len(),
                records.len()
            )));
        }
        for rec in records {
            let id = self
                .id(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", rec.name)))?;
            let expected = self.values[id.0].dim();
            if (rec.shape[0], rec.shape[1]) != expected || rec.data.len() != expected.0 * expected.1 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: shape {:?} with {} values, expected {:?}",
                    rec.name,
                    rec.shape,
                    rec.data.len(),
                    expected
                )));
            }
            self.values[id.0] = Array2::from_shape_vec(expected, rec.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

/// One parameter tensor in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Uniform fan-in initialization: `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Fully-connected layer `x · W + b` with `W: [in × out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            fan_in_uniform(rng, inputs, outputs, inputs),
        );
        let bias = store.insert(format!("{name}.bias"), fan_in_uniform(rng, 1, outputs, inputs));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn archive_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        Linear::new(&mut store, "fc", 3, 5, &mut rng);
        let json = serde_json::to_string(&store.to_archive()).unwrap();
        let records: Vec<TensorRecord> = serde_json::from_str(&json).unwrap();
        let mut other = store.clone();
        other.value_mut(ParamId(0)).fill(0.0);
        other.load_archive(&records).unwrap();
        assert_eq!(store, other);
    }

    #[test]
    fn archive_shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        Linear::new(&mut store, "fc", 3, 5, &mut rng);
        let mut records = store.to_archive();
        records[0].shape = [5, 3];
        assert!(matches!(store.load_archive(&records), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn fan_in_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = fan_in_uniform(&mut rng, 16, 16, 16);
        assert!(w.iter().all(|v| v.abs() <= 0.25));
    }
}
