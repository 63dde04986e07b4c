//! Named parameter storage shared by all model families.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to one named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
///
/// Ids are dense indices in creation order, which fixes the serialization
/// order of checkpoints and the accumulation order of gradients.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, cannot assign {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }

    /// FNV-1a hash over the exact bit patterns of the listed parameters.
    pub fn hash_subset(&self, ids: &[ParamId]) -> u64 {
        let mut h = FNV_OFFSET;
        for id in ids {
            for byte in self.names[id.0].as_bytes() {
                h = fnv_step(h, *byte);
            }
            for x in self.values[id.0].data() {
                for byte in x.as_f64().to_le_bytes() {
                    h = fnv_step(h, byte);
                }
            }
        }
        h
    }

    pub fn hash_all(&self) -> u64 {
        let ids: Vec<ParamId> = self.ids().collect();
        self.hash_subset(&ids)
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv_step(h: u64, byte: u8) -> u64 {
    (h ^ byte as u64).wrapping_mul(FNV_PRIME)
}

/// FNV-1a of a byte string; used to derive per-parameter init seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| fnv_step(h, *b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("w1", Tensor::zeros(&[2, 2]));
        let b = store.add("w2", Tensor::ones(&[3]));
        assert_eq!(store.name(a), "w1");
        assert_eq!(store.id_by_name("w2"), Some(b));
        assert_eq!(store.id_by_name("missing"), None);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn hash_changes_with_values() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("w", Tensor::zeros(&[4]));
        let h0 = store.hash_subset(&[a]);
        store.value_mut(a).data_mut()[0] = 1.0;
        let h1 = store.hash_subset(&[a]);
        assert_ne!(h0, h1);
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("w", Tensor::zeros(&[4]));
        assert!(store.set(a, Tensor::zeros(&[5])).is_err());
        assert!(store.set(a, Tensor::ones(&[4])).is_ok());
    }
}
