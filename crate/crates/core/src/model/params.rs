//! Named parameter tensors.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Real;

/// Parameters in creation order, addressable by name or slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: HashMap<String, usize>,
}

impl<F> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

/// Learning-rate group of a parameter: image and text encoders train at
/// their own rate, everything else at the base rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoders,
    Rest,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("encoder.") || name.starts_with("ipg.text.") {
        ParamGroup::Encoders
    } else {
        ParamGroup::Rest
    }
}

impl<F: Real> ParamStore<F> {
    pub fn insert(&mut self, name: &str, value: Array2<F>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.slot(name).map(|i| &self.values[i])
    }

    pub fn value(&self, slot: usize) -> &Array2<F> {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Array2<F> {
        &mut self.values[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let keep: Vec<bool> = self.names.iter().map(|n| !n.starts_with(prefix)).collect();
        let removed = keep.iter().filter(|k| !**k).count();
        let mut out = ParamStore::default();
        for ((n, v), k) in self.names.drain(..).zip(self.values.drain(..)).zip(keep) {
            if k {
                out.insert(&n, v);
            }
        }
        *self = out;
        removed
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| G::lit(x.as_f64()))).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameter initialisers driven by one seeded stream.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform<F: Real>(&mut self, rows: usize, cols: usize, bound: f64) -> Array2<F> {
        Array2::from_shape_fn((rows, cols), |_| F::lit(self.rng.random_range(-bound..=bound)))
    }

    /// Glorot-uniform weight for a `fan_in × fan_out` projection.
    pub fn xavier<F: Real>(&mut self, fan_in: usize, fan_out: usize) -> Array2<F> {
        self.uniform(fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    /// He-uniform weight for layers followed by ReLU.
    pub fn he<F: Real>(&mut self, fan_in: usize, fan_out: usize) -> Array2<F> {
        self.uniform(fan_in, fan_out, (6.0 / fan_in as f64).sqrt())
    }

    pub fn embedding<F: Real>(&mut self, rows: usize, cols: usize) -> Array2<F> {
        self.uniform(rows, cols, 0.02 * 3f64.sqrt())
    }
}

pub(crate) fn zeros<F: Real>(rows: usize, cols: usize) -> Array2<F> {
    Array2::zeros((rows, cols))
}

pub(crate) fn ones<F: Real>(rows: usize, cols: usize) -> Array2<F> {
    Array2::ones((rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remove_prefix_keeps_order_and_index() {
        let mut p = ParamStore::<f32>::default();
        p.insert("a.x", zeros(1, 1));
        p.insert("ipg.y", zeros(1, 2));
        p.insert("b.z", ones(2, 1));
        assert_eq!(p.remove_prefix("ipg."), 1);
        assert_eq!(p.names(), ["a.x", "b.z"]);
        assert_eq!(p.slot("b.z"), Some(1));
        assert_eq!(p.numel(), 3);
    }

    #[test]
    fn groups_follow_names() {
        assert_eq!(group_of("encoder.conv0.w"), ParamGroup::Encoders);
        assert_eq!(group_of("ipg.text.tok"), ParamGroup::Encoders);
        assert_eq!(group_of("ipg.img_proj.w"), ParamGroup::Rest);
        assert_eq!(group_of("decoder.out.w"), ParamGroup::Rest);
    }
}
