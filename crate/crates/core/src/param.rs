//! Named trainable parameters and their deterministic initialization.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

/// Which sub-network owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    /// Semantic & image filtering branch (encoder, middle blocks, decoder).
    Sifb,
    /// Kernel prediction branch including both kernel heads.
    Kpb,
    Disc,
    /// Never updated, e.g. the loss feature extractor.
    Frozen,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Sifb => "sifb",
            ParamGroup::Kpb => "kpb",
            ParamGroup::Disc => "disc",
            ParamGroup::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sifb" => Some(ParamGroup::Sifb),
            "kpb" => Some(ParamGroup::Kpb),
            "disc" => Some(ParamGroup::Disc),
            "frozen" => Some(ParamGroup::Frozen),
            _ => None,
        }
    }

    pub const GENERATOR: [ParamGroup; 2] = [ParamGroup::Sifb, ParamGroup::Kpb];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub group: ParamGroup,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> Self {
        Self {
            name: name.into(),
            grad: Tensor::zeros(value.shape()),
            value,
            trainable: group != ParamGroup::Frozen,
            group,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, param: Parameter<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(&param.name),
            "duplicate parameter name {}",
            param.name
        );
        let id = self.params.len();
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self, groups: &[ParamGroup]) {
        for p in self.params.iter_mut().filter(|p| groups.contains(&p.group)) {
            p.zero_grad();
        }
    }

    /// Replace a value, keeping name, group and shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Parameter {
            name: name.into(),
            reason: "unknown parameter".into(),
        })?;
        let p = self.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::Parameter {
                name: name.into(),
                reason: format!(
                    "shape {} does not match expected {}",
                    shape_str(value.shape()),
                    shape_str(p.value.shape())
                ),
            });
        }
        p.value = value;
        Ok(())
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Per-parameter generator keyed by (seed, name), so a parameter's initial
/// value does not depend on which other parameters exist.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ name_hash(name))
}

/// Fan-in scaled uniform initialization: `U(-gain * sqrt(3 / fan_in), +...)`.
pub fn init_uniform<T: Scalar>(shape: [usize; 4], fan_in: usize, gain: f64, seed: u64, name: &str) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = param_rng(seed, name);
    Tensor::uniform(shape, -bound, bound, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let a: Tensor<f32> = init_uniform([2, 2, 3, 3], 18, 1.0, 5, "enc1.w");
        let b: Tensor<f32> = init_uniform([2, 2, 3, 3], 18, 1.0, 5, "enc1.w");
        let c: Tensor<f32> = init_uniform([2, 2, 3, 3], 18, 1.0, 5, "enc2.w");
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (3.0f32 / 18.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn store_counts_and_lookup() {
        let mut s = ParamStore::<f64>::new();
        s.add(Parameter::new("a", Tensor::zeros([1, 1, 2, 3]), ParamGroup::Sifb));
        s.add(Parameter::new("b", Tensor::zeros([1, 1, 1, 4]), ParamGroup::Disc));
        assert_eq!(s.count(None), 10);
        assert_eq!(s.count(Some(ParamGroup::Disc)), 4);
        assert!(s.by_name("b").is_some());
        assert!(s.set_value("a", Tensor::zeros([1, 1, 1, 1])).is_err());
    }
}
