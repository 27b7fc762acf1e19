use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::param::{ParamGroup, ParamStore};
use crate::tensor::Scalar;

use super::layers::{ConvLayer, LayerSpec};

/// Patch discriminator: strided 4x4 convolutions ending in one logit map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub layers: Vec<ConvLayer>,
}

impl Discriminator {
    pub fn new<T: Scalar>(specs: &[LayerSpec], seed: u64, store: &mut ParamStore<T>) -> Self {
        let layers = specs
            .iter()
            .map(|s| ConvLayer::new(s.clone(), ParamGroup::Disc, seed, store))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        self.layers.iter().try_fold(image, |x, l| l.forward(g, store, x))
    }
}
