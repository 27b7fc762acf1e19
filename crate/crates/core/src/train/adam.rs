use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamStore};
use crate::tensor::{s, shape_str, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for the parameters of a set of groups, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub groups: Vec<ParamGroup>,
    pub t: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, groups: &[ParamGroup]) -> Self {
        let owned: Vec<_> = store
            .iter()
            .filter(|p| p.trainable && groups.contains(&p.group))
            .collect();
        Self {
            groups: groups.to_vec(),
            t: 0,
            names: owned.iter().map(|p| p.name.clone()).collect(),
            m: owned.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: owned.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// One bias-corrected update of every owned parameter; gradients are
    /// zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1: T = s(1.0 / (1.0 - b1.powi(t)));
        let c2: T = s(1.0 / (1.0 - b2.powi(t)));
        let (lr, eps): (T, T) = (s(cfg.lr), s(cfg.eps));
        let (b1, b2, one): (T, T, T) = (s(b1), s(b2), T::one());
        for (i, name) in self.names.iter().enumerate() {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Contract(format!("optimizer parameter {name} missing from store")))?;
            let p = store.get_mut(id);
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Contract(format!(
                    "gradient of {name} has shape {}, value {}",
                    shape_str(p.grad.shape()),
                    shape_str(p.value.shape())
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - lr * (*m * c1) / ((*v * c2).sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
