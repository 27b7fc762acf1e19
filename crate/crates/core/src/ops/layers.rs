//! Pooling, pointwise activations, instance normalization and channel concat.

use crate::error::{Error, Result};
use crate::tensor::{s, shape_str, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const LEAKY: Activation = Activation::LeakyRelu(0.2);

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * s(slope)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    s(slope)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Contract(format!(
            "avg_pool2d needs even spatial dims, got {}",
            shape_str(x.shape())
        )));
    }
    let quarter: T = s(0.25);
    Ok(Tensor::from_fn([b, c, h / 2, w / 2], |[bi, ci, y, xx]| {
        let (y2, x2) = (2 * y, 2 * xx);
        (x.at(bi, ci, y2, x2) + x.at(bi, ci, y2, x2 + 1) + x.at(bi, ci, y2 + 1, x2) + x.at(bi, ci, y2 + 1, x2 + 1))
            * quarter
    }))
}

pub fn avg_pool2d_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = grad_out.shape();
    let quarter: T = s(0.25);
    Tensor::from_fn([b, c, 2 * h, 2 * w], |[bi, ci, y, x]| {
        grad_out.at(bi, ci, y / 2, x / 2) * quarter
    })
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [ba, ca, ha, wa] = a.shape();
    let [bb, cb, hb, wb] = b.shape();
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            shape_str(a.shape()),
            shape_str(b.shape()),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..ba {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([ba, ca + cb, ha, wa], data)
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [b, c, h, w] = g.shape();
    let plane = h * w;
    let mut a = Vec::with_capacity(b * first * plane);
    let mut r = Vec::with_capacity(b * (c - first) * plane);
    for i in 0..b {
        let item = g.item(i);
        a.extend_from_slice(&item[..first * plane]);
        r.extend_from_slice(&item[first * plane..]);
    }
    (
        Tensor::from_vec([b, first, h, w], a).expect("split sizes"),
        Tensor::from_vec([b, c - first, h, w], r).expect("split sizes"),
    )
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Non-affine instance normalization. Returns the output and the per-plane
/// inverse standard deviations needed for the backward pass.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let [b, c, h, w] = x.shape();
    let plane = h * w;
    let n: T = s(plane as f64);
    let eps: T = s(INSTANCE_NORM_EPS);
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(b * c);
    for chunk in out.data_mut().chunks_mut(plane) {
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn instance_norm_backward<T: Scalar>(y: &Tensor<T>, inv_std: &[T], grad_out: &Tensor<T>) -> Tensor<T> {
    let plane = y.height() * y.width();
    let n: T = s(plane as f64);
    let mut dx = grad_out.clone();
    for ((dchunk, ychunk), &inv) in dx.data_mut().chunks_mut(plane).zip(y.data().chunks(plane)).zip(inv_std) {
        let mean_dy = dchunk.iter().copied().sum::<T>() / n;
        let mean_dy_y = dchunk.iter().zip(ychunk).map(|(&d, &yv)| d * yv).sum::<T>() / n;
        for (d, &yv) in dchunk.iter_mut().zip(ychunk) {
            *d = inv * (*d - mean_dy - yv * mean_dy_y);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_tanh_values() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::LEAKY.apply(-10.0f64), -2.0);
        let sig = activation(&Tensor::<f64>::full([1, 1, 1, 4], 50.0), Activation::Sigmoid);
        assert!(sig.max_value() <= 1.0);
    }

    #[test]
    fn avg_pool_means() {
        let c = Tensor::<f32>::full([1, 2, 4, 6], 3.5);
        let p = avg_pool2d(&c).unwrap();
        assert_eq!(p.shape(), [1, 2, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 3.5));

        let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |[_, _, h, w]| (h * 4 + w) as f64);
        let p = avg_pool2d(&x).unwrap();
        // hand-computed window means
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn avg_pool_rejects_odd() {
        let x = Tensor::<f32>::zeros([1, 1, 5, 4]);
        assert!(avg_pool2d(&x).is_err());
    }

    #[test]
    fn concat_layout() {
        let a = Tensor::<f64>::full([1, 2, 3, 3], 1.0);
        let b = Tensor::<f64>::from_fn([1, 1, 3, 3], |[_, _, h, w]| (h * 3 + w) as f64);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), [1, 3, 3, 3]);
        assert_eq!(c.at(0, 2, 1, 2), b.at(0, 0, 1, 2));
        let empty = Tensor::<f64>::zeros([1, 0, 3, 3]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        let bad = Tensor::<f64>::zeros([1, 1, 2, 3]);
        assert!(concat_channels(&a, &bad).is_err());
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::<f64>::from_fn([1, 2, 4, 4], |[_, c, h, w]| (c * 7 + h * h + w) as f64);
        let (y, _) = instance_norm(&x);
        for chunk in y.data().chunks(16) {
            let m: f64 = chunk.iter().sum::<f64>() / 16.0;
            let v: f64 = chunk.iter().map(|a| a * a).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
