use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{ForwardOptions, MisfModel};

/// Threshold on `|v - 1|` above which a hole value counts as filled.
pub const FILL_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct RecurrentTrace<T> {
    /// `frames[0]` is the corrupted input, `frames[t]` the t-th refill.
    pub frames: Vec<Tensor<T>>,
    /// [`fill_front`] of every frame.
    pub fill: Vec<f64>,
}

/// Fraction of hole values that moved away from the hole fill value 1.0.
pub fn fill_front<T: Scalar>(frame: &Tensor<T>, mask: &Tensor<T>) -> f64 {
    hole_fraction(frame, mask, |v, _| (v - 1.0).abs() > FILL_THRESHOLD, None)
}

/// Fraction of hole values within `tol` of the ground truth.
pub fn hole_accuracy<T: Scalar>(frame: &Tensor<T>, truth: &Tensor<T>, mask: &Tensor<T>, tol: f64) -> f64 {
    hole_fraction(frame, mask, |v, t| (v - t).abs() < tol, Some(truth))
}

fn hole_fraction<T: Scalar>(
    frame: &Tensor<T>,
    mask: &Tensor<T>,
    pred: impl Fn(f64, f64) -> bool,
    truth: Option<&Tensor<T>>,
) -> f64 {
    let [b, c, h, w] = frame.shape();
    let (mut hit, mut total) = (0usize, 0usize);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if mask.at(bi, 0, y, x).as_f64() < 0.5 {
                    continue;
                }
                for ch in 0..c {
                    let v = frame.at(bi, ch, y, x).as_f64();
                    let t = truth.map_or(0.0, |t| t.at(bi, ch, y, x).as_f64());
                    total += 1;
                    hit += usize::from(pred(v, t));
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Feed the model its own composited output `iters` times.
///
/// Known pixels are restored from `image` after every pass.
pub fn recurrent_filter<T: Scalar>(
    model: &MisfModel<T>,
    image: &Tensor<T>,
    mask: &Tensor<T>,
    iters: usize,
    opts: &ForwardOptions,
) -> Result<RecurrentTrace<T>> {
    let v = opts.variant.unwrap_or(model.variant());
    if !v.image_filter() {
        return Err(Error::Contract(format!(
            "recurrent filtering needs an image-level filter, got {v}"
        )));
    }
    let keep = super::expand_mask(mask, image.channels());
    let mut frames = vec![image.clone()];
    for _ in 0..iters {
        let last = frames.last().expect("non-empty");
        let (_, out) = model.infer(last, mask, opts)?;
        let next = Tensor::from_fn(image.shape(), |[b, c, y, x]| {
            let m = keep.at(b, c, y, x);
            m * out.at(b, c, y, x) + (T::one() - m) * image.at(b, c, y, x)
        });
        frames.push(next);
    }
    let fill = frames.iter().map(|f| fill_front(f, mask)).collect();
    Ok(RecurrentTrace { frames, fill })
}
