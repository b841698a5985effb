use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{AutodiffError, Result, Tensor};

/// A named, trainable tensor with its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub velocity: Tensor<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor<f32>) -> Self {
        let velocity = Tensor::zeros(tensor.shape());
        Parameter {
            name: name.into(),
            tensor,
            velocity,
        }
    }
}

/// He-normal initialization, `N(0, 2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// SGD with momentum: `v <- momentum * v + g`, `p <- p - lr * v`.
pub fn sgd_step(
    params: &mut [Parameter],
    grads: &[Tensor<f32>],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "sgd_step",
            detail: format!("{} params, {} gradients", params.len(), grads.len()),
        });
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "sgd_step",
                detail: format!("{}: {:?} vs {:?}", p.name, p.tensor.shape(), g.shape()),
            });
        }
        for ((w, v), &gv) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(p.velocity.data_mut())
            .zip(g.data())
        {
            *v = momentum * *v + gv;
            *w -= lr * *v;
        }
    }
    Ok(())
}
