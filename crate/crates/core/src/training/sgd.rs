use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

/// Momentum SGD with coupled L2 weight decay.
///
/// `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·v`, with `wd` forced to zero for
/// biases and batch-norm parameters. Buffers are never touched.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape().to_vec()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::Registry(format!(
                "optimizer tracks {} tensors, registry has {}",
                self.velocity.len(),
                store.len()
            )));
        }
        for (e, v) in store.entries_mut().iter_mut().zip(&mut self.velocity) {
            if !e.kind.trainable() {
                continue;
            }
            let wd = if e.kind.decayed() {
                self.weight_decay
            } else {
                0.0
            };
            sgd_step(
                e.value.data_mut(),
                e.grad.data(),
                v.data_mut(),
                self.momentum,
                wd,
                lr,
            )
            .map_err(|err| Error::Registry(format!("`{}`: {err}", e.name)))?;
        }
        Ok(())
    }
}

/// One update of a single parameter tensor.
pub fn sgd_step<T: Float>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    momentum: f64,
    weight_decay: f64,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Registry(format!(
            "length mismatch: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let (mu, wd, lr) = (T::of(momentum), T::of(weight_decay), T::of(lr));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}
