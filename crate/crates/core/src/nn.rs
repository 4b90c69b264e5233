//! Forward-pass context and the basic trainable layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{BnConfig, Float, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Squeezed features and weights observed at one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub block: usize,
    /// One `B×(cn/r)` tensor per branch, in branch order.
    pub squeezed: Vec<Tensor<T>>,
    /// `B×cn` attention weights.
    pub weights: Tensor<T>,
}

/// One forward pass: a tape plus the parameters it reads.
///
/// Parameters are bound lazily onto the tape the first time a layer asks for
/// them; [`Session::backward`] copies their leaf gradients back into the store.
pub struct Session<'s, T> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    mode: Mode,
    track_grads: bool,
    bound: Vec<Option<Var>>,
    records: Option<Vec<AttentionRecord<T>>>,
    pub bn: BnConfig,
}

impl<'s, T: Float> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            store,
            mode,
            track_grads: mode == Mode::Train,
            bound: vec![None; n],
            records: None,
            bn: BnConfig::default(),
        }
    }

    /// Forces gradient tracking on or off regardless of mode.
    pub fn with_grads(mut self, track: bool) -> Self {
        self.track_grads = track;
        self
    }

    /// Enables attention-trace capture for this pass.
    pub fn capturing(mut self) -> Self {
        self.records = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let entry = self.store.get(id);
        let grad = self.track_grads && entry.kind.trainable();
        let v = self.tape.leaf(entry.value.clone(), grad);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn record(&mut self, rec: impl FnOnce() -> AttentionRecord<T>) {
        if let Some(r) = self.records.as_mut() {
            r.push(rec());
        }
    }

    pub fn is_capturing(&self) -> bool {
        self.records.is_some()
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord<T>> {
        self.records.take().unwrap_or_default()
    }

    /// Backpropagates `loss` and adds the parameter gradients to the store.
    /// Calling it twice accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.zero_grads();
        self.tape.backward(loss)?;
        for (idx, v) in self.bound.iter().enumerate() {
            let Some(v) = v else { continue };
            if let Some(g) = self.tape.grad(*v) {
                let acc = self.store.entries_mut()[idx].grad.data_mut();
                for (a, &d) in acc.iter_mut().zip(g.data()) {
                    *a += d;
                }
            }
        }
        Ok(())
    }

    /// Batch norm reading running statistics from the store, updating them in train mode.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let train = self.mode == Mode::Train;
        let cfg = self.bn;
        let (mean, var) = self.store.pair_mut(bn.running_mean, bn.running_var);
        self.tape.batch_norm(
            x,
            gamma,
            beta,
            mean.value.data_mut(),
            var.value.data_mut(),
            train,
            cfg,
        )
    }
}

/// Kaiming-uniform bound for ReLU networks: `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = kaiming_bound(in_ch * kernel * kernel);
        let w = Tensor::uniform([out_ch, in_ch, kernel, kernel], -bound, bound, rng);
        let weight = store.register(format!("{name}.weight"), ParamKind::Weight, w)?;
        Ok(Self {
            weight,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.tape.conv2d(x, w, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(
                format!("{name}.gamma"),
                ParamKind::Norm,
                Tensor::ones([channels]),
            )?,
            beta: store.register(
                format!("{name}.beta"),
                ParamKind::Norm,
                Tensor::zeros([channels]),
            )?,
            running_mean: store.register(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros([channels]),
            )?,
            running_var: store.register(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::ones([channels]),
            )?,
            channels,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        s.batch_norm(x, self)
    }

    /// Configures the layer so eval mode computes the identity map:
    /// `gamma = 1`, `beta = 0`, running mean 0 and running variance `1 − eps`.
    pub fn set_identity<T: Float>(&self, store: &mut ParamStore<T>, eps: f64) {
        let c = self.channels;
        *store.value_mut(self.gamma) = Tensor::ones([c]);
        *store.value_mut(self.beta) = Tensor::zeros([c]);
        *store.value_mut(self.running_mean) = Tensor::zeros([c]);
        *store.value_mut(self.running_var) = Tensor::full([c], T::one() - T::of(eps));
    }
}

/// Fully connected layer `y = x·W (+ b)` with `W` stored as `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = kaiming_bound(in_features);
        let w = Tensor::uniform([in_features, out_features], -bound, bound, rng);
        let weight = store.register(format!("{name}.weight"), ParamKind::Weight, w)?;
        let bias = if bias {
            Some(store.register(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros([out_features]),
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features
            + if self.bias.is_some() {
                self.out_features
            } else {
                0
            }
    }
}
