use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchSpec, AttentionKind, PoolSpec};
use super::block::{build_block, Block};
use super::cost;
use crate::error::{Error, Result};
use crate::nn::{AttentionRecord, BatchNorm, Conv2d, Linear, Mode, Session};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor, Var};

/// Layers of a network, without the parameter values they read.
#[derive(Clone, Debug)]
pub struct Body {
    pub stem_conv: Conv2d,
    pub stem_bn: BatchNorm,
    pub stem_pool: Option<PoolSpec>,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

impl Body {
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.stem_conv.forward(s, x)?;
        h = self.stem_bn.forward(s, h)?;
        h = s.tape.relu(h);
        if let Some(p) = self.stem_pool {
            h = s.tape.max_pool2d(h, p.kernel, p.stride, p.padding)?;
        }
        for block in &self.blocks {
            h = block.forward(s, h)?;
        }
        let pooled = s.tape.global_avg_pool(h)?;
        self.head.forward(s, pooled)
    }
}

/// A built residual network together with its parameter registry.
#[derive(Clone, Debug)]
pub struct Network<T> {
    arch: ArchSpec,
    attention: AttentionKind,
    params: ParamStore<T>,
    body: Body,
}

/// Builds `arch` with every block's attention set to `attention`.
///
/// Conv and FC weights are Kaiming-uniform from `seed`; BN starts at
/// `gamma = 1, beta = 0`; all biases start at zero.
pub fn build_network<T: Float>(
    arch: &ArchSpec,
    attention: AttentionKind,
    seed: u64,
) -> Result<Network<T>> {
    let arch = arch.clone().with_attention(attention);
    let specs = arch.expand()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let [cin, _, _] = arch.input_shape;
    let stem = &arch.stem;
    let stem_conv = Conv2d::new(
        &mut params,
        "stem.conv",
        cin,
        stem.out_ch,
        stem.kernel,
        stem.stride,
        stem.padding,
        &mut rng,
    )?;
    let stem_bn = BatchNorm::new(&mut params, "stem.bn", stem.out_ch)?;
    let mut blocks = Vec::with_capacity(specs.len());
    let mut per_stage = Vec::new();
    for (si, stage) in arch.stages.iter().enumerate() {
        for b in 0..stage.blocks {
            per_stage.push(format!("stage{}.block{}", si + 1, b));
        }
    }
    for (i, (spec, name)) in specs.iter().zip(&per_stage).enumerate() {
        blocks.push(build_block(&mut params, name, i, spec, &mut rng)?);
    }
    let head = Linear::new(
        &mut params,
        "head",
        arch.feature_channels(),
        arch.num_classes,
        true,
        &mut rng,
    )?;
    Ok(Network {
        body: Body {
            stem_conv,
            stem_bn,
            stem_pool: stem.max_pool,
            blocks,
            head,
        },
        arch,
        attention,
        params,
    })
}

impl<T: Float> Network<T> {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn attention(&self) -> AttentionKind {
        self.attention
    }

    pub fn body(&self) -> &Body {
        &self.body
    }

    pub fn blocks(&self) -> &[Block] {
        &self.body.blocks
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of blocks carrying an attention layer.
    pub fn attention_blocks(&self) -> usize {
        self.body
            .blocks
            .iter()
            .filter(|b| b.has_attention())
            .count()
    }

    /// Trainable scalars in the registry.
    pub fn count_params(&self) -> usize {
        self.params.trainable_count()
    }

    /// Multiply-accumulate count of one forward pass at `input_shape` (`B×C×H×W`).
    pub fn count_flops(&self, input_shape: [usize; 4]) -> Result<u64> {
        let [b, c, h, w] = input_shape;
        let mut arch = self.arch.clone();
        arch.input_shape = [c, h, w];
        Ok(cost::arch_cost(&arch)?.flops * b as u64)
    }

    /// A forward context over this network's parameters.
    pub fn session(&mut self, mode: Mode) -> (&Body, Session<'_, T>) {
        let Network { body, params, .. } = self;
        (&*body, Session::new(params, mode))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.arch.input_shape {
            return Err(Error::dim(
                "forward",
                format!("input {s:?} does not match B×{:?}", self.arch.input_shape),
            ));
        }
        Ok(())
    }

    /// Logits `B×num_classes`. Train mode uses and updates batch statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (body, mut s) = self.session(mode);
        let xv = s.input(x.clone());
        let logits = body.forward(&mut s, xv)?;
        Ok(s.value(logits).clone())
    }

    /// Eval-mode logits plus the attention records of every attention block.
    pub fn forward_captured(
        &mut self,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<AttentionRecord<T>>)> {
        self.check_input(x)?;
        let (body, s) = self.session(Mode::Eval);
        let mut s = s.capturing();
        let xv = s.input(x.clone());
        let logits = body.forward(&mut s, xv)?;
        let out = s.value(logits).clone();
        Ok((out, s.take_records()))
    }

    /// One train-mode pass: cross-entropy loss, gradients added to the registry.
    pub fn loss_and_grad(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<T> {
        self.check_input(x)?;
        let (body, mut s) = self.session(Mode::Train);
        let xv = s.input(x.clone());
        let logits = body.forward(&mut s, xv)?;
        let loss = s.tape.cross_entropy(logits, labels)?;
        let value = s.value(loss).item();
        s.backward(loss)?;
        Ok(value)
    }
}
