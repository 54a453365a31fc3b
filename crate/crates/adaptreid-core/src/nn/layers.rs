//! Layer building blocks. Each layer registers its parameters in a
//! `ParamStore` at construction and holds only the ids; forward passes run on
//! a `Tape`.

use crate::error::Result;
use crate::nn::init::{gaussian, WEIGHT_STD};
use crate::nn::params::{ParamGroup, ParamId, ParamStore};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Train/eval switch plus the RNG that feeds dropout.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub rng: &'r mut ChaCha8Rng,
}

impl<'r> ForwardCtx<'r> {
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx { training: true, rng }
    }

    pub fn eval(rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx { training: false, rng }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            group,
            gaussian(&[out_ch, in_ch, kernel, kernel], WEIGHT_STD, rng),
            true,
        );
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_ch]), true);
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            group,
            gaussian(&[in_ch, out_ch, kernel, kernel], WEIGHT_STD, rng),
            true,
        );
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_ch]), true);
        ConvTranspose2d { w, b, stride, pad, out_pad }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            group,
            gaussian(&[out_features, in_features], WEIGHT_STD, rng),
            true,
        );
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_features]), true);
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.linear(x, w, b)
    }
}

/// BatchNorm1d with affine parameters and running statistics. The running
/// buffers live in the store as non-trainable entries so checkpoints carry
/// them.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm1d {
    pub fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        features: usize,
    ) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::full(&[features], 1.0), true);
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[features]), true);
        let running_mean =
            store.add(format!("{name}.running_mean"), group, Tensor::zeros(&[features]), false);
        let running_var =
            store.add(format!("{name}.running_var"), group, Tensor::full(&[features], 1.0), false);
        BatchNorm1d { gamma, beta, running_mean, running_var }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let gamma = t.param(store, self.gamma);
        let beta = t.param(store, self.beta);
        if training {
            let (y, mean, var) = t.batch_norm_train(x, gamma, beta, BATCH_NORM_EPS)?;
            let n = t.value(x).dims2()?.0 as f64;
            // unbiased variance feeds the running buffer
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = store.value_mut(self.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * m;
            }
            let rv = store.value_mut(self.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * v * unbias;
            }
            Ok(y)
        } else {
            let rm = store.value(self.running_mean).data().to_vec();
            let rv = store.value(self.running_var).data().to_vec();
            t.batch_norm_eval(x, gamma, beta, &rm, &rv, BATCH_NORM_EPS)
        }
    }
}

/// conv -> instance norm -> relu, the repeated generator unit.
pub fn conv_in_relu(
    t: &mut Tape,
    store: &ParamStore,
    conv: &Conv2d,
    x: NodeId,
) -> Result<NodeId> {
    let y = conv.forward(t, store, x)?;
    let y = t.instance_norm(y, INSTANCE_NORM_EPS)?;
    Ok(t.relu(y))
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        channels: usize,
    ) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(store, rng, group, &format!("{name}.conv1"), channels, channels, 3, 1, 1),
            conv2: Conv2d::new(store, rng, group, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let y = conv_in_relu(t, store, &self.conv1, x)?;
        let y = self.conv2.forward(t, store, y)?;
        let y = t.instance_norm(y, INSTANCE_NORM_EPS)?;
        t.add(x, y)
    }
}
