//! Parameterized building blocks shared by the backbone, neck and head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

#[allow(unused_imports)]
use num_traits::Float as _;

use crate::error::Result;
use crate::numerics::{truncated_normal, Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

pub const LINEAR_INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(&format!("{name}.weight"), truncated_normal(rng, &[fan_in, fan_out], LINEAR_INIT_STD), ParamKind::Weight)?;
        let bias = if bias { Some(store.register(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamKind::NoDecay)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(&format!("{name}.gamma"), Tensor::full(&[width], T::one()), ParamKind::NoDecay)?,
            beta: store.register(&format!("{name}.beta"), Tensor::zeros(&[width]), ParamKind::NoDecay)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::from_f64_lossy(LN_EPS))
    }
}

/// He-scaled truncated normal, suited to convolutions followed by ReLU.
fn conv_init<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    truncated_normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
}

impl Conv2d {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_ch;
        let weight = store.register(&format!("{name}.weight"), conv_init(rng, &[fan_in, out_ch], fan_in), ParamKind::Weight)?;
        let bias = if bias { Some(store.register(&format!("{name}.bias"), Tensor::zeros(&[out_ch]), ParamKind::NoDecay)?) } else { None };
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.kernel)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv2d {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, ch: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let fan_in = kernel * kernel;
        Ok(Self {
            weight: store.register(&format!("{name}.weight"), conv_init(rng, &[fan_in, ch], fan_in), ParamKind::Weight)?,
            bias: store.register(&format!("{name}.bias"), Tensor::zeros(&[ch]), ParamKind::NoDecay)?,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.depthwise_conv2d(x, w, Some(b), self.kernel)
    }
}

/// Whether batch normalization normalizes with batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics observed during a training forward pass, to be folded
/// into the running averages once the step is taken.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// `running ← (1 − m)·running + m·batch` for every recorded update.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m = T::from_f64_lossy(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(&format!("{name}.gamma"), Tensor::full(&[width], T::one()), ParamKind::NoDecay)?,
            beta: store.register(&format!("{name}.beta"), Tensor::zeros(&[width]), ParamKind::NoDecay)?,
            running_mean: store.register(&format!("{name}.running_mean"), Tensor::zeros(&[width]), ParamKind::Buffer)?,
            running_var: store.register(&format!("{name}.running_var"), Tensor::full(&[width], T::one()), ParamKind::Buffer)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let eps = T::from_f64_lossy(BN_EPS);
        match mode {
            BnMode::Train => {
                let (y, mean, var) = g.batch_norm(x, gamma, beta, eps)?;
                updates.push(BnUpdate { running_mean: self.running_mean, running_var: self.running_var, mean, var });
                Ok(y)
            }
            BnMode::Eval => {
                let mean = store.get(self.running_mean).data();
                let var = store.get(self.running_var).data();
                g.batch_norm_fixed(x, gamma, beta, mean, var, eps)
            }
        }
    }
}
