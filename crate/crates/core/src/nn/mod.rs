//! Network building blocks expressed as tape ops over a [`ParamStore`].
//!
//! A block registers its parameters once at construction and keeps only
//! [`ParamId`]s. Forward passes go through a [`Ctx`], which binds each
//! parameter to the tape at most once per pass so that blocks sharing a
//! parameter accumulate into a single gradient.

mod residual;
mod transformer;
mod vit;

pub use residual::{CombinedResidualBlock, ConvBlock, ResidualBlock, Sampling};
pub use transformer::{AttentionKind, Conditioning, MultiHeadAttention, TransformerConfig, TransformerLayer};
pub use vit::{VitBlock, VitConfig, VitMode};

use std::collections::HashMap;

use crate::error::Result;
use crate::tensor::{BatchNormState, Init, NormMode, ParamId, ParamKind, ParamStore, Real, Tape, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

/// Forward-pass context.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a mut ParamStore<T>,
    pub train: bool,
    bound: HashMap<ParamId, Var>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a mut ParamStore<T>, train: bool) -> Self {
        Self {
            tape,
            params,
            train,
            bound: HashMap::new(),
        }
    }

    /// Tape variable for a parameter, bound on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.params.bind(self.tape, id, self.train);
        self.bound.insert(id, v);
        v
    }
}

/// Joins a name prefix and a component.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearInit {
    Xavier,
    Zero,
}

/// `y = x·W + b` over the last extent; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: LinearInit,
    ) -> Result<Self> {
        let w_init = match init {
            LinearInit::Xavier => Init::XavierUniform {
                fan_in: din,
                fan_out: dout,
            },
            LinearInit::Zero => Init::Zeros,
        };
        let weight = store.add(&join(name, "w"), &[din, dout], w_init, ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.add(&join(name, "b"), &[dout], Init::Zeros, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            din,
            dout,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(
            &join(name, "w"),
            &[cout, cin, kernel, kernel],
            Init::KaimingUniform {
                fan_in: cin * kernel * kernel,
            },
            ParamKind::Trainable,
        )?;
        let bias = if bias {
            Some(store.add(&join(name, "b"), &[cout], Init::Zeros, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let y = ctx.tape.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stride-2 transposed convolution; weight stored `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        let weight = store.add(
            &join(name, "w"),
            &[cin, cout, kernel, kernel],
            Init::KaimingUniform {
                fan_in: cout * kernel * kernel,
            },
            ParamKind::Trainable,
        )?;
        Ok(Self { weight })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        ctx.tape.conv_transpose2d(x, w, 2)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let c = [channels];
        Ok(Self {
            gamma: store.add(&join(name, "gamma"), &c, Init::Ones, ParamKind::Trainable)?,
            beta: store.add(&join(name, "beta"), &c, Init::Zeros, ParamKind::Trainable)?,
            running_mean: store.add(&join(name, "running_mean"), &c, Init::Zeros, ParamKind::Buffer)?,
            running_var: store.add(&join(name, "running_var"), &c, Init::Ones, ParamKind::Buffer)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        let mode = if ctx.train { NormMode::Train } else { NormMode::Eval };
        let (running_mean, running_var) = ctx.params.pair_mut(self.running_mean, self.running_var);
        let state = BatchNormState {
            running_mean,
            running_var,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        };
        ctx.tape.batch_norm2d(x, g, b, state, mode)
    }
}

/// Layer norm over the last extent with optional learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub sqrt: bool,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, affine: bool, sqrt: bool) -> Result<Self> {
        let (gamma, beta) = if affine {
            (
                Some(store.add(&join(name, "gamma"), &[dim], Init::Ones, ParamKind::Trainable)?),
                Some(store.add(&join(name, "beta"), &[dim], Init::Zeros, ParamKind::Trainable)?),
            )
        } else {
            (None, None)
        };
        Ok(Self { gamma, beta, sqrt })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = self.gamma.map(|id| ctx.p(id));
        let b = self.beta.map(|id| ctx.p(id));
        ctx.tape.layer_norm(x, g, b, LN_EPS, self.sqrt)
    }
}
