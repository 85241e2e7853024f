use serde::{Deserialize, Serialize};

use super::{join, Ctx, LayerNorm, Linear, LinearInit};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    AdalnZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionKind {
    Naive,
    Tiled { tile: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layers: usize,
    pub conditioning: Conditioning,
    pub mlp_activation: Activation,
    pub layernorm_sqrt: bool,
    pub attention: AttentionKind,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.tokens, self.dim, self.heads, self.mlp_ratio, self.layers];
        if dims.contains(&0) {
            return Err(Error::Config(format!("transformer extents must be positive: {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if let AttentionKind::Tiled { tile: 0 } = self.attention {
            return Err(Error::Config("attention tile must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    kind: AttentionKind,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            qkv: Linear::new(store, &join(name, "qkv"), d, 3 * d, true, LinearInit::Xavier)?,
            proj: Linear::new(store, &join(name, "proj"), d, d, true, LinearInit::Xavier)?,
            heads: cfg.heads,
            kind: cfg.attention,
        })
    }

    /// `x[n, T, D]` → `[n, T, D]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let d = self.proj.dout;
        let qkv = self.qkv.forward(ctx, x)?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let s = ctx.tape.slice_last(qkv, i * d, d)?;
            *p = ctx.tape.split_heads(s, self.heads)?;
        }
        let [q, k, v] = parts;
        let o = match self.kind {
            AttentionKind::Naive => ctx.tape.attention_naive(q, k, v)?,
            AttentionKind::Tiled { tile } => ctx.tape.attention_tiled(q, k, v, tile)?,
        };
        let o = ctx.tape.merge_heads(o)?;
        self.proj.forward(ctx, o)
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Mlp {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.activation(h, self.act)?;
        self.fc2.forward(ctx, h)
    }
}

/// Pre-norm transformer layer, optionally conditioned through a
/// zero-initialized adaptive layer norm.
///
/// Conditioned form, with `(γ₁, β₁, α₁, γ₂, β₂, α₂)` regressed from
/// `x + s`:
///
/// ```text
/// x'  = x  + α₁ ⊙ Attn(LN(x)  ⊙ (1 + γ₁) + β₁)
/// x'' = x' + α₂ ⊙ MLP (LN(x') ⊙ (1 + γ₂) + β₂)
/// ```
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
    adaln: Option<Linear>,
    dim: usize,
}

impl TransformerLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let affine = cfg.conditioning == Conditioning::None;
        let hidden = d * cfg.mlp_ratio;
        Ok(Self {
            ln1: LayerNorm::new(store, &join(name, "ln1"), d, affine, cfg.layernorm_sqrt)?,
            attn: MultiHeadAttention::new(store, &join(name, "attn"), cfg)?,
            ln2: LayerNorm::new(store, &join(name, "ln2"), d, affine, cfg.layernorm_sqrt)?,
            mlp: Mlp {
                fc1: Linear::new(store, &join(name, "mlp.fc1"), d, hidden, true, LinearInit::Xavier)?,
                fc2: Linear::new(store, &join(name, "mlp.fc2"), hidden, d, true, LinearInit::Xavier)?,
                act: cfg.mlp_activation,
            },
            adaln: match cfg.conditioning {
                Conditioning::None => None,
                Conditioning::AdalnZero => Some(Linear::new(
                    store,
                    &join(name, "adaln"),
                    d,
                    6 * d,
                    true,
                    LinearInit::Zero,
                )?),
            },
            dim: d,
        })
    }

    pub fn is_conditioned(&self) -> bool {
        self.adaln.is_some()
    }

    /// Parameters of the modulation regression.
    pub fn adaln_params(&self) -> Option<(ParamId, ParamId)> {
        self.adaln.as_ref().map(|l| (l.weight, l.bias.unwrap()))
    }

    /// Regresses `(γ₁, β₁, α₁, γ₂, β₂, α₂)` from a conditioning token.
    pub fn adaln_regress<T: Real>(&self, ctx: &mut Ctx<'_, T>, c: Var) -> Result<[Var; 6]> {
        let lin = self
            .adaln
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("layer is not conditioned".into()))?;
        let m = lin.forward(ctx, c)?;
        let mut out = [m; 6];
        for (i, o) in out.iter_mut().enumerate() {
            *o = ctx.tape.slice_last(m, i * self.dim, self.dim)?;
        }
        Ok(out)
    }

    /// `x[n, T, D]`, `seg[n, T, D]` (conditioned layers only).
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, seg: Option<Var>) -> Result<Var> {
        if self.adaln.is_none() {
            let h = self.ln1.forward(ctx, x)?;
            let h = self.attn.forward(ctx, h)?;
            let x = ctx.tape.add(x, h)?;
            let h = self.ln2.forward(ctx, x)?;
            let h = self.mlp.forward(ctx, h)?;
            return ctx.tape.add(x, h);
        }
        let seg = seg.ok_or_else(|| Error::InvalidArgument("conditioned layer needs segmentation tokens".into()))?;
        if ctx.tape.shape(seg) != ctx.tape.shape(x) {
            return Err(Error::ShapeMismatch {
                op: "transformer_layer_adaln",
                lhs: ctx.tape.shape(x).to_vec(),
                rhs: ctx.tape.shape(seg).to_vec(),
            });
        }
        let c = ctx.tape.add(x, seg)?;
        let [g1, b1, a1, g2, b2, a2] = self.adaln_regress(ctx, c)?;
        let one = ctx.tape.constant(Tensor::scalar(T::one()));

        let h = self.ln1.forward(ctx, x)?;
        let h = modulate(ctx, h, g1, b1, one)?;
        let h = self.attn.forward(ctx, h)?;
        let h = ctx.tape.mul(a1, h)?;
        let x = ctx.tape.add(x, h)?;

        let h = self.ln2.forward(ctx, x)?;
        let h = modulate(ctx, h, g2, b2, one)?;
        let h = self.mlp.forward(ctx, h)?;
        let h = ctx.tape.mul(a2, h)?;
        ctx.tape.add(x, h)
    }
}

fn modulate<T: Real>(ctx: &mut Ctx<'_, T>, h: Var, gamma: Var, beta: Var, one: Var) -> Result<Var> {
    let scale = ctx.tape.add(gamma, one)?;
    let h = ctx.tape.mul(h, scale)?;
    ctx.tape.add(h, beta)
}
