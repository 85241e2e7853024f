use super::{
    join, Conditioning, Ctx, Linear, LinearInit, ResidualBlock, Sampling, TransformerConfig, TransformerLayer,
};
use crate::error::{Error, Result};
use crate::tensor::{Init, ParamId, ParamKind, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VitMode {
    /// 3×3 convolution blocks before and after the transformer.
    Mpr,
    /// Conditioned on a latent segmentation map with `latent_channels`.
    Tavit { latent_channels: usize },
}

#[derive(Clone, Debug)]
pub struct VitConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub mode: VitMode,
    pub transformer: TransformerConfig,
}

/// Patch embedding, transformer layers and de-patchify projection around
/// a residual skip. The de-patchify projection starts at zero so a fresh
/// block is the identity.
#[derive(Clone, Debug)]
pub struct VitBlock {
    cfg: VitConfig,
    embed: Linear,
    pos: ParamId,
    seg_embed: Option<Linear>,
    layers: Vec<TransformerLayer>,
    unembed: Linear,
    pre: Option<ResidualBlock>,
    post: Option<ResidualBlock>,
}

impl VitBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: VitConfig) -> Result<Self> {
        let p = cfg.patch;
        if p == 0 || !cfg.height.is_multiple_of(p) || !cfg.width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "{}x{} features not divisible into {p}x{p} patches",
                cfg.height, cfg.width
            )));
        }
        let tokens = (cfg.height / p) * (cfg.width / p);
        let mut tcfg = cfg.transformer.clone();
        tcfg.tokens = tokens;
        tcfg.conditioning = match cfg.mode {
            VitMode::Mpr => Conditioning::None,
            VitMode::Tavit { .. } => Conditioning::AdalnZero,
        };
        tcfg.validate()?;
        let d = tcfg.dim;
        let feat = cfg.channels * p * p;
        let embed = Linear::new(store, &join(name, "embed"), feat, d, true, LinearInit::Xavier)?;
        let pos = store.add(
            &join(name, "pos"),
            &[tokens, d],
            Init::Uniform { bound: 0.02 },
            ParamKind::Trainable,
        )?;
        let seg_embed = match cfg.mode {
            VitMode::Tavit { latent_channels } => Some(Linear::new(
                store,
                &join(name, "seg_embed"),
                latent_channels * p * p,
                d,
                true,
                LinearInit::Xavier,
            )?),
            VitMode::Mpr => None,
        };
        let layers = (0..tcfg.layers)
            .map(|i| TransformerLayer::new(store, &join(name, &format!("layer{i}")), &tcfg))
            .collect::<Result<Vec<_>>>()?;
        let unembed = Linear::new(store, &join(name, "unembed"), d, feat, true, LinearInit::Zero)?;
        let (pre, post) = match cfg.mode {
            VitMode::Mpr => {
                let c = cfg.channels;
                (
                    Some(ResidualBlock::new(store, &join(name, "pre"), c, c, 3, Sampling::Same)?),
                    Some(ResidualBlock::new(store, &join(name, "post"), c, c, 3, Sampling::Same)?),
                )
            }
            VitMode::Tavit { .. } => (None, None),
        };
        let mut cfg = cfg;
        cfg.transformer = tcfg;
        Ok(Self {
            cfg,
            embed,
            pos,
            seg_embed,
            layers,
            unembed,
            pre,
            post,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[TransformerLayer] {
        &self.layers
    }

    /// Embeds a latent map into segmentation tokens `[n, T, D]`.
    pub fn embed_seg<T: Real>(&self, ctx: &mut Ctx<'_, T>, seg_latent: Var) -> Result<Var> {
        let se = self
            .seg_embed
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("block is not conditioned".into()))?;
        let VitMode::Tavit { latent_channels } = self.cfg.mode else {
            unreachable!()
        };
        let s = ctx.tape.shape(seg_latent).to_vec();
        let x_n = s.first().copied().unwrap_or(0);
        if s.len() != 4 || s[1] != latent_channels || s[2] != self.cfg.height || s[3] != self.cfg.width {
            return Err(Error::ShapeMismatch {
                op: "vit_block seg latent",
                lhs: vec![x_n, latent_channels, self.cfg.height, self.cfg.width],
                rhs: s,
            });
        }
        let tok = ctx.tape.patchify(seg_latent, self.cfg.patch)?;
        se.forward(ctx, tok)
    }

    /// `x[n, c, h, w]` → same shape. `seg_tokens` from [`Self::embed_seg`]
    /// are required in the conditioned mode.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, seg_tokens: Option<Var>) -> Result<Var> {
        if self.seg_embed.is_some() && seg_tokens.is_none() {
            return Err(Error::InvalidArgument(
                "conditioned ViT block requires a segmentation latent".into(),
            ));
        }
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.channels || s[2] != self.cfg.height || s[3] != self.cfg.width {
            return Err(Error::ShapeMismatch {
                op: "vit_block",
                lhs: vec![
                    s.first().copied().unwrap_or(0),
                    self.cfg.channels,
                    self.cfg.height,
                    self.cfg.width,
                ],
                rhs: s,
            });
        }
        let h = match &self.pre {
            Some(b) => b.forward(ctx, x)?,
            None => x,
        };
        let tok = ctx.tape.patchify(h, self.cfg.patch)?;
        let tok = self.embed.forward(ctx, tok)?;
        let pos = ctx.p(self.pos);
        let mut tok = ctx.tape.add_suffix(tok, pos)?;
        for layer in &self.layers {
            tok = layer.forward(ctx, tok, seg_tokens)?;
        }
        let feat = self.unembed.forward(ctx, tok)?;
        let y = ctx
            .tape
            .unpatchify(feat, self.cfg.patch, self.cfg.channels, self.cfg.height, self.cfg.width)?;
        let y = match &self.post {
            Some(b) => b.forward(ctx, y)?,
            None => y,
        };
        ctx.tape.add(x, y)
    }
}
