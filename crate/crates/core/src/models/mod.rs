//! Encoder, bottleneck and decoder assembly for the segmentation, latent
//! and synthesis networks.
//!
//! All three networks share one macro-structure:
//!
//! ```text
//! in ─ CRB(in→b, 7×7 entry) ─ CRB(b→2b, ↓2) ─ CRB(2b→B, ↓2)
//!    ─ Conv ─ ViT ─ Conv ─ ViT ─ Conv              (latent tap)
//!    ─ CRB(B→2b, ↑2) ─ CRB(2b→b, ↑2) ─ CRB(b→b) ─ conv7×7 ─ tanh
//! ```
//!
//! The two ViT stages reuse one set of parameters.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointParam, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    AttentionKind, CombinedResidualBlock, Conditioning, Conv2d, ConvBlock, Ctx, Sampling, TransformerConfig, VitBlock,
    VitConfig, VitMode,
};
use crate::tensor::{Activation, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub bottleneck_channels: usize,
    /// Channels of the conditioning latent map.
    pub latent_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub mlp_activation: Activation,
    pub layernorm_sqrt: bool,
    pub attention: AttentionKind,
    pub conditioning: Conditioning,
}

impl ModelConfig {
    /// Full-size configuration: 120×120 input, 256-channel 30×30
    /// bottleneck.
    pub fn full(in_channels: usize, conditioning: Conditioning) -> Self {
        Self {
            in_channels,
            image_size: 120,
            base_channels: 64,
            bottleneck_channels: 256,
            latent_channels: 256,
            embed_dim: 256,
            heads: 8,
            layers: 4,
            mlp_ratio: 4,
            patch: 1,
            mlp_activation: Activation::Gelu,
            layernorm_sqrt: false,
            attention: AttentionKind::Tiled { tile: 64 },
            conditioning,
        }
    }

    /// Reduced widths that train on one CPU core.
    pub fn desk(in_channels: usize, conditioning: Conditioning) -> Self {
        Self {
            in_channels,
            image_size: 64,
            base_channels: 8,
            bottleneck_channels: 32,
            latent_channels: 32,
            embed_dim: 32,
            heads: 4,
            layers: 2,
            mlp_ratio: 2,
            patch: 2,
            mlp_activation: Activation::Gelu,
            layernorm_sqrt: true,
            attention: AttentionKind::Tiled { tile: 64 },
            conditioning,
        }
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.in_channels) {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 2, got {}",
                self.in_channels
            )));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.base_channels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.patch == 0 || !self.bottleneck_size().is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "bottleneck {0}x{0} not divisible by patch {1}",
                self.bottleneck_size(),
                self.patch
            )));
        }
        if self.conditioning == Conditioning::AdalnZero && self.latent_channels == 0 {
            return Err(Error::Config("conditioned model needs latent_channels > 0".into()));
        }
        self.transformer().validate()
    }

    fn transformer(&self) -> TransformerConfig {
        let g = self.bottleneck_size() / self.patch.max(1);
        TransformerConfig {
            tokens: g * g,
            dim: self.embed_dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            layers: self.layers,
            conditioning: self.conditioning,
            mlp_activation: self.mlp_activation,
            layernorm_sqrt: self.layernorm_sqrt,
            attention: self.attention,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Skip both ViT stages (conv-only path).
    pub bypass_vit: bool,
}

#[derive(Clone, Debug)]
struct Arch {
    encoder: [CombinedResidualBlock; 3],
    bottleneck: [ConvBlock; 3],
    vit: VitBlock,
    decoder: [CombinedResidualBlock; 3],
    head: Conv2d,
}

/// A built network plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    arch: Arch,
}

/// Unconditioned network (segmentation or baseline synthesis).
pub fn build_mprvit<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    if cfg.conditioning != Conditioning::None {
        return Err(Error::Config("MPR-ViT must be unconditioned".into()));
    }
    Model::build(cfg, seed)
}

/// Network conditioned on a latent segmentation map.
pub fn build_tavit<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    if cfg.conditioning != Conditioning::AdalnZero {
        return Err(Error::Config("TA-ViT needs adaLN-zero conditioning".into()));
    }
    Model::build(cfg, seed)
}

/// Identity-trained single-channel MPR-ViT whose bottleneck serves as the
/// latent representation.
pub fn build_latent_encoder<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    if cfg.in_channels != 1 {
        return Err(Error::Config("latent encoder takes one input channel".into()));
    }
    build_mprvit(cfg, seed)
}

impl<T: Real> Model<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let s = &mut store;
        let (b, bn) = (cfg.base_channels, cfg.bottleneck_channels);
        let encoder = [
            CombinedResidualBlock::new(s, "enc0", cfg.in_channels, b, 7, Sampling::Same)?,
            CombinedResidualBlock::new(s, "enc1", b, 2 * b, 3, Sampling::Down)?,
            CombinedResidualBlock::new(s, "enc2", 2 * b, bn, 3, Sampling::Down)?,
        ];
        let bottleneck = [
            ConvBlock::new(s, "bott.conv0", bn)?,
            ConvBlock::new(s, "bott.conv1", bn)?,
            ConvBlock::new(s, "bott.conv2", bn)?,
        ];
        let mode = match cfg.conditioning {
            Conditioning::None => VitMode::Mpr,
            Conditioning::AdalnZero => VitMode::Tavit {
                latent_channels: cfg.latent_channels,
            },
        };
        let vit = VitBlock::new(
            s,
            "bott.vit",
            VitConfig {
                channels: bn,
                height: cfg.bottleneck_size(),
                width: cfg.bottleneck_size(),
                patch: cfg.patch,
                mode,
                transformer: cfg.transformer(),
            },
        )?;
        let decoder = [
            CombinedResidualBlock::new(s, "dec0", bn, 2 * b, 3, Sampling::Up)?,
            CombinedResidualBlock::new(s, "dec1", 2 * b, b, 3, Sampling::Up)?,
            CombinedResidualBlock::new(s, "dec2", b, b, 3, Sampling::Same)?,
        ];
        let head = Conv2d::new(s, "head", b, 1, 7, 1, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            arch: Arch {
                encoder,
                bottleneck,
                vit,
                decoder,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn is_conditioned(&self) -> bool {
        self.cfg.conditioning == Conditioning::AdalnZero
    }

    pub fn vit(&self) -> &VitBlock {
        &self.arch.vit
    }

    /// Trainable scalars inside the ViT stages.
    pub fn transformer_param_count(&self) -> usize {
        self.params.num_trainable_with_prefix("bott.vit.")
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    fn check_input(&self, shape: &[usize], channels: usize, size: usize, what: &'static str) -> Result<()> {
        if shape.len() != 4 || shape[1] != channels || shape[2] != size || shape[3] != size {
            return Err(Error::ShapeMismatch {
                op: what,
                lhs: vec![shape.first().copied().unwrap_or(0), channels, size, size],
                rhs: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Full forward pass on the tape; output in `[-1, 1]`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        seg_latent: Option<Var>,
        train: bool,
        opts: ForwardOptions,
    ) -> Result<Var> {
        self.check_input(tape.shape(x), self.cfg.in_channels, self.cfg.image_size, "model input")?;
        if let Some(s) = seg_latent {
            let n = tape.shape(x)[0];
            let b = self.cfg.bottleneck_size();
            let expect = [n, self.cfg.latent_channels, b, b];
            if tape.shape(s) != expect {
                return Err(Error::ShapeMismatch {
                    op: "seg latent",
                    lhs: expect.to_vec(),
                    rhs: tape.shape(s).to_vec(),
                });
            }
        }
        let arch = &self.arch;
        let mut ctx = Ctx::new(tape, &mut self.params, train);
        let this = Model::<T>::view(&self.cfg, arch);
        let mut h = this.encode(&mut ctx, x, seg_latent, opts)?;
        for blk in &arch.decoder {
            h = blk.forward(&mut ctx, h)?;
        }
        h = arch.head.forward(&mut ctx, h)?;
        ctx.tape.tanh(h)
    }

    fn view<'m>(cfg: &'m ModelConfig, arch: &'m Arch) -> ModelView<'m> {
        ModelView { cfg, arch }
    }

    /// Eval-mode prediction.
    pub fn predict(&mut self, x: &Tensor<T>, seg_latent: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.predict_with(x, seg_latent, ForwardOptions::default())
    }

    pub fn predict_with(
        &mut self,
        x: &Tensor<T>,
        seg_latent: Option<&Tensor<T>>,
        opts: ForwardOptions,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let sv = seg_latent.map(|s| tape.constant(s.clone()));
        let out = self.forward(&mut tape, xv, sv, false, opts)?;
        Ok(tape.value(out).clone())
    }

    /// Bottleneck activations for a `[B, 1, S, S]` encoded segmentation
    /// image; the decoder is not run.
    pub fn extract_latent(&mut self, seg_image: &Tensor<T>) -> Result<Tensor<T>> {
        if self.is_conditioned() {
            return Err(Error::InvalidArgument(
                "latent extraction needs an unconditioned encoder".into(),
            ));
        }
        self.check_input(
            seg_image.shape(),
            self.cfg.in_channels,
            self.cfg.image_size,
            "latent encoder input",
        )?;
        let mut tape = Tape::new();
        let x = tape.constant(seg_image.clone());
        let arch = &self.arch;
        let mut ctx = Ctx::new(&mut tape, &mut self.params, false);
        let out = Model::<T>::view(&self.cfg, arch).encode(&mut ctx, x, None, ForwardOptions::default())?;
        Ok(tape.value(out).clone())
    }
}

/// Borrow of the immutable parts of a model, so that forward passes can
/// hold `&mut` to the parameters at the same time.
struct ModelView<'m> {
    cfg: &'m ModelConfig,
    arch: &'m Arch,
}

impl ModelView<'_> {
    fn encode<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        seg_latent: Option<Var>,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let a = self.arch;
        let mut h = x;
        for blk in &a.encoder {
            h = blk.forward(ctx, h)?;
        }
        let conditioned = self.cfg.conditioning == Conditioning::AdalnZero;
        let seg_tokens = match (conditioned, seg_latent) {
            (true, Some(s)) => Some(a.vit.embed_seg(ctx, s)?),
            (true, None) => {
                return Err(Error::InvalidArgument(
                    "conditioned model requires a latent segmentation map".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "unconditioned model does not take a latent segmentation map".into(),
                ))
            }
            (false, None) => None,
        };
        h = a.bottleneck[0].forward(ctx, h)?;
        if !opts.bypass_vit {
            h = a.vit.forward(ctx, h, seg_tokens)?;
        }
        h = a.bottleneck[1].forward(ctx, h)?;
        if !opts.bypass_vit {
            h = a.vit.forward(ctx, h, seg_tokens)?;
        }
        a.bottleneck[2].forward(ctx, h)
    }
}
