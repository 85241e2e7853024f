use super::{join, BatchNorm2d, Conv2d, ConvTranspose2d, Ctx};
use crate::error::Result;
use crate::tensor::{ParamStore, Real, Var};

/// Spatial behaviour of a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Same,
    /// Stride-2 convolution, halves each extent.
    Down,
    /// Stride-2 transposed convolution, doubles each extent.
    Up,
}

#[derive(Clone, Debug)]
enum ConvLayer {
    Conv(Conv2d),
    Transposed(ConvTranspose2d),
}

impl ConvLayer {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            ConvLayer::Conv(c) => c.forward(ctx, x),
            ConvLayer::Transposed(c) => c.forward(ctx, x),
        }
    }
}

/// `relu(bn(conv(x))) + skip(x)`; `skip` is a projection iff the channel
/// count or the extent changes, otherwise the identity.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv: ConvLayer,
    bn: BatchNorm2d,
    skip: Option<ConvLayer>,
    pub cin: usize,
    pub cout: usize,
    pub sampling: Sampling,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        sampling: Sampling,
    ) -> Result<Self> {
        let conv_name = join(name, "conv");
        let skip_name = join(name, "skip");
        let (conv, skip) = match sampling {
            Sampling::Same | Sampling::Down => {
                let stride = if sampling == Sampling::Down { 2 } else { 1 };
                let conv = Conv2d::new(store, &conv_name, cin, cout, kernel, stride, false)?;
                let skip = if cin != cout || stride != 1 {
                    Some(ConvLayer::Conv(Conv2d::new(
                        store, &skip_name, cin, cout, 1, stride, false,
                    )?))
                } else {
                    None
                };
                (ConvLayer::Conv(conv), skip)
            }
            Sampling::Up => (
                ConvLayer::Transposed(ConvTranspose2d::new(store, &conv_name, cin, cout, kernel)?),
                Some(ConvLayer::Transposed(ConvTranspose2d::new(
                    store, &skip_name, cin, cout, 2,
                )?)),
            ),
        };
        Ok(Self {
            conv,
            bn: BatchNorm2d::new(store, &join(name, "bn"), cout)?,
            skip,
            cin,
            cout,
            sampling,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let s = match &self.skip {
            Some(skip) => skip.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(h, s)
    }
}

/// Three residual blocks in sequence. Downsampling happens in the last
/// member, upsampling in the first.
#[derive(Clone, Debug)]
pub struct CombinedResidualBlock {
    pub blocks: [ResidualBlock; 3],
}

impl CombinedResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        first_kernel: usize,
        sampling: Sampling,
    ) -> Result<Self> {
        let (s0, s2) = match sampling {
            Sampling::Same => (Sampling::Same, Sampling::Same),
            Sampling::Down => (Sampling::Same, Sampling::Down),
            Sampling::Up => (Sampling::Up, Sampling::Same),
        };
        Ok(Self {
            blocks: [
                ResidualBlock::new(store, &join(name, "0"), cin, cout, first_kernel, s0)?,
                ResidualBlock::new(store, &join(name, "1"), cout, cout, 3, Sampling::Same)?,
                ResidualBlock::new(store, &join(name, "2"), cout, cout, 3, s2)?,
            ],
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    }
}

/// Two 3×3 conv–BN–ReLU layers with an identity skip.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    layers: [(Conv2d, BatchNorm2d); 2],
}

impl ConvBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let layer = |store: &mut ParamStore<T>, i: usize| -> Result<(Conv2d, BatchNorm2d)> {
            Ok((
                Conv2d::new(store, &join(name, &format!("conv{i}")), channels, channels, 3, 1, false)?,
                BatchNorm2d::new(store, &join(name, &format!("bn{i}")), channels)?,
            ))
        };
        Ok(Self {
            layers: [layer(store, 0)?, layer(store, 1)?],
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in &self.layers {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.tape.relu(h)?;
        }
        ctx.tape.add(h, x)
    }
}
