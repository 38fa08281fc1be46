use serde::{Deserialize, Serialize};

use super::layers::{ConvBn, ForwardCtx, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Element, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand to `out_channels` (4x the inner width).
    Bottleneck,
    /// 1x1 expand, 3x3 depthwise, 1x1 project.
    MbConv,
    /// 3x3 expand, 1x1 project.
    FusedMbConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Expansion ratio for the MBConv kinds; ignored otherwise.
    pub expansion: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec { kind, in_channels, out_channels, stride, dilation: 1, expansion: 1 }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_expansion(mut self, expansion: usize) -> Self {
        self.expansion = expansion;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid block {self:?}: {m}")));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.stride == 0 || self.dilation == 0 {
            return bad("stride and dilation must be positive");
        }
        if self.kind == BlockKind::Bottleneck && !self.out_channels.is_multiple_of(4) {
            return bad("bottleneck output channels must be a multiple of 4");
        }
        if matches!(self.kind, BlockKind::MbConv | BlockKind::FusedMbConv) && self.expansion == 0 {
            return bad("expansion ratio must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Shortcut {
    Identity,
    Projection(ConvBn),
    None,
}

/// A residual block of any [`BlockKind`].
#[derive(Debug, Clone)]
pub struct Block {
    spec: BlockSpec,
    layers: Vec<ConvBn>,
    shortcut: Shortcut,
}

impl Block {
    pub(crate) fn build<T: Element>(b: &mut ParamBuilder<'_, T>, spec: BlockSpec) -> Result<Self> {
        spec.validate()?;
        let BlockSpec { kind, in_channels: cin, out_channels: cout, stride, dilation: d, expansion } = spec;
        let k3 = ConvParams::new(stride, d, d, 1);
        let k1 = ConvParams::default();
        let layers = match kind {
            BlockKind::Basic => vec![
                b.conv_bn("conv1", cin, cout, 3, k3)?,
                b.conv_bn("conv2", cout, cout, 3, ConvParams::new(1, d, d, 1))?,
            ],
            BlockKind::Bottleneck => {
                let mid = cout / 4;
                vec![
                    b.conv_bn("conv1", cin, mid, 1, k1)?,
                    b.conv_bn("conv2", mid, mid, 3, k3)?,
                    b.conv_bn("conv3", mid, cout, 1, k1)?,
                ]
            }
            BlockKind::MbConv => {
                let mid = cin * expansion;
                vec![
                    b.conv_bn("expand", cin, mid, 1, k1)?,
                    b.conv_bn("depthwise", mid, mid, 3, ConvParams::new(stride, d, d, mid))?,
                    b.conv_bn("project", mid, cout, 1, k1)?,
                ]
            }
            BlockKind::FusedMbConv => {
                let mid = cin * expansion;
                vec![b.conv_bn("expand", cin, mid, 3, k3)?, b.conv_bn("project", mid, cout, 1, k1)?]
            }
        };
        let same_shape = stride == 1 && cin == cout;
        let shortcut = match kind {
            BlockKind::Basic | BlockKind::Bottleneck if same_shape => Shortcut::Identity,
            BlockKind::Basic | BlockKind::Bottleneck => {
                Shortcut::Projection(b.conv_bn("shortcut", cin, cout, 1, ConvParams::new(stride, 0, 1, 1))?)
            }
            _ if same_shape => Shortcut::Identity,
            _ => Shortcut::None,
        };
        Ok(Block { spec, layers, shortcut })
    }

    /// Standalone block with its own parameter store, He-initialized from `seed`.
    pub fn new<T: Element>(spec: BlockSpec, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let block = Block::build(&mut ParamBuilder::new(&mut store, seed), spec)?;
        Ok((block, store))
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn has_projection(&self) -> bool {
        matches!(self.shortcut, Shortcut::Projection(_))
    }

    pub fn has_residual(&self) -> bool {
        !matches!(self.shortcut, Shortcut::None)
    }

    /// Trainable parameter ids of the block, shortcut included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(ConvBn::param_ids).collect();
        if let Shortcut::Projection(p) = &self.shortcut {
            ids.extend(p.param_ids());
        }
        ids
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: &Var<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var<T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::shape(
                "block",
                format!("expected [N, {}, H, W] input, got {shape:?}", self.spec.in_channels),
            ));
        }
        let last = self.layers.len() - 1;
        let mut y = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.forward(store, tape, &y, ctx, i < last)?;
        }
        let mbconv = matches!(self.spec.kind, BlockKind::MbConv | BlockKind::FusedMbConv);
        let sum = match &self.shortcut {
            Shortcut::None => return Ok(y),
            Shortcut::Identity => tape.add(&y, x)?,
            Shortcut::Projection(p) => {
                let s = p.forward(store, tape, x, ctx, false)?;
                tape.add(&y, &s)?
            }
        };
        if mbconv {
            Ok(sum)
        } else {
            tape.relu(&sum)
        }
    }
}
