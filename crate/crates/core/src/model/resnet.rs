use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::blocks::{Block, BlockKind, BlockSpec};
use super::layers::{ConvBn, ForwardCtx, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Element, ParamStore, PoolParams, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Resnet18,
    Resnet34,
    Resnet50,
    Resnet101,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] =
        [EncoderKind::Resnet18, EncoderKind::Resnet34, EncoderKind::Resnet50, EncoderKind::Resnet101];

    pub fn from_depth(depth: usize) -> Result<Self> {
        match depth {
            18 => Ok(EncoderKind::Resnet18),
            34 => Ok(EncoderKind::Resnet34),
            50 => Ok(EncoderKind::Resnet50),
            101 => Ok(EncoderKind::Resnet101),
            d => Err(Error::Config(format!("unsupported ResNet depth {d} (expected 18, 34, 50 or 101)"))),
        }
    }

    pub fn depth(self) -> usize {
        match self {
            EncoderKind::Resnet18 => 18,
            EncoderKind::Resnet34 => 34,
            EncoderKind::Resnet50 => 50,
            EncoderKind::Resnet101 => 101,
        }
    }

    pub fn stage_blocks(self) -> [usize; 4] {
        match self {
            EncoderKind::Resnet18 => [2, 2, 2, 2],
            EncoderKind::Resnet34 | EncoderKind::Resnet50 => [3, 4, 6, 3],
            EncoderKind::Resnet101 => [3, 4, 23, 3],
        }
    }

    /// Batch size used for the published pretrained runs of this depth.
    pub fn reference_batch_size(self) -> usize {
        match self {
            EncoderKind::Resnet18 => 32,
            EncoderKind::Resnet34 => 24,
            _ => 8,
        }
    }

    pub fn block_kind(self) -> BlockKind {
        match self {
            EncoderKind::Resnet18 | EncoderKind::Resnet34 => BlockKind::Basic,
            _ => BlockKind::Bottleneck,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "resnet{}", self.depth())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let depth = s
            .to_ascii_lowercase()
            .strip_prefix("resnet")
            .and_then(|d| d.trim_start_matches('-').parse().ok())
            .ok_or_else(|| Error::Config(format!("unknown encoder `{s}`")))?;
        EncoderKind::from_depth(depth)
    }
}

/// Encoder outputs: the final feature map and the stride-4 tap after stage 1.
pub struct EncoderOutput<T> {
    pub features: Var<T>,
    pub low_level: Var<T>,
}

#[derive(Debug, Clone)]
pub struct ResNetEncoder {
    kind: EncoderKind,
    stem: ConvBn,
    pool: PoolParams,
    stages: Vec<Vec<Block>>,
    low_level_channels: usize,
    out_channels: usize,
    output_stride: usize,
}

impl ResNetEncoder {
    /// `stage_blocks` gives the block count per stage; the stem plus pool
    /// reduce by 4 and each later stage by 2 until `output_stride` is
    /// reached, after which stages keep resolution and double dilation.
    pub(crate) fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        kind: EncoderKind,
        in_channels: usize,
        width: usize,
        stage_blocks: &[usize],
        output_stride: usize,
    ) -> Result<Self> {
        if stage_blocks.is_empty() || stage_blocks.contains(&0) {
            return Err(Error::Config(format!("invalid stage block counts {stage_blocks:?}")));
        }
        let natural = 4usize << (stage_blocks.len() - 1);
        if !output_stride.is_power_of_two() || output_stride < 4 || output_stride > natural {
            return Err(Error::Config(format!(
                "output stride {output_stride} unreachable with {} stages",
                stage_blocks.len()
            )));
        }
        let block_kind = kind.block_kind();
        let expansion = if block_kind == BlockKind::Bottleneck { 4 } else { 1 };
        let stem = b.conv_bn("stem", in_channels, width, 7, ConvParams::new(2, 3, 1, 1))?;
        let mut stages = Vec::with_capacity(stage_blocks.len());
        let (mut cin, mut stride_so_far, mut dilation) = (width, 4, 1);
        for (i, &n) in stage_blocks.iter().enumerate() {
            let cout = (width << i) * expansion;
            let mut stride = 1;
            if i > 0 {
                if stride_so_far < output_stride {
                    stride = 2;
                    stride_so_far *= 2;
                } else {
                    dilation *= 2;
                }
            }
            let blocks = b.scope(format!("stage{}", i + 1), |b| {
                (0..n)
                    .map(|j| {
                        let spec = BlockSpec::new(
                            block_kind,
                            if j == 0 { cin } else { cout },
                            cout,
                            if j == 0 { stride } else { 1 },
                        )
                        .with_dilation(dilation);
                        b.scope(format!("block{}", j + 1), |b| Block::build(b, spec))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            stages.push(blocks);
            cin = cout;
        }
        Ok(ResNetEncoder {
            kind,
            stem,
            pool: PoolParams::new(3, 2, 1),
            stages,
            low_level_channels: width * expansion,
            out_channels: cin,
            output_stride,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn low_level_channels(&self) -> usize {
        self.low_level_channels
    }

    pub fn output_stride(&self) -> usize {
        self.output_stride
    }

    pub fn stages(&self) -> &[Vec<Block>] {
        &self.stages
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: &Var<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<EncoderOutput<T>> {
        let y = self.stem.forward(store, tape, x, ctx, true)?;
        ctx.record("encoder.stem", &y);
        let mut y = tape.max_pool2d(&y, self.pool)?;
        ctx.record("encoder.pool", &y);
        let mut low_level = None;
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                y = block.forward(store, tape, &y, ctx)?;
            }
            ctx.record(&format!("encoder.stage{}", i + 1), &y);
            if i == 0 {
                low_level = Some(y.clone());
            }
        }
        Ok(EncoderOutput { features: y, low_level: low_level.expect("at least one stage") })
    }
}

/// Full-size encoder with its own parameter store (names prefixed `encoder.`).
pub fn build_resnet_encoder<T: Element>(
    kind: EncoderKind,
    output_stride: usize,
    seed: u64,
) -> Result<(ResNetEncoder, ParamStore<T>)> {
    if output_stride != 8 && output_stride != 16 {
        return Err(Error::Config(format!("output stride must be 8 or 16, got {output_stride}")));
    }
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, seed);
    let enc = b.scope("encoder", |b| ResNetEncoder::build(b, kind, 3, 64, &kind.stage_blocks(), output_stride))?;
    Ok((enc, store))
}
