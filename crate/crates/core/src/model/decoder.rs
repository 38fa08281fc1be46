use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::{Conv, ConvBn, ForwardCtx, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Element, ParamStore, Tape, Var};

pub const DEFAULT_ASPP_RATES: [usize; 4] = [1, 6, 12, 18];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Deeplabv3,
    Deeplabv3plus,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 2] = [DecoderKind::Deeplabv3, DecoderKind::Deeplabv3plus];
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Deeplabv3 => "deeplabv3",
            DecoderKind::Deeplabv3plus => "deeplabv3plus",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "deeplabv3" => Ok(DecoderKind::Deeplabv3),
            "deeplabv3plus" | "deeplabv3+" => Ok(DecoderKind::Deeplabv3plus),
            _ => Err(Error::Config(format!("unknown decoder `{s}`"))),
        }
    }
}

/// Atrous spatial pyramid pooling: one branch per rate (rate 1 is a 1x1
/// conv, others 3x3 dilated), an image-pooling branch, 1x1 fusion.
#[derive(Debug, Clone)]
pub struct Aspp {
    branches: Vec<ConvBn>,
    pooling: ConvBn,
    project: ConvBn,
    dropout: f64,
    out_channels: usize,
}

impl Aspp {
    pub(crate) fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        in_channels: usize,
        out_channels: usize,
        rates: &[usize],
        dropout: f64,
    ) -> Result<Self> {
        if rates.len() != 4 {
            return Err(Error::Config(format!("ASPP needs 4 rates, got {}", rates.len())));
        }
        if rates.contains(&0) {
            return Err(Error::Config("ASPP rates must be positive".into()));
        }
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let name = format!("branch{}", i + 1);
                if r == 1 {
                    b.conv_bn(&name, in_channels, out_channels, 1, ConvParams::default())
                } else {
                    b.conv_bn(&name, in_channels, out_channels, 3, ConvParams::new(1, r, r, 1))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let pooling = b.conv_bn("pooling", in_channels, out_channels, 1, ConvParams::default())?;
        let project = b.conv_bn("project", 5 * out_channels, out_channels, 1, ConvParams::default())?;
        Ok(Aspp { branches, pooling, project, dropout, out_channels })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: &Var<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var<T>> {
        let (h, w) = spatial(x, "aspp")?;
        let mut outs = Vec::with_capacity(5);
        for (i, branch) in self.branches.iter().enumerate() {
            let y = branch.forward(store, tape, x, ctx, true)?;
            ctx.record(&format!("aspp.branch{}", i + 1), &y);
            outs.push(y);
        }
        let pooled = tape.global_avg_pool2d(x)?;
        let pooled = self.pooling.forward(store, tape, &pooled, ctx, true)?;
        let pooled = tape.bilinear_upsample(&pooled, h, w, false)?;
        ctx.record("aspp.pooling", &pooled);
        outs.push(pooled);
        let refs: Vec<&Var<T>> = outs.iter().collect();
        let cat = tape.concat(&refs)?;
        drop(outs);
        let y = self.project.forward(store, tape, &cat, ctx, true)?;
        let y = ctx.dropout(tape, &y, self.dropout)?;
        ctx.record("aspp.project", &y);
        Ok(y)
    }
}

fn spatial<T: Element>(x: &Var<T>, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        &[_, _, h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::shape(op, format!("expected NCHW input, got {s:?}"))),
    }
}

/// 1x1 classifier on the ASPP output, upsampled straight to the input size.
#[derive(Debug, Clone)]
pub struct DeepLabV3Head {
    classifier: Conv,
}

impl DeepLabV3Head {
    pub(crate) fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        in_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let classifier = b.scope("classifier", |b| b.conv(in_channels, num_classes, 1, ConvParams::default(), true))?;
        Ok(DeepLabV3Head { classifier })
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        aspp: &Var<T>,
        target: (usize, usize),
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var<T>> {
        let y = self.classifier.forward(store, tape, aspp)?;
        ctx.record("decoder.classifier", &y);
        let y = tape.bilinear_upsample(&y, target.0, target.1, false)?;
        ctx.record("logits", &y);
        Ok(y)
    }
}

/// Upsampled ASPP output fused with a reduced low-level tap, refined by two
/// 3x3 convolutions, classified and upsampled to the input size.
#[derive(Debug, Clone)]
pub struct DeepLabV3PlusHead {
    reduce: ConvBn,
    refine: [ConvBn; 2],
    classifier: Conv,
    upsample_factor: usize,
    dropout: f64,
}

pub struct PlusHeadConfig {
    pub aspp_channels: usize,
    pub low_level_in: usize,
    pub low_level_out: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub upsample_factor: usize,
    pub dropout: f64,
}

impl DeepLabV3PlusHead {
    pub(crate) fn build<T: Element>(b: &mut ParamBuilder<'_, T>, c: &PlusHeadConfig) -> Result<Self> {
        let k3 = ConvParams::new(1, 1, 1, 1);
        let reduce = b.conv_bn("low_level", c.low_level_in, c.low_level_out, 1, ConvParams::default())?;
        let refine = [
            b.conv_bn("refine1", c.aspp_channels + c.low_level_out, c.channels, 3, k3)?,
            b.conv_bn("refine2", c.channels, c.channels, 3, k3)?,
        ];
        let classifier =
            b.scope("classifier", |b| b.conv(c.channels, c.num_classes, 1, ConvParams::default(), true))?;
        Ok(DeepLabV3PlusHead { reduce, refine, classifier, upsample_factor: c.upsample_factor, dropout: c.dropout })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        aspp: &Var<T>,
        low_level: &Var<T>,
        target: (usize, usize),
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var<T>> {
        let (h, w) = spatial(aspp, "deeplabv3plus")?;
        let (lh, lw) = spatial(low_level, "deeplabv3plus")?;
        let (uh, uw) = (h * self.upsample_factor, w * self.upsample_factor);
        if (uh, uw) != (lh, lw) {
            return Err(Error::shape(
                "deeplabv3plus",
                format!("upsampled ASPP output is {uh}x{uw} but the low-level tap is {lh}x{lw}"),
            ));
        }
        let up = tape.bilinear_upsample(aspp, uh, uw, false)?;
        let low = self.reduce.forward(store, tape, low_level, ctx, true)?;
        ctx.record("decoder.low_level", &low);
        let mut y = tape.concat(&[&up, &low])?;
        ctx.record("decoder.concat", &y);
        for (i, layer) in self.refine.iter().enumerate() {
            y = layer.forward(store, tape, &y, ctx, true)?;
            ctx.record(&format!("decoder.refine{}", i + 1), &y);
        }
        let y = ctx.dropout(tape, &y, self.dropout)?;
        let y = self.classifier.forward(store, tape, &y)?;
        ctx.record("decoder.classifier", &y);
        let y = tape.bilinear_upsample(&y, target.0, target.1, false)?;
        ctx.record("logits", &y);
        Ok(y)
    }
}
