//! Encoder-decoder segmentation networks built on the tensor core.

mod blocks;
mod decoder;
pub(crate) mod layers;
mod resnet;
mod summary;

use serde::{Deserialize, Serialize};

pub use blocks::{Block, BlockKind, BlockSpec};
pub use decoder::{Aspp, DecoderKind, DeepLabV3Head, DeepLabV3PlusHead, DEFAULT_ASPP_RATES};
pub use layers::{BatchNorm, Conv, ConvBn, ForwardCtx};
pub use resnet::{build_resnet_encoder, EncoderKind, EncoderOutput, ResNetEncoder};
pub use summary::{LayerShape, ModelSummary, ModuleParams};

use decoder::PlusHeadConfig;
use layers::ParamBuilder;

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub num_classes: usize,
    pub output_stride: usize,
    pub aspp_channels: usize,
    pub aspp_rates: Vec<usize>,
    pub dropout_rate: f64,
    pub seed: u64,
    pub in_channels: usize,
    /// Stem width; stage `i` has `width * 2^i` (times 4 for bottlenecks) channels.
    pub width: usize,
    /// Per-stage block counts; `None` uses the standard counts for the depth.
    pub stage_blocks: Option<Vec<usize>>,
    pub low_level_channels: usize,
    pub decoder_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Resnet18,
            decoder: DecoderKind::Deeplabv3plus,
            num_classes: 5,
            output_stride: 16,
            aspp_channels: 256,
            aspp_rates: DEFAULT_ASPP_RATES.to_vec(),
            dropout_rate: 0.1,
            seed: 0,
            in_channels: 3,
            width: 64,
            stage_blocks: None,
            low_level_channels: 48,
            decoder_channels: 256,
        }
    }
}

impl ModelConfig {
    pub fn new(encoder: EncoderKind, decoder: DecoderKind) -> Self {
        ModelConfig { encoder, decoder, ..Default::default() }
    }

    /// Reduced network for desk-scale experiments: two stages of one block,
    /// output stride 8 and narrow heads.
    pub fn tiny(decoder: DecoderKind) -> Self {
        ModelConfig {
            decoder,
            output_stride: 8,
            aspp_channels: 16,
            width: 8,
            stage_blocks: Some(vec![1, 1]),
            low_level_channels: 8,
            decoder_channels: 16,
            ..Default::default()
        }
    }

    pub fn stage_blocks(&self) -> Vec<usize> {
        self.stage_blocks.clone().unwrap_or_else(|| self.encoder.stage_blocks().to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=256).contains(&self.num_classes) {
            return fail(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.output_stride != 8 && self.output_stride != 16 {
            return fail(format!("output_stride must be 8 or 16, got {}", self.output_stride));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.aspp_rates.len() != 4 || self.aspp_rates.contains(&0) {
            return fail(format!("aspp_rates must be 4 positive rates, got {:?}", self.aspp_rates));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("width", self.width),
            ("aspp_channels", self.aspp_channels),
            ("low_level_channels", self.low_level_channels),
            ("decoder_channels", self.decoder_channels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        let blocks = self.stage_blocks();
        if blocks.is_empty() || blocks.contains(&0) {
            return fail(format!("stage_blocks must be non-empty and positive, got {blocks:?}"));
        }
        if 4usize << (blocks.len() - 1) < self.output_stride {
            return fail(format!("{} stages cannot reach output stride {}", blocks.len(), self.output_stride));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Head {
    V3(DeepLabV3Head),
    V3Plus(DeepLabV3PlusHead),
}

/// Encoder, ASPP and decoder head sharing one ordered parameter store.
#[derive(Debug, Clone)]
pub struct SegmentationModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: ResNetEncoder,
    aspp: Aspp,
    head: Head,
}

impl<T: Element> SegmentationModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, config.seed);
        let c = &config;
        let encoder = b.scope("encoder", |b| {
            ResNetEncoder::build(b, c.encoder, c.in_channels, c.width, &c.stage_blocks(), c.output_stride)
        })?;
        let aspp = b.scope("aspp", |b| {
            Aspp::build(b, encoder.out_channels(), c.aspp_channels, &c.aspp_rates, c.dropout_rate)
        })?;
        let head = b.scope("decoder", |b| match c.decoder {
            DecoderKind::Deeplabv3 => DeepLabV3Head::build(b, c.aspp_channels, c.num_classes).map(Head::V3),
            DecoderKind::Deeplabv3plus => DeepLabV3PlusHead::build(
                b,
                &PlusHeadConfig {
                    aspp_channels: c.aspp_channels,
                    low_level_in: encoder.low_level_channels(),
                    low_level_out: c.low_level_channels,
                    channels: c.decoder_channels,
                    num_classes: c.num_classes,
                    upsample_factor: c.output_stride / 4,
                    dropout: c.dropout_rate,
                },
            )
            .map(Head::V3Plus),
        })?;
        Ok(SegmentationModel { config, store, encoder, aspp, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder(&self) -> &ResNetEncoder {
        &self.encoder
    }

    /// Number of trainable scalars (batch-norm running statistics excluded).
    pub fn count_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let os = self.config.output_stride;
        match *shape {
            [n, c, h, w] if n > 0 && c == self.config.in_channels && h % os == 0 && w % os == 0 && h > 0 && w > 0 => {
                Ok(())
            }
            _ => Err(Error::shape(
                "model",
                format!(
                    "expected [N, {}, H, W] with H and W positive multiples of {os}, got {shape:?}",
                    self.config.in_channels
                ),
            )),
        }
    }

    /// Logits of shape `[N, num_classes, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, ctx: &mut ForwardCtx<'_, T>) -> Result<Var<T>> {
        self.check_input(x.shape())?;
        let target = (x.shape()[2], x.shape()[3]);
        let enc = self.encoder.forward(&self.store, tape, x, ctx)?;
        let a = self.aspp.forward(&self.store, tape, &enc.features, ctx)?;
        let logits = match &self.head {
            Head::V3(h) => h.forward(&self.store, tape, &a, target, ctx)?,
            Head::V3Plus(h) => h.forward(&self.store, tape, &a, &enc.low_level, target, ctx)?,
        };
        logits.value().check_finite("model")?;
        Ok(logits)
    }

    /// Writes the batch-norm running statistics gathered by a training forward.
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, value) in updates {
            self.store.set_value(id, value)?;
        }
        Ok(())
    }

    /// Eval-mode logits without recording a graph.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &x, &mut ForwardCtx::eval())?;
        Ok(y.value().clone())
    }

    /// Per-pixel argmax class labels, `N*H*W` in row-major order.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<u8>> {
        self.logits(input)?.argmax_channels()
    }

    /// Layer shapes for one `height x width` input plus parameter counts.
    pub fn summary(&self, height: usize, width: usize) -> Result<ModelSummary> {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, self.config.in_channels, height, width]));
        let mut ctx = ForwardCtx::eval().with_trace();
        self.forward(&mut tape, &x, &mut ctx)?;
        Ok(ModelSummary::new(&self.config, &self.store, [1, self.config.in_channels, height, width], ctx.take_trace()))
    }
}

pub fn count_parameters<T: Element>(model: &SegmentationModel<T>) -> usize {
    model.count_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig { output_stride: 32, ..Default::default() };
        assert!(c.validate().is_err());
        c.output_stride = 8;
        c.aspp_rates = vec![1, 6, 12];
        assert!(c.validate().is_err());
        let c = ModelConfig { stage_blocks: Some(vec![1]), ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let c = ModelConfig::new(EncoderKind::Resnet50, DecoderKind::Deeplabv3);
        let s = toml::to_string(&c).unwrap();
        assert!(s.contains("encoder = \"resnet50\""));
        assert_eq!(toml::from_str::<ModelConfig>(&s).unwrap(), c);
        assert!(toml::from_str::<ModelConfig>("encoder = \"resnet20\"").is_err());
    }

    #[test]
    fn tiny_model_forward_shapes() {
        for d in DecoderKind::ALL {
            let m = SegmentationModel::<f32>::new(ModelConfig::tiny(d)).unwrap();
            let y = m.logits(&Tensor::ones(&[2, 3, 32, 48])).unwrap();
            assert_eq!(y.shape(), &[2, 5, 32, 48]);
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = SegmentationModel::<f32>::new(ModelConfig::tiny(DecoderKind::Deeplabv3plus)).unwrap();
        assert!(m.logits(&Tensor::ones(&[1, 3, 30, 32])).is_err());
        assert!(m.logits(&Tensor::ones(&[1, 1, 32, 32])).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let c = ModelConfig::tiny(DecoderKind::Deeplabv3plus);
        let a = SegmentationModel::<f32>::new(c.clone()).unwrap();
        let b = SegmentationModel::<f32>::new(c.clone()).unwrap();
        for ((_, p), (_, q)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        let other = SegmentationModel::<f32>::new(ModelConfig { seed: 1, ..c }).unwrap();
        assert_ne!(a.params().get(ParamId(0)).value, other.params().get(ParamId(0)).value);
    }

    #[test]
    fn training_forward_collects_running_stats() {
        use rand::SeedableRng;
        let mut m = SegmentationModel::<f64>::new(ModelConfig::tiny(DecoderKind::Deeplabv3)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 16, 16], |i| (i as f64).sin()));
        let mut ctx = ForwardCtx::train(&mut rng);
        m.forward(&mut tape, &x, &mut ctx).unwrap();
        let updates = ctx.into_updates();
        assert!(!updates.is_empty());
        let id = m.params().find("encoder.stem.bn.running_mean").unwrap();
        m.apply_updates(updates).unwrap();
        assert!(m.params().value(id).data().iter().any(|&v| v != 0.0));
    }
}
