use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{DecoderKind, EncoderKind, ModelConfig};
use crate::tensor::{Element, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleParams {
    pub name: String,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ModelConfig,
    pub input_shape: [usize; 4],
    pub total_parameters: usize,
    pub buffer_elements: usize,
    /// Published size in millions for the same encoder/decoder pairing, if any.
    pub reference_parameters_millions: Option<f64>,
    pub modules: Vec<ModuleParams>,
    pub layers: Vec<LayerShape>,
}

/// Published parameter counts (millions) for the pretrained-encoder setups.
pub fn reference_parameters_millions(encoder: EncoderKind, decoder: DecoderKind) -> Option<f64> {
    match (encoder, decoder) {
        (EncoderKind::Resnet18, DecoderKind::Deeplabv3plus) => Some(12.34),
        (EncoderKind::Resnet34, DecoderKind::Deeplabv3plus) => Some(22.45),
        (EncoderKind::Resnet50, DecoderKind::Deeplabv3plus) => Some(25.07),
        (EncoderKind::Resnet101, DecoderKind::Deeplabv3plus) => Some(44.06),
        _ => None,
    }
}

/// Module key for grouping: `encoder.stage2.block1.conv1.conv.weight` -> `encoder.stage2`.
fn module_of(name: &str) -> &str {
    let mut dots = name.match_indices('.').map(|(i, _)| i);
    let end = if name.starts_with("encoder.") { dots.nth(1) } else { dots.next() };
    end.map_or(name, |i| &name[..i])
}

impl ModelSummary {
    pub(crate) fn new<T: Element>(
        config: &ModelConfig,
        store: &ParamStore<T>,
        input_shape: [usize; 4],
        trace: Vec<(String, Vec<usize>)>,
    ) -> Self {
        let mut modules: Vec<ModuleParams> = Vec::new();
        let mut buffer_elements = 0;
        for (_, p) in store.iter() {
            if !p.kind.is_trainable() {
                buffer_elements += p.numel();
                continue;
            }
            let m = module_of(&p.name);
            match modules.last_mut() {
                Some(last) if last.name == m => last.parameters += p.numel(),
                _ => modules.push(ModuleParams { name: m.to_string(), parameters: p.numel() }),
            }
        }
        ModelSummary {
            config: config.clone(),
            input_shape,
            total_parameters: store.num_trainable(),
            buffer_elements,
            reference_parameters_millions: reference_parameters_millions(config.encoder, config.decoder),
            modules,
            layers: trace.into_iter().map(|(name, shape)| LayerShape { name, shape }).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "model: {} + {} ({} classes, output stride {})",
            c.encoder, c.decoder, c.num_classes, c.output_stride
        );
        let _ = writeln!(s, "input: {:?}", self.input_shape);
        let _ = writeln!(s, "\n{:<28} {:>24}", "layer", "output shape");
        for l in &self.layers {
            let _ = writeln!(s, "{:<28} {:>24}", l.name, format!("{:?}", l.shape));
        }
        let _ = writeln!(s, "\n{:<28} {:>14}", "module", "parameters");
        for m in &self.modules {
            let _ = writeln!(s, "{:<28} {:>14}", m.name, m.parameters);
        }
        let _ = writeln!(s, "{:<28} {:>14}", "total", self.total_parameters);
        let _ = writeln!(s, "total (millions): {:.2}", self.total_parameters as f64 / 1e6);
        if let Some(r) = self.reference_parameters_millions {
            let _ = writeln!(s, "published size for this pairing (millions): {r:.2}");
        }
        let _ = writeln!(s, "batch-norm buffer elements: {}", self.buffer_elements);
        s
    }
}
