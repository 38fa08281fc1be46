use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use segforge::data::{ClassScheme, PatchSource, DEFAULT_TARGET_HW};
use segforge::model::{DecoderKind, EncoderKind, ModelConfig};
use segforge::train::TrainConfig;
use segforge::{Error, Result};

pub const OUT_ENV: &str = "SEGFORGE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root with `images/` and `masks/`.
    pub root: Option<PathBuf>,
    /// Separate validation root; when unset, `val_fraction` of `root` is held out.
    pub val_root: Option<PathBuf>,
    pub val_fraction: f64,
    /// Seed of the train/val split and of the fold assignment.
    pub split_seed: u64,
    pub target_height: usize,
    pub target_width: usize,
    pub patch: PatchSource,
    pub palette: Option<PathBuf>,
    pub channels: usize,
    /// Score and write predictions on the original region only.
    pub crop_back: bool,
    pub folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            val_root: None,
            val_fraction: 0.05,
            split_seed: 0,
            target_height: DEFAULT_TARGET_HW.0,
            target_width: DEFAULT_TARGET_HW.1,
            patch: PatchSource::default(),
            palette: None,
            channels: 3,
            crop_back: false,
            folds: 5,
        }
    }
}

impl DataConfig {
    pub fn target_hw(&self) -> (usize, usize) {
        (self.target_height, self.target_width)
    }

    pub fn root(&self) -> Result<&Path> {
        self.root.as_deref().ok_or_else(|| Error::Config("no dataset root given (use --data-root)".into()))
    }

    pub fn scheme(&self) -> Result<ClassScheme> {
        match &self.palette {
            Some(p) => ClassScheme::from_palette_file(p),
            None => Ok(ClassScheme::default()),
        }
    }
}

/// Everything a subcommand needs, resolved from defaults, the config file,
/// command-line flags and the environment, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("runs/latest"),
            threads: None,
            deterministic: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration (the format of `config.echo`).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub encoder: Option<EncoderKind>,
    #[arg(long, global = true)]
    pub decoder: Option<DecoderKind>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub lr0: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub power: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub min_lr: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub momentum: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub weight_decay: Option<f64>,
    /// Sets the model, training and split seeds together.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for loading and evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run every parallel section on one thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Validate every operator output and fail on NaN or infinity.
    #[arg(long, global = true)]
    pub check_finite: bool,
    /// Output directory; the SEGFORGE_OUT environment variable takes precedence.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Palette file (`name index R G B` per line).
    #[arg(long, global = true, value_name = "PATH")]
    pub palette: Option<PathBuf>,
    /// Crop predictions back to the original image size.
    #[arg(long, global = true)]
    pub crop_back: bool,
    /// Padding target as `WIDTHxHEIGHT` (default 1280x672).
    #[arg(long, global = true, value_name = "WxH", value_parser = parse_size)]
    pub target_size: Option<(usize, usize)>,
}

/// Parses `WIDTHxHEIGHT` into `(height, width)`.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size `{s}`: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err(format!("size must be positive, got `{s}`"));
    }
    Ok((h, w))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve(o: &Overrides, env_out: Option<PathBuf>) -> Result<Self> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = &o.data_root {
            c.data.root = Some(v.clone());
        }
        if let Some(v) = o.encoder {
            c.model.encoder = v;
        }
        if let Some(v) = o.decoder {
            c.model.decoder = v;
        }
        if let Some(v) = o.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = o.lr0 {
            c.train.lr0 = v;
        }
        if let Some(v) = o.power {
            c.train.power = v;
        }
        if let Some(v) = o.min_lr {
            c.train.min_lr = v;
        }
        if let Some(v) = o.momentum {
            c.train.momentum = v;
        }
        if let Some(v) = o.weight_decay {
            c.train.weight_decay = v;
        }
        if let Some(v) = o.seed {
            c.model.seed = v;
            c.train.seed = v;
            c.data.split_seed = v;
        }
        if let Some(v) = o.threads {
            c.threads = Some(v);
        }
        c.deterministic |= o.deterministic;
        if let Some(v) = &o.palette {
            c.data.palette = Some(v.clone());
        }
        c.data.crop_back |= o.crop_back;
        if let Some((h, w)) = o.target_size {
            c.data.target_height = h;
            c.data.target_width = w;
        }
        if let Some(v) = &o.out {
            c.out = v.clone();
        }
        if let Some(v) = env_out {
            c.out = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", d.val_fraction)));
        }
        if d.target_height == 0 || d.target_width == 0 {
            return Err(Error::Config("padding target must be positive".into()));
        }
        if d.channels == 0 || d.channels != self.model.in_channels {
            return Err(Error::Config(format!(
                "data.channels ({}) must equal model.in_channels ({})",
                d.channels, self.model.in_channels
            )));
        }
        if d.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", d.folds)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.data.root = Some("data/train".into());
        c.model.stage_blocks = Some(vec![1, 1]);
        c.train.epochs = 3;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_then_env_win() {
        let o = Overrides {
            epochs: Some(7),
            seed: Some(3),
            out: Some("a".into()),
            target_size: Some((64, 96)),
            ..Default::default()
        };
        let c = RunConfig::resolve(&o, Some("b".into())).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!((c.model.seed, c.train.seed, c.data.split_seed), (3, 3, 3));
        assert_eq!(c.data.target_hw(), (64, 96));
        assert_eq!(c.out, PathBuf::from("b"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("[train]\nepochs = 3\n").is_ok());
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("1280x672"), Ok((672, 1280)));
        assert!(parse_size("12x").is_err());
        assert!(parse_size("0x4").is_err());
    }
}
