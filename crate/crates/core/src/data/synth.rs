use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{save_gray, save_mask};
use super::sample::{ImageBuf, SegmentationSample};
use super::scheme::ClassScheme;
use crate::error::{Error, Result};

pub const SEA: u8 = 0;
pub const OIL: u8 = 1;
pub const LOOKALIKE: u8 = 2;
pub const SHIP: u8 = 3;
pub const LAND: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Shapes are unions of `cell x cell` squares.
    pub cell: usize,
}

impl SynthConfig {
    pub fn new(n: usize, height: usize, width: usize, seed: u64) -> Self {
        SynthConfig { n, height, width, seed, cell: 8 }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic dataset needs n >= 1".into()));
        }
        if self.cell == 0 || self.height < 4 * self.cell || self.width < 4 * self.cell {
            return Err(Error::Config(format!(
                "synthetic image size {}x{} is degenerate for cell size {} (need at least 4 cells per side)",
                self.width, self.height, self.cell
            )));
        }
        Ok(())
    }
}

pub fn synth_id(i: usize) -> String {
    format!("synth_{i:04}")
}

struct Canvas {
    gh: usize,
    gw: usize,
    cells: Vec<u8>,
}

impl Canvas {
    fn fill(&mut self, y0: usize, x0: usize, h: usize, w: usize, class: u8) {
        for y in y0..(y0 + h).min(self.gh) {
            for x in x0..(x0 + w).min(self.gw) {
                self.cells[y * self.gw + x] = class;
            }
        }
    }

    fn rect<R: Rng>(&mut self, rng: &mut R, h: usize, w: usize, class: u8) {
        let (h, w) = (h.clamp(1, self.gh), w.clamp(1, self.gw));
        let y = rng.random_range(0..=self.gh - h);
        let x = rng.random_range(0..=self.gw - w);
        self.fill(y, x, h, w, class);
    }

    fn shape<R: Rng>(&mut self, rng: &mut R, class: u8) {
        let (gh, gw) = (self.gh, self.gw);
        match class {
            OIL => {
                let long = rng.random_range((gw.max(gh) / 3).max(3)..=(gw.max(gh) / 2).max(3));
                let short = 2;
                if rng.random_bool(0.5) {
                    self.rect(rng, short, long, OIL)
                } else {
                    self.rect(rng, long, short, OIL)
                }
            }
            LOOKALIKE => {
                let h = rng.random_range(3..=(gh / 3).max(3));
                let w = rng.random_range(3..=(gw / 3).max(3));
                self.rect(rng, h, w, LOOKALIKE)
            }
            SHIP => {
                let h = rng.random_range(2..=3);
                self.rect(rng, h, 2, SHIP)
            }
            _ => {
                let depth = rng.random_range(2..=(gh.min(gw) / 4).max(2));
                match rng.random_range(0..4) {
                    0 => self.fill(0, 0, depth, gw, LAND),
                    1 => self.fill(gh - depth, 0, depth, gw, LAND),
                    2 => self.fill(0, 0, gh, depth, LAND),
                    _ => self.fill(0, gw - depth, gh, depth, LAND),
                }
            }
        }
    }
}

fn intensity<R: Rng>(rng: &mut R, class: u8, x: usize, y: usize) -> u8 {
    let v: i32 = match class {
        SEA => 70 + rng.random_range(-14..=14),
        OIL => 14 + rng.random_range(-4..=4),
        LOOKALIKE => {
            if (x + y).is_multiple_of(2) {
                20
            } else {
                120
            }
        }
        SHIP => 235 + rng.random_range(-15..=15),
        _ => 170 + rng.random_range(-35..=35),
    };
    v.clamp(0, 255) as u8
}

/// Generates one image: speckled sea with cell-aligned shapes. Image `i`
/// always contains class `1 + i % 4`, drawn last so it stays visible.
fn generate_one(cfg: &SynthConfig, i: usize) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);
    let (h, w, c) = (cfg.height, cfg.width, cfg.cell);
    let mut canvas = Canvas { gh: h.div_ceil(c), gw: w.div_ceil(c), cells: vec![SEA; h.div_ceil(c) * w.div_ceil(c)] };
    let extra = rng.random_range(1..=3);
    for _ in 0..extra {
        let class = rng.random_range(1..=4u8);
        canvas.shape(&mut rng, class);
    }
    canvas.shape(&mut rng, 1 + (i % 4) as u8);

    let mut mask = Vec::with_capacity(h * w);
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let class = canvas.cells[(y / c) * canvas.gw + x / c];
            mask.push(class);
            pixels.push(intensity(&mut rng, class, x, y));
        }
    }
    (pixels, mask)
}

/// In-memory synthetic samples, identical to what [`synth_generate`] writes
/// and [`super::load_dataset`] reads back (grayscale replicated to 3 channels).
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<SegmentationSample>> {
    cfg.validate()?;
    (0..cfg.n)
        .map(|i| {
            let (pixels, mask) = generate_one(cfg, i);
            let img = ImageBuf::new(cfg.height, cfg.width, 1, pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
            SegmentationSample::new(synth_id(i), img.replicate_channels(3)?, mask)
        })
        .collect()
}

/// Writes `root/images/<id>.png` (8-bit grayscale) and `root/masks/<id>.png`
/// (palette RGB). Returns the ids.
pub fn synth_generate(root: &Path, cfg: &SynthConfig, scheme: &ClassScheme) -> Result<Vec<String>> {
    cfg.validate()?;
    if scheme.num_classes() < 5 {
        return Err(Error::Config("the synthetic generator needs a scheme with 5 classes".into()));
    }
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut ids = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (pixels, mask) = generate_one(cfg, i);
        let id = synth_id(i);
        let img = ImageBuf::new(cfg.height, cfg.width, 1, pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
        save_gray(&root.join("images").join(format!("{id}.png")), &img)?;
        save_mask(&root.join("masks").join(format!("{id}.png")), &mask, cfg.height, cfg.width, scheme)?;
        ids.push(id);
    }
    Ok(ids)
}
