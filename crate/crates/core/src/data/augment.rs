use rand::Rng;

use super::sample::{ImageBuf, SegmentationSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlipDraw {
    pub horizontal: bool,
    pub vertical: bool,
}

fn flip_image(img: &mut ImageBuf, horizontal: bool) {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            let i = (sy * w + sx) * c;
            out.extend_from_slice(&img.data[i..i + c]);
        }
    }
    img.data = out;
}

fn flip_mask(mask: &mut [u8], h: usize, w: usize, horizontal: bool) {
    if horizontal {
        mask.chunks_mut(w).for_each(|row| row.reverse());
    } else {
        for y in 0..h / 2 {
            let (top, bottom) = mask.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

/// Applies the given flips to image and mask together.
pub fn apply_flips(sample: &mut SegmentationSample, draw: FlipDraw) {
    let (h, w) = (sample.height(), sample.width());
    for (on, horizontal) in [(draw.horizontal, true), (draw.vertical, false)] {
        if on {
            flip_image(&mut sample.image, horizontal);
            flip_mask(&mut sample.mask, h, w, horizontal);
        }
    }
}

/// Draws a horizontal flip with probability `p_h` then a vertical flip with
/// probability `p_v` (one uniform draw each) and applies them.
pub fn augment_flips<R: Rng + ?Sized>(
    sample: &mut SegmentationSample,
    p_h: f64,
    p_v: f64,
    rng: &mut R,
) -> Result<FlipDraw> {
    for p in [p_h, p_v] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("flip probability must be in [0, 1], got {p}")));
        }
    }
    let draw = FlipDraw { horizontal: rng.random::<f64>() < p_h, vertical: rng.random::<f64>() < p_v };
    apply_flips(sample, draw);
    Ok(draw)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> SegmentationSample {
        let img = ImageBuf::new(3, 4, 2, (0..24).map(|v| v as f32).collect()).unwrap();
        SegmentationSample::new("f", img, (0..12).collect()).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let mut s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(augment_flips(&mut s, 0.0, 0.0, &mut rng).unwrap(), FlipDraw::default());
        }
        assert_eq!(s, sample());
    }

    #[test]
    fn flips_are_involutions() {
        for draw in [
            FlipDraw { horizontal: true, vertical: false },
            FlipDraw { horizontal: false, vertical: true },
            FlipDraw { horizontal: true, vertical: true },
        ] {
            let mut s = sample();
            apply_flips(&mut s, draw);
            assert_ne!(s, sample());
            apply_flips(&mut s, draw);
            assert_eq!(s, sample());
        }
    }

    #[test]
    fn image_and_mask_move_together() {
        let mut s = sample();
        apply_flips(&mut s, FlipDraw { horizontal: true, vertical: true });
        assert_eq!(s.mask[0], 11);
        assert_eq!(s.image.pixel(0, 0), &[22.0, 23.0]);
        assert_eq!(s.mask[5], 6);
        assert_eq!(s.image.pixel(1, 1), &[12.0, 13.0]);
    }

    #[test]
    fn invalid_probability_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment_flips(&mut sample(), 1.5, 0.0, &mut rng).is_err());
    }
}
