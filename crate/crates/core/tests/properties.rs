mod common;

use proptest::prelude::*;
use segforge::data::{
    apply_flips, crop_labels, kfold, pad_to_target, padding_for, split_train_val, val_count, FlipDraw, ImageBuf,
    NormalizationStats, SegmentationSample,
};
use segforge::eval::ConfusionMatrix;
use segforge::train::poly_lr;

fn labelled_sample(h: usize, w: usize, seed: u8) -> SegmentationSample {
    // Pixel value encodes its label so image and mask can be checked together.
    let mask: Vec<u8> = (0..h * w).map(|i| ((i * 7 + seed as usize) % 5) as u8).collect();
    let data = mask.iter().flat_map(|&m| [m as f32 / 8.0, 0.5, 1.0 - m as f32 / 8.0]).collect();
    SegmentationSample::new("p", ImageBuf::new(h, w, 3, data).unwrap(), mask).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padding_is_centered_and_complete(h in 1usize..80, w in 1usize..80, dh in 0usize..20, dw in 0usize..20) {
        let p = padding_for((h, w), (h + dh, w + dw)).unwrap();
        prop_assert_eq!(p.top + h + p.bottom, h + dh);
        prop_assert_eq!(p.left + w + p.right, w + dw);
        prop_assert!(p.bottom - p.top <= 1 && p.right - p.left <= 1);
    }

    #[test]
    fn pad_then_crop_restores_mask(h in 1usize..24, w in 1usize..24, dh in 0usize..9, dw in 0usize..9, seed: u8) {
        let s = labelled_sample(h, w, seed);
        let padded = pad_to_target(&s, (h + dh, w + dw), &ImageBuf::filled(2, 3, 3, 0.0)).unwrap();
        let back = crop_labels(&padded.mask, (h + dh, w + dw), padded.offset, (h, w)).unwrap();
        prop_assert_eq!(back, s.mask);
        let border = padded.mask.len() - padded.mask.iter().zip(0..).filter(|(_, i)| {
            let (y, x) = (i / (w + dw), i % (w + dw));
            (padded.offset.0..padded.offset.0 + h).contains(&y) && (padded.offset.1..padded.offset.1 + w).contains(&x)
        }).count();
        prop_assert_eq!(border, (h + dh) * (w + dw) - h * w);
    }

    #[test]
    fn folds_partition_and_balance(n in 2usize..300, k in 2usize..8, seed: u64) {
        prop_assume!(n >= k);
        let ids = common::ids(n);
        let plan = kfold(&ids, k, seed).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<&String> = plan.folds.iter().flatten().collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        for i in 0..k {
            let (train, val) = plan.fold(i).unwrap();
            prop_assert_eq!(train.len() + val.len(), n);
            prop_assert!(val.iter().all(|v| !train.contains(v)));
        }
    }

    #[test]
    fn hold_out_is_ceiling(n in 2usize..2000, frac in 0.01f64..0.9, seed: u64) {
        let v = val_count(n, frac);
        prop_assert!(v < n);
        prop_assert!(v as f64 >= (frac * n as f64 - 1e-6).min((n - 1) as f64));
        prop_assert!((v as f64) < frac * n as f64 + 1.0);
        let plan = split_train_val(&common::ids(n), frac, seed).unwrap();
        prop_assert_eq!(plan.val.len(), v);
        prop_assert_eq!(plan.train.len(), n - v);
    }

    #[test]
    fn confusion_counts_and_merge(a in prop::collection::vec((0u8..4, 0u8..4), 1..200), b in prop::collection::vec((0u8..4, 0u8..4), 1..200)) {
        let (pa, ta): (Vec<u8>, Vec<u8>) = a.iter().copied().unzip();
        let (pb, tb): (Vec<u8>, Vec<u8>) = b.iter().copied().unzip();
        let mut m = ConfusionMatrix::from_masks(4, &pa, &ta).unwrap();
        m.merge(&ConfusionMatrix::from_masks(4, &pb, &tb).unwrap()).unwrap();
        let joint = ConfusionMatrix::from_masks(4, &[pa, pb].concat(), &[ta, tb].concat()).unwrap();
        prop_assert_eq!(&m, &joint);
        prop_assert_eq!(m.total() as usize, a.len() + b.len());
        let miou = m.mean_iou().unwrap();
        prop_assert!((0.0..=1.0).contains(&miou));
    }

    #[test]
    fn flips_keep_image_and_mask_aligned(h in 1usize..12, w in 1usize..12, fh: bool, fv: bool, seed: u8) {
        let s = labelled_sample(h, w, seed);
        let mut f = s.clone();
        apply_flips(&mut f, FlipDraw { horizontal: fh, vertical: fv });
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (if fv { h - 1 - y } else { y }, if fh { w - 1 - x } else { x });
                prop_assert_eq!(f.mask[y * w + x], s.mask[sy * w + sx]);
                prop_assert_eq!(f.image.pixel(y, x), s.image.pixel(sy, sx));
            }
        }
        apply_flips(&mut f, FlipDraw { horizontal: fh, vertical: fv });
        prop_assert_eq!(f, s);
    }

    #[test]
    fn schedule_decays_to_floor(total in 1usize..300, lr0 in 1e-4f64..1.0, power in 0.1f64..3.0) {
        let min_lr = 1e-6;
        let mut prev = f64::INFINITY;
        for e in 0..=total + 2 {
            let lr = poly_lr(e, total, lr0, power, min_lr);
            prop_assert!(lr <= prev && lr >= min_lr);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(0, total, lr0, power, min_lr), lr0);
        prop_assert_eq!(poly_lr(total, total, lr0, power, min_lr), min_lr);
    }

    #[test]
    fn normalization_round_trips(values in prop::collection::vec(0.0f32..1.0, 6..60)) {
        let n = values.len() / 3 * 3;
        let img = ImageBuf::new(1, n / 3, 3, values[..n].to_vec()).unwrap();
        let stats = NormalizationStats::compute([&img]).unwrap();
        let z = stats.normalize(&img).unwrap();
        for c in 0..3 {
            let ch: Vec<f64> = z.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            prop_assert!(mean.abs() < 1e-4);
        }
        let back = stats.denormalize(&z).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            prop_assert!((a - b).abs() < 1e-4);
        }
    }
}
