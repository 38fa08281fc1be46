//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! (`harness = false`) and exits nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use segforge::data::{
    kfold, pad_to_target, padding_for, split_train_val, synth_samples, ClassScheme, ImageBuf, NormalizationStats,
    Padding, SegmentationSample, SynthConfig,
};
use segforge::eval::{evaluate_model, ConfusionMatrix, CvSummary, EvalOptions, IouReport};
use segforge::gradcheck::{run_gradcheck, GradcheckOptions, COMPOSITES, MODEL_INPUT, OPS, TOLERANCE};
use segforge::model::{DecoderKind, EncoderKind, ModelConfig, SegmentationModel};
use segforge::tensor::{conv2d, cross_entropy, ConvParams, Tape, Tensor};
use segforge::train::{fit, load_checkpoint, poly_lr, FitOptions, TrainConfig, TrainState};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Runs `f` on a one-thread pool.
fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool").install(f)
}

fn gradient_suite() -> Outcome {
    let report = run_gradcheck(&GradcheckOptions::default()).map_err(e2s)?;
    let names: Vec<&str> = report.checks.iter().map(|c| c.op.as_str()).collect();
    let expected: Vec<&str> = OPS.iter().chain(COMPOSITES.iter()).copied().collect();
    ensure(names == expected, || format!("checked {names:?}"))?;
    for c in &report.checks {
        ensure(c.instances >= 20, || format!("{}: only {} instances", c.op, c.instances))?;
        ensure(c.coordinates > 0, || format!("{}: no coordinates compared", c.op))?;
        ensure(c.max_rel_error < TOLERANCE, || format!("{}: max rel error {:.3e}", c.op, c.max_rel_error))?;
    }
    ensure(MODEL_INPUT == [1, 3, 32, 32], || format!("model input {MODEL_INPUT:?}"))?;
    ensure(report.elapsed < Duration::from_secs(120), || format!("took {:.1?}", report.elapsed))?;
    Ok(format!(
        "{} checks x >=20 instances, max rel error {:.2e} < 1e-4, {:.1} s",
        report.checks.len(),
        report.max_rel_error(),
        report.elapsed.as_secs_f64()
    ))
}

fn convolution_oracle() -> Outcome {
    let mut rng = rng(2);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for k in [1usize, 3] {
        for s in [1usize, 2] {
            for d in [1usize, 2, 6, 12, 18] {
                for groups in [1usize, 2, 8] {
                    let (c, o) = (8, 8);
                    let pad = d * (k - 1) / 2;
                    let (h, w) = (2 * d + 9, 2 * d + 6);
                    let x = uniform(&mut rng, &[2, c, h, w]);
                    let wt = uniform(&mut rng, &[o, c / groups, k, k]);
                    let b = uniform(&mut rng, &[o]);
                    let p = ConvParams::new(s, pad, d, groups);
                    let fast = conv2d(&x, &wt, Some(&b), p).map_err(e2s)?;
                    let slow = naive_conv2d(&x, &wt, Some(&b), p);
                    ensure(fast.shape() == slow.shape(), || {
                        format!("k{k} s{s} d{d} g{groups}: shape {:?}", fast.shape())
                    })?;
                    let err = max_rel_diff(fast.data(), slow.data());
                    ensure(err < 1e-6, || format!("k{k} s{s} d{d} g{groups}: rel diff {err:.3e}"))?;
                    worst = worst.max(err);
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} (k, s, d, groups) cases incl. d in {{6,12,18}}, max rel diff {worst:.2e}"))
}

fn iou_oracle() -> Outcome {
    let mut rng = rng(3);
    for trial in 0..100 {
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..5)).collect();
        let truth: Vec<u8> = (0..64).map(|_| rng.random_range(0..5)).collect();
        let cm = ConfusionMatrix::from_masks(5, &pred, &truth).map_err(e2s)?;
        for c in 0..5u8 {
            let (a, b) = (cm.class_iou(c as usize), set_iou(&pred, &truth, c));
            ensure(a == b, || format!("pair {trial}, class {c}: {a:?} vs {b:?}"))?;
        }
        let (a, b) = (cm.mean_iou().map_err(e2s)?, set_mean_iou(&pred, &truth, 5));
        ensure(a == b, || format!("pair {trial}: m-IoU {a} vs {b}"))?;
    }
    let mut rng2 = common::rng(4);
    let mask: Vec<u8> = (0..64).map(|_| rng2.random_range(0..5)).collect();
    let identity = ConfusionMatrix::from_masks(5, &mask, &mask).map_err(e2s)?.mean_iou().map_err(e2s)?;
    ensure(identity == 1.0, || format!("identity m-IoU {identity}"))?;
    // Class 1: predicted {0, 1}, true {0, 2}; one shared pixel out of three.
    let third = ConfusionMatrix::from_masks(5, &[1, 1, 0, 0], &[1, 0, 1, 0]).map_err(e2s)?.class_iou(1);
    ensure(third == Some(1.0 / 3.0), || format!("1/3 case gave {third:?}"))?;
    Ok("100 random 8x8 pairs exact, identity = 1.0, 1/3 exact".into())
}

fn schedule() -> Outcome {
    let (lr0, power, min_lr, total) = (1e-2, 0.9, 1e-6, 100);
    for e in [0usize, 1, 50, 99] {
        let expected = lr0 * (1.0 - e as f64 / total as f64).powf(power);
        let got = poly_lr(e, total, lr0, power, min_lr);
        ensure((got - expected).abs() <= 1e-12, || format!("e={e}: {got} vs {expected}"))?;
    }
    let mid = poly_lr(50, total, lr0, power, min_lr);
    ensure((mid - 5.3589e-3).abs() < 5e-8, || format!("e=50 gives {mid:.6e}"))?;
    let end = poly_lr(total, total, lr0, power, min_lr);
    ensure(end == min_lr, || format!("e=T gives {end:e}"))?;
    Ok(format!("e in {{0,1,50,99}} to 1e-12, e=50 -> {mid:.4e}, e=T -> {end:e}"))
}

fn loss() -> Outcome {
    let (n, c, h, w) = (2, 5, 3, 4);
    let targets: Vec<u8> = (0..n * h * w).map(|i| (i % c) as u8).collect();
    let (l, _) = cross_entropy(&Tensor::<f64>::full(&[n, c, h, w], 0.37), &targets).map_err(e2s)?;
    ensure((l - 5f64.ln()).abs() <= 1e-9, || format!("uniform loss {l} vs ln 5"))?;

    let mut rng = rng(5);
    let logits = uniform(&mut rng, &[n, c, h, w]).map(|v| 3.0 * v);
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone(), true);
    let loss = tape.cross_entropy(&x, &targets).map_err(e2s)?;
    let grads = tape.backward(&loss).map_err(e2s)?;
    let g = grads.get(&x).ok_or("no gradient for logits")?;
    let hw = h * w;
    let pixels = (n * hw) as f64;
    let mut worst = 0.0f64;
    for b in 0..n {
        for p in 0..hw {
            let z: Vec<f64> = (0..c).map(|k| logits.data()[(b * c + k) * hw + p]).collect();
            let s = softmax(&z);
            for (k, sk) in s.iter().enumerate() {
                let onehot = if targets[b * hw + p] as usize == k { 1.0 } else { 0.0 };
                // The loss is a mean over pixels; undo that factor.
                let d = g.data()[(b * c + k) * hw + p] * pixels;
                worst = worst.max((d - (sk - onehot)).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("gradient off by {worst:.3e}"))?;
    Ok(format!("uniform loss - ln 5 = {:.1e}, |grad - (softmax - onehot)| <= {worst:.1e}", (l - 5f64.ln()).abs()))
}

fn padding() -> Outcome {
    let (h, w) = (650, 1250);
    let pad = padding_for((h, w), (672, 1280)).map_err(e2s)?;
    ensure(pad == Padding { left: 15, right: 15, top: 11, bottom: 11 }, || format!("{pad:?}"))?;
    let mut rng = rng(6);
    let image = ImageBuf::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).map_err(e2s)?;
    let mask: Vec<u8> = (0..h * w).map(|_| rng.random_range(1..5)).collect();
    let sample = SegmentationSample::new("s", image, mask).map_err(e2s)?;
    let patch = ImageBuf::filled(4, 4, 3, 0.25);
    let out = pad_to_target(&sample, (672, 1280), &patch).map_err(e2s)?;
    ensure((out.height(), out.width()) == (672, 1280), || format!("padded to {}x{}", out.width(), out.height()))?;
    let mut border = 0usize;
    for y in 0..672 {
        for x in 0..1280 {
            let inside = (11..11 + h).contains(&y) && (15..15 + w).contains(&x);
            let m = out.mask[y * 1280 + x];
            if inside {
                let (sy, sx) = (y - 11, x - 15);
                let a = out.image.pixel(y, x).iter().map(|v| v.to_bits());
                let b = sample.image.pixel(sy, sx).iter().map(|v| v.to_bits());
                ensure(a.eq(b), || format!("interior pixel ({sx}, {sy}) changed"))?;
                ensure(m == sample.mask[sy * w + sx], || format!("interior label ({sx}, {sy}) changed"))?;
            } else {
                ensure(m == 0, || format!("border label {m} at ({x}, {y})"))?;
                border += 1;
            }
        }
    }
    Ok(format!("1250x650 -> 1280x672, pads (15,15,11,11), interior bit-exact, {border} border pixels all class 0"))
}

fn splits() -> Outcome {
    let ids = ids(1002);
    let a = split_train_val(&ids, 0.05, 11).map_err(e2s)?;
    ensure((a.train.len(), a.val.len()) == (951, 51), || format!("{}/{}", a.train.len(), a.val.len()))?;
    let again = split_train_val(&ids, 0.05, 11).map_err(e2s)?;
    ensure(a == again, || "hold-out split not deterministic".into())?;
    ensure(split_train_val(&ids, 0.05, 12).map_err(e2s)?.val != a.val, || "seed ignored".into())?;

    let f = kfold(&ids, 5, 11).map_err(e2s)?;
    let mut sizes: Vec<usize> = f.folds.iter().map(Vec::len).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    ensure(sizes == [201, 201, 200, 200, 200], || format!("fold sizes {sizes:?}"))?;
    let mut all: Vec<&String> = f.folds.iter().flatten().collect();
    all.sort();
    all.dedup();
    ensure(all.len() == 1002, || format!("folds cover {} distinct ids", all.len()))?;
    ensure(kfold(&ids, 5, 11).map_err(e2s)? == f, || "folds not deterministic".into())?;
    ensure(kfold(&ids, 5, 12).map_err(e2s)?.folds != f.folds, || "fold seed ignored".into())?;
    Ok("951/51 hold-out, folds {201,201,200,200,200} partition 1002 ids, same seed same split".into())
}

/// The reduced configuration used for the overfit run: ResNet-18 basic blocks,
/// one block in each of the two stages, DeepLabV3+ head.
fn toy_model() -> ModelConfig {
    ModelConfig {
        width: 64,
        aspp_channels: 128,
        decoder_channels: 128,
        low_level_channels: 48,
        dropout_rate: 0.0,
        stage_blocks: Some(vec![1, 1]),
        ..ModelConfig::tiny(DecoderKind::Deeplabv3plus)
    }
}

fn toy_overfit() -> Outcome {
    let samples = synth_samples(&SynthConfig::new(16, 64, 64, 7)).map_err(e2s)?;
    let stats = NormalizationStats::compute(samples.iter().map(|s| &s.image)).map_err(e2s)?;
    let mc = toy_model();
    ensure(mc.encoder == EncoderKind::Resnet18, || format!("encoder {:?}", mc.encoder))?;
    let tc = TrainConfig { epochs: 50, batch_size: 4, flip_h: 0.0, flip_v: 0.0, ..Default::default() };
    ensure((tc.lr0, tc.momentum, tc.weight_decay) == (0.01, 0.9, 1e-4), || format!("{tc:?}"))?;
    let steps = tc.epochs * samples.len().div_ceil(tc.batch_size);
    ensure(steps == 200, || format!("{steps} steps"))?;
    let start = Instant::now();
    let (logs, miou) = single_threaded(|| -> Result<_, String> {
        let mut st = TrainState::<f32>::new(mc.clone(), mc.seed).map_err(e2s)?;
        let logs = fit(&mut st, &samples, &[], &stats, &tc, &FitOptions::default()).map_err(e2s)?;
        let ev = evaluate_model(&st.model, &samples, &stats, &EvalOptions::default()).map_err(e2s)?;
        Ok((logs, ev.report.mean_iou / 100.0))
    })?;
    let elapsed = start.elapsed();
    let last = logs.last().ok_or("no epochs ran")?.train_loss;
    ensure(miou > 0.95, || format!("training m-IoU {miou:.4}, final loss {last:.4}"))?;
    ensure(last < 0.1, || format!("final loss {last:.4}, m-IoU {miou:.4}"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:.1?}"))?;
    Ok(format!("{steps} steps on one thread: m-IoU {miou:.4}, final loss {last:.4}, {:.1} s", elapsed.as_secs_f64()))
}

fn trajectory() -> Outcome {
    let samples = synth_samples(&SynthConfig::new(6, 32, 32, 9)).map_err(e2s)?;
    let stats = NormalizationStats::compute(samples.iter().map(|s| &s.image)).map_err(e2s)?;
    let mc = ModelConfig { dropout_rate: 0.2, ..ModelConfig::tiny(DecoderKind::Deeplabv3plus) };
    let tc = TrainConfig { epochs: 4, batch_size: 2, seed: 5, ..Default::default() };
    let dir = tempfile::tempdir().map_err(e2s)?;
    single_threaded(|| -> Result<_, String> {
        let mut straight = TrainState::<f32>::new(mc.clone(), tc.seed).map_err(e2s)?;
        let straight_logs = fit(&mut straight, &samples, &[], &stats, &tc, &FitOptions::default()).map_err(e2s)?;

        let mut first = TrainState::<f32>::new(mc.clone(), tc.seed).map_err(e2s)?;
        let opts = FitOptions { checkpoint_dir: Some(dir.path().into()), stop_at_epoch: Some(2), ..Default::default() };
        fit(&mut first, &samples, &[], &stats, &tc, &opts).map_err(e2s)?;
        drop(first);
        let mut resumed =
            load_checkpoint::<f32>(&dir.path().join("last.ckpt")).map_err(e2s)?.into_state().map_err(e2s)?;
        ensure(resumed.epoch == 2, || format!("checkpoint at epoch {}", resumed.epoch))?;
        fit(&mut resumed, &samples, &[], &stats, &tc, &FitOptions::default()).map_err(e2s)?;

        let a: Vec<_> = straight.model.params().iter().map(|(_, p)| (p.name.clone(), (*p.value).clone())).collect();
        let b: Vec<_> = resumed.model.params().iter().map(|(_, p)| (p.name.clone(), (*p.value).clone())).collect();
        ensure(a.len() == b.len(), || "parameter lists differ".into())?;
        let mut scalars = 0usize;
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            ensure(na == nb, || format!("{na} vs {nb}"))?;
            let same = ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("{na} differs"))?;
            scalars += ta.numel();
        }
        ensure(straight.optimizer == resumed.optimizer, || "momentum buffers differ".into())?;
        ensure(straight.logs == resumed.logs, || "epoch logs differ".into())?;
        ensure(straight_logs.len() == 4, || format!("{} epochs", straight_logs.len()))?;
        Ok(format!("2 + resume 2 == 4 epochs: {scalars} scalars bit-identical, momentum and logs equal"))
    })
}

fn shapes() -> Outcome {
    let start = Instant::now();
    let mut combos = 0;
    for enc in [EncoderKind::Resnet18, EncoderKind::Resnet34, EncoderKind::Resnet50, EncoderKind::Resnet101] {
        for dec in DecoderKind::ALL {
            let model = SegmentationModel::<f32>::new(ModelConfig::new(enc, dec)).map_err(e2s)?;
            for (n, h, w) in [(2, 64, 64), (1, 672, 1280)] {
                let y = model.logits(&Tensor::full(&[n, 3, h, w], 0.1)).map_err(e2s)?;
                ensure(y.shape() == [n, 5, h, w], || format!("{enc:?}+{dec:?} at {w}x{h}: {:?}", y.shape()))?;
                ensure(y.all_finite(), || format!("{enc:?}+{dec:?} at {w}x{h}: non-finite logits"))?;
            }
            combos += 1;
        }
    }
    Ok(format!(
        "{combos} encoder/decoder pairs give Nx5xHxW at 64x64 and 1280x672, {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn report_formats() -> Outcome {
    let summary =
        CvSummary::new(vec![0.64868, 0.6512, 0.6391, 0.6603, 0.6455].into_iter().map(|v| 100.0 * v).collect())
            .map_err(e2s)?;
    let text = summary.formatted();
    let (mean, std) = text.split_once(" ± ").ok_or_else(|| format!("no ± in `{text}`"))?;
    let three = |s: &str| s.split_once('.').is_some_and(|(i, f)| !i.is_empty() && f.len() == 3);
    ensure(three(mean) && three(std), || format!("`{text}` is not mean ± std to three decimals"))?;
    ensure(text == format!("{:.3} ± {:.3}", summary.mean, summary.std), || text.clone())?;

    let scheme = ClassScheme::default();
    let mut rng = rng(7);
    let pred: Vec<u8> = (0..400).map(|_| rng.random_range(0..5)).collect();
    let truth: Vec<u8> = (0..400).map(|_| rng.random_range(0..5)).collect();
    let cm = ConfusionMatrix::from_masks(5, &pred, &truth).map_err(e2s)?;
    let report = IouReport::new(&cm, &scheme.names(), 1).map_err(e2s)?;
    let expected = ["Sea surface", "Oil spill", "Oil spill look-alike", "Ship", "Land"];
    let csv = report.to_csv();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap_or("")).collect();
    ensure(rows[..5] == expected && rows[5] == "mean" && rows.len() == 6, || format!("csv rows {rows:?}"))?;
    let table = report.to_table();
    let mut at = 0;
    for name in expected.iter().chain(["mean"].iter()) {
        let i = table[at..].find(name).ok_or_else(|| format!("`{name}` missing or out of order in table"))?;
        at += i + name.len();
    }
    Ok(format!("cv renders `{text}`; report rows {} + mean", expected.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("gradient suite", gradient_suite),
        ("convolution oracle", convolution_oracle),
        ("IoU oracle", iou_oracle),
        ("poly schedule", schedule),
        ("cross-entropy loss", loss),
        ("padding", padding),
        ("splits", splits),
        ("toy overfit", toy_overfit),
        ("trajectory reproducibility", trajectory),
        ("end-to-end shapes", shapes),
        ("report formats", report_formats),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
