use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = r#"
[data]
val_fraction = 0.25
target_height = 64
target_width = 64

[model]
output_stride = 8
width = 8
aspp_channels = 16
decoder_channels = 16
low_level_channels = 8
stage_blocks = [1, 1]

[train]
epochs = 3
batch_size = 4
"#;

fn segforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segforge"))
        .args(args)
        .env_remove("SEGFORGE_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = segforge(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = segforge(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&["--out", s(&data), "--seed", "7", "synth", "--n", "8", "--height", "56", "--width", "60"]);
    let config = root.join("toy.toml");
    fs::write(&config, TOY).unwrap();
    Workspace { _dir: dir, root, data, config }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        ok(&["--out", s(out), "--seed", seed, "synth", "--n", "16"]);
    }
    assert_eq!(tree(&a).len(), 32);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn stats_fractions_sum_to_one() {
    let w = workspace();
    let out = ok(&["--data-root", s(&w.data), "--out", s(&w.root.join("st")), "stats"]);
    let total: f64 =
        out.lines().skip(1).take(5).map(|l| l.split_whitespace().last().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-5, "{out}");
    assert!(w.root.join("st/normalization.json").exists());
}

#[test]
fn train_evaluate_predict_round_trip() {
    let w = workspace();
    let run = w.root.join("run");
    let base = ["--config", s(&w.config), "--data-root", s(&w.data)];
    ok(&[&base[..], &["--out", s(&run), "train"]].concat());
    for f in [
        "config.echo",
        "model_summary.json",
        "logs.csv",
        "report.csv",
        "report.json",
        "checkpoints/last.ckpt",
        "checkpoints/best.ckpt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let logs = fs::read_to_string(run.join("logs.csv")).unwrap();
    assert_eq!(logs.lines().count(), 4, "{logs}");

    // Same config and seed: identical logs. The echoed config reproduces the run.
    let again = w.root.join("again");
    ok(&[&base[..], &["--out", s(&again), "train"]].concat());
    assert_eq!(fs::read(run.join("logs.csv")).unwrap(), fs::read(again.join("logs.csv")).unwrap());
    let echoed = w.root.join("echoed");
    ok(&["--config", s(&run.join("config.echo")), "--out", s(&echoed), "train"]);
    assert_eq!(fs::read(run.join("logs.csv")).unwrap(), fs::read(echoed.join("logs.csv")).unwrap());
    assert_eq!(
        fs::read(run.join("checkpoints/last.ckpt")).unwrap(),
        fs::read(echoed.join("checkpoints/last.ckpt")).unwrap()
    );

    let ckpt = run.join("checkpoints/last.ckpt");
    let ev = w.root.join("ev");
    let table = ok(&[&base[..], &["--out", s(&ev), "evaluate", "--checkpoint", s(&ckpt), "--save-masks"]].concat());
    let csv = fs::read_to_string(ev.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["class", "Sea surface", "Oil spill", "Oil spill look-alike", "Ship", "Land", "mean"]);
    assert!(table.contains("mean"));
    assert_eq!(fs::read_dir(ev.join("masks")).unwrap().count(), 8);

    // A model flag that disagrees with the checkpoint is refused with detail.
    let (c, err) = code(&[
        "--encoder",
        "resnet50",
        "--out",
        s(&ev),
        "--data-root",
        s(&w.data),
        "evaluate",
        "--checkpoint",
        s(&ckpt),
    ]);
    assert_eq!(c, 5, "{err}");
    assert!(err.contains("encoder"), "{err}");

    let image = w.data.join("images/synth_0000.png");
    let pr = w.root.join("pr");
    ok(&[&base[..], &["--out", s(&pr), "--crop-back", "predict", "--checkpoint", s(&ckpt), s(&image)]].concat());
    let mask = image::open(pr.join("masks/synth_0000.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (60, 56));
    let pr2 = w.root.join("pr2");
    ok(&[&base[..], &["--out", s(&pr2), "predict", "--checkpoint", s(&ckpt), s(&image)]].concat());
    let mask = image::open(pr2.join("masks/synth_0000.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (64, 64));
}

#[test]
fn resume_matches_straight_run() {
    let w = workspace();
    let base = ["--config", s(&w.config), "--data-root", s(&w.data), "--deterministic"];
    let (full, part) = (w.root.join("full"), w.root.join("part"));
    ok(&[&base[..], &["--out", s(&full), "train"]].concat());
    ok(&[&base[..], &["--out", s(&part), "train", "--stop-at-epoch", "1"]].concat());
    let ckpt = part.join("checkpoints/last.ckpt");
    let resumed = w.root.join("resumed");
    ok(&[&base[..], &["--out", s(&resumed), "train", "--resume", s(&ckpt)]].concat());
    assert_eq!(
        fs::read(full.join("checkpoints/last.ckpt")).unwrap(),
        fs::read(resumed.join("checkpoints/last.ckpt")).unwrap()
    );
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let w = workspace();
    let run = w.root.join("zero");
    ok(&["--config", s(&w.config), "--data-root", s(&w.data), "--out", s(&run), "--epochs", "0", "train"]);
    let ckpts: Vec<_> = fs::read_dir(run.join("checkpoints")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(ckpts, ["last.ckpt"]);
    assert_eq!(fs::read_to_string(run.join("logs.csv")).unwrap().lines().count(), 1);
}

#[test]
fn cross_validate_prints_mean_and_std() {
    let w = workspace();
    let cv = w.root.join("cv");
    let out = ok(&[
        "--config",
        s(&w.config),
        "--data-root",
        s(&w.data),
        "--out",
        s(&cv),
        "--epochs",
        "1",
        "cross-validate",
        "--folds",
        "2",
    ]);
    let line = out.lines().find(|l| l.contains(" ± ")).unwrap_or_else(|| panic!("{out}"));
    let summary = line.rsplit(": ").next().unwrap().trim();
    let (m, sd) = summary.split_once(" ± ").unwrap();
    assert!(m.split('.').nth(1).unwrap().len() == 3 && sd.split('.').nth(1).unwrap().len() == 3, "{line}");
    assert!(cv.join("folds/fold1.csv").exists() && cv.join("folds/fold2.json").exists());
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("images")).unwrap();
    fs::create_dir_all(empty.join("masks")).unwrap();
    assert_eq!(code(&["--data-root", s(&empty), "--out", s(&out), "stats"]).0, 3);
    assert_eq!(code(&["--lr0=-1", "--data-root", s(&empty), "--out", s(&out), "train"]).0, 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let (c, err) = code(&["--config", s(&bad), "stats"]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("epoch"));
    assert_eq!(code(&["--data-root", s(&dir.path().join("missing")), "--out", s(&out), "stats"]).0, 6);
    assert_eq!(code(&["--out", s(&out), "evaluate", "--checkpoint", s(&bad)]).0, 5);
}

#[test]
fn env_out_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (flag, env) = (dir.path().join("flag"), dir.path().join("env"));
    let out = Command::new(env!("CARGO_BIN_EXE_segforge"))
        .args(["--out", s(&flag), "synth", "--n", "2"])
        .env("SEGFORGE_OUT", &env)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env.join("images").exists() && !flag.exists());
}

#[test]
fn gradcheck_and_summary() {
    let out = ok(&["gradcheck", "--instances", "3"]);
    assert!(out.contains("model: deeplabv3+ tiny") && !out.contains("FAIL"), "{out}");
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["--encoder", "resnet50", "--out", s(dir.path()), "summary", "--height", "64", "--width", "64"]);
    assert!(out.contains("resnet50") || out.contains("ResNet-50"), "{out}");
    assert!(dir.path().join("model_summary.json").exists());
}
