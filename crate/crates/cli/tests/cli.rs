use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reflect-tta"));
    c.env_remove("REFLECT_TTA_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

const SMALL: &str = r#"{
  "data": {
    "scene": { "height": 32, "width": 32, "radius": [4.0, 7.0], "ring_thickness": [2.0, 4.0], "center_jitter": 3.0 },
    "counts": { "train": 4, "val": 2, "test": 3 },
    "seed": 5
  },
  "segmentor": { "base_channels": 4, "depth": 2 },
  "synthesizer": { "gen_base_channels": 4, "gen_depth": 2, "disc_base_channels": 4 },
  "train_segmentor": { "epochs": 1, "batch_size": 2 },
  "train_synthesizer": { "epochs": 1, "batch_size": 2 },
  "adapt": { "steps": 2 }
}"#;

fn setup(dir: &Path) -> String {
    let cfg = dir.join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    cfg.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_and_filters() {
    let o = run(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.contains("conv2d") && out.contains("ncc_loss"));

    let o = run(&["gradcheck", "--module", "similarity"]);
    assert_eq!(code(&o), 0);
    let out = text(&o.stdout);
    assert!(out.lines().filter(|l| l.contains("max rel error")).all(|l| l.starts_with("similarity")));
    assert!(out.contains("mi_parzen"));
}

#[test]
fn injected_fault_fails_naming_the_op() {
    let o = run(&["gradcheck", "--module", "autodiff", "--inject-fault", "conv2d"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("conv2d"));
}

#[test]
fn unknown_module_is_a_config_error() {
    assert_eq!(code(&run(&["gradcheck", "--module", "nope"])), 2);
}

#[test]
fn gen_data_is_reproducible_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["gen-data", "--config", &cfg, "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    }
    for f in ["train.json", "val.json", "test.json", "test/test_0002.pgm", "train/train_0000_label.pgm"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let echoed = fs::read_to_string(a.join("config.json")).unwrap();
    assert!(echoed.contains("\"workers\": 1"));
    assert!(echoed.contains("\"height\": 32"));

    let c = dir.path().join("c");
    run(&["gen-data", "--config", &cfg, "--out", s(&c), "--seed", "99"]);
    assert_ne!(fs::read(a.join("test/test_0000.pgm")).unwrap(), fs::read(c.join("test/test_0000.pgm")).unwrap());
}

#[test]
fn bad_config_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"adapt\": {\n    \"stepz\": 1\n  }\n}").unwrap();
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("line 3"));
    fs::write(&cfg, "{ \"segmentor\": { \"k_classes\": 4 } }").unwrap();
    assert_eq!(code(&run(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("o"))])), 2);
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let data = dir.path().join("data");
    run(&["gen-data", "--config", &cfg, "--out", s(&data)]);
    let o = run(&[
        "eval", "--config", &cfg, "--seg-ckpt", "/nonexistent.ckpt", "--data", s(&data), "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn full_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let p = |n: &str| dir.path().join(n);
    let data = p("data");
    assert_eq!(code(&run(&["gen-data", "--config", &cfg, "--out", s(&data)])), 0);

    let o = run(&["train-seg", "--config", &cfg, "--data", s(&data), "--out", s(&p("seg")), "--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let log = fs::read_to_string(p("seg/seg_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(p("seg/seg_best.ckpt").exists() && p("seg/seg_last.ckpt").exists());
    let o = run(&["train-seg", "--config", &cfg, "--data", s(&data), "--out", s(&p("seg")), "--resume"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let log = fs::read_to_string(p("seg/seg_log.csv")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("1,"), "{log}");

    let o = run(&["train-synth", "--config", &cfg, "--data", s(&data), "--out", s(&p("synth"))]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(fs::read_to_string(p("synth/synth_log.csv")).unwrap().lines().count(), 3);

    let seg = p("seg/seg_best.ckpt");
    let synth = p("synth/synth_best.ckpt");
    let o = run(&["eval", "--config", &cfg, "--seg-ckpt", s(&seg), "--data", s(&data), "--out", s(&p("eval"))]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let adapt = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "adapt", "--config", &cfg, "--seg-ckpt", s(&seg), "--synth-ckpt", s(&synth), "--data", s(&data),
            "--out",
        ];
        let out = p(out);
        args.push(s(&out));
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    };
    adapt("zero", &["--steps", "0"]);
    assert_eq!(
        fs::read(p("zero/metrics.csv")).unwrap(),
        fs::read(p("eval/metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(p("zero/masks/test_0001.pgm")).unwrap(),
        fs::read(p("eval/masks/test_0001.pgm")).unwrap()
    );

    adapt("two", &["--workers", "2"]);
    let curve = fs::read_to_string(p("two/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3 * 3);
    assert!(curve.starts_with("image_id,step,loss,ncc,mi,dice_mean,dice_c1,dice_c2,ms_per_step\n"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("two/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["adaptation"]["images"], 3);
    adapt("one", &["--workers", "1"]);
    assert_eq!(fs::read(p("one/metrics.csv")).unwrap(), fs::read(p("two/metrics.csv")).unwrap());

    adapt("l1", &["--loss", "l1", "--steps", "1"]);
    let curve = fs::read_to_string(p("l1/curve.csv")).unwrap();
    assert!(curve.lines().nth(1).unwrap().contains(",,,"));
}
