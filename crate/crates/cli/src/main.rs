//! `reflect-tta`: data generation, offline training, test-time adaptation,
//! evaluation and gradient checks.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
//! 3 I/O or data error, 4 training diverged, 5 adaptation aborted under
//! `--strict`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reflect_autograd::FaultInjection;
use reflect_tta::data::{build_manifest, load_split, Sample, Split};
use reflect_tta::gradcheck::{run_suite, Module};
use reflect_tta::io::{save_mask, write_atomic};
use reflect_tta::metrics::{aggregate, metrics_csv, score, ImageMetrics};
use reflect_tta::reflect::{adapt_dataset, curve_csv, summarize};
use reflect_tta::segmentor::argmax_mask;
use reflect_tta::train::{
    parse_seg_log, parse_synth_log, train_segmentor, train_synthesizer, OutputPaths,
};
use reflect_tta::{parallel, Error, LabelIntensities, LabelMask, LossKind, RunConfig, Segmentor, Synthesizer};
use serde_json::json;

#[derive(Parser)]
#[command(name = "reflect-tta", version, about = "Reflective test-time adaptation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for every output file.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; defaults to the configured count.
    #[arg(long, env = "REFLECT_TTA_THREADS")]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Structural,
    L1,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifests.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides the data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the segmentor on the source-domain train split.
    TrainSeg(TrainArgs),
    /// Train the synthesizer on the source-domain train split.
    TrainSynth(TrainArgs),
    /// Adapt on every image of a split and score the final masks.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seg_ckpt: PathBuf,
        #[arg(long)]
        synth_ckpt: PathBuf,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// Exit with code 5 if any episode aborts on a non-finite loss.
        #[arg(long)]
        strict: bool,
    },
    /// Score the unadapted segmentor on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seg_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// One of autodiff, segmentor, synthesizer, similarity, pipeline.
        #[arg(long)]
        module: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scales the named op's backward rule; for testing the harness.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from the last checkpoint and log in the run directory.
    #[arg(long)]
    resume: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Gen(_) => 2,
        Error::Diverged { .. } => 4,
        Error::Adapt { .. } => 5,
        _ => 3,
    }
}

/// Loads the configuration, applies the worker override, validates and
/// echoes the effective result into the run directory.
fn prepare(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    edit(&mut cfg);
    cfg.validate()?;
    fs::create_dir_all(&common.out)?;
    write_atomic(&common.out.join("config.json"), cfg.to_json().as_bytes())?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn gen_data(common: &Common, seed: Option<u64>) -> Result<(), Error> {
    let cfg = prepare(common, |c| {
        if let Some(s) = seed {
            c.data.seed = s;
        }
    })?;
    let manifests = parallel::with_workers(cfg.workers, || build_manifest(&common.out, &cfg.data))?;
    for m in &manifests {
        println!("{}: {} scenes", m.split.name(), m.items.len());
    }
    Ok(())
}

fn train_seg(args: &TrainArgs) -> Result<(), Error> {
    let cfg = prepare(&args.common, |c| {
        if let Some(e) = args.epochs {
            c.train_segmentor.epochs = e;
        }
    })?;
    let paths = OutputPaths::in_dir(&args.common.out, "seg");
    let (model, history) = if args.resume && paths.last.exists() {
        let history = parse_seg_log(&fs::read_to_string(&paths.log)?)?;
        (Segmentor::load(cfg.segmentor, &paths.last)?, history)
    } else {
        (Segmentor::new(cfg.segmentor, cfg.model_seed)?, Vec::new())
    };
    let train = load_split(&args.data, Split::Train)?;
    let val = load_split(&args.data, Split::Val)?;
    let outcome = parallel::with_workers(cfg.workers, || {
        train_segmentor(model, &cfg.train_segmentor, &train, &val, Some(&paths), history)
    })?;
    for r in &outcome.log {
        let loss = r.train_loss.map_or("-".into(), |l| format!("{l:.4}"));
        println!("epoch {:>3}  loss {loss:>8}  val dice {:.4}", r.epoch, r.val_dice_mean);
    }
    println!("best epoch {} -> {}", outcome.best_epoch, paths.best.display());
    Ok(())
}

fn train_synth(args: &TrainArgs) -> Result<(), Error> {
    let cfg = prepare(&args.common, |c| {
        if let Some(e) = args.epochs {
            c.train_synthesizer.epochs = e;
        }
    })?;
    let paths = OutputPaths::in_dir(&args.common.out, "synth");
    let (model, history) = if args.resume && paths.last.exists() {
        let history = parse_synth_log(&fs::read_to_string(&paths.log)?)?;
        (Synthesizer::load(cfg.synthesizer, &paths.last)?, history)
    } else {
        (Synthesizer::new(cfg.synthesizer, cfg.model_seed)?, Vec::new())
    };
    let g = LabelIntensities::evenly_spaced(cfg.segmentor.k_classes)?;
    let train = load_split(&args.data, Split::Train)?;
    let val = load_split(&args.data, Split::Val)?;
    let outcome = parallel::with_workers(cfg.workers, || {
        train_synthesizer(model, &cfg.train_synthesizer, &train, &val, &g, Some(&paths), history)
    })?;
    for r in &outcome.log {
        let f = |v: Option<f64>| v.map_or("-".into(), |l| format!("{l:.4}"));
        println!(
            "epoch {:>3}  g {:>8}  d {:>8}  val mae {:.4}",
            r.epoch,
            f(r.g_loss),
            f(r.d_loss),
            r.val_mae
        );
    }
    println!("best epoch {} -> {}", outcome.best_epoch, paths.best.display());
    Ok(())
}

/// Final masks under `masks/`, per-class scores in `metrics.csv`.
fn write_masks_and_metrics(out: &Path, samples: &[Sample], masks: &[LabelMask], k: usize) -> Result<Vec<ImageMetrics>, Error> {
    let dir = out.join("masks");
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (s, m) in samples.iter().zip(masks) {
        save_mask(&dir.join(format!("{}.pgm", s.id)), m)?;
        rows.push(score(&s.id, m, &s.label, k)?);
    }
    write_atomic(&out.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    Ok(rows)
}

fn print_table(rows: &[ImageMetrics]) {
    let t = aggregate(rows);
    let show = |s: Option<reflect_tta::metrics::Summary>| s.map_or("-".into(), |s| s.display());
    println!("images {}  dice {}  hd {}", t.images, show(t.dice_mean), show(t.hd_mean));
    for (c, (d, h)) in t.dice_per_class.iter().zip(&t.hd_per_class).enumerate() {
        println!("  class {}  dice {}  hd {}", c + 1, show(*d), show(*h));
    }
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    common: &Common,
    seg_ckpt: &Path,
    synth_ckpt: &Path,
    data: &Path,
    split: Split,
    steps: Option<usize>,
    loss: Option<LossArg>,
    strict: bool,
) -> Result<(), Error> {
    let cfg = prepare(common, |c| {
        if let Some(s) = steps {
            c.adapt.steps = s;
        }
        match loss {
            Some(LossArg::Structural) => c.similarity.loss = LossKind::Structural,
            Some(LossArg::L1) => c.similarity.loss = LossKind::L1,
            None => {}
        }
    })?;
    let seg = Segmentor::load(cfg.segmentor, seg_ckpt)?;
    let synth = Synthesizer::load(cfg.synthesizer, synth_ckpt)?;
    let g = LabelIntensities::evenly_spaced(cfg.segmentor.k_classes)?;
    let samples = load_split(data, split)?;
    let results = parallel::with_workers(cfg.workers, || {
        adapt_dataset(&seg, &synth, &samples, &cfg.adapt, &cfg.similarity, &g)
    });

    let mut reports = Vec::new();
    let mut done = Vec::new();
    let mut failed = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(rep) => {
                reports.push(rep);
                done.push(s.clone());
            }
            Err(e) => {
                eprintln!("{}: {e}", s.id);
                failed.push(s.id.clone());
            }
        }
    }
    let k = cfg.segmentor.k_classes;
    write_atomic(&common.out.join("curve.csv"), curve_csv(&reports, k).as_bytes())?;
    let masks: Vec<LabelMask> = reports.iter().map(|r| r.final_mask.clone()).collect();
    let rows = write_masks_and_metrics(&common.out, &done, &masks, k)?;
    let summary = summarize(&reports, failed);
    write_json(
        &common.out.join("summary.json"),
        &json!({ "adaptation": summary, "final": aggregate(&rows) }),
    )?;

    for s in &summary.per_step {
        let d = s.dice.map_or("-".into(), |d| format!("{:.4}", d.mean));
        let l = s.loss.map_or("-".into(), |l| format!("{:.4}", l.mean));
        println!("step {:>2}  loss {l}  dice {d}", s.step);
    }
    print_table(&rows);
    if !summary.diverged.is_empty() {
        eprintln!("episodes aborted on a non-finite loss: {}", summary.diverged.join(", "));
        if strict {
            let step = reports.iter().find_map(|r| r.diverged_at).unwrap_or(0);
            return Err(Error::Adapt { step });
        }
    }
    Ok(())
}

fn eval(common: &Common, seg_ckpt: &Path, data: &Path, split: Split) -> Result<(), Error> {
    let cfg = prepare(common, |_| {})?;
    let seg = Segmentor::load(cfg.segmentor, seg_ckpt)?;
    let samples = load_split(data, split)?;
    let masks = parallel::with_workers(cfg.workers, || {
        parallel::map(&samples, |s| seg.predict(&s.image).map(|p| argmax_mask(&p)))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let rows = write_masks_and_metrics(&common.out, &samples, &masks, cfg.segmentor.k_classes)?;
    write_json(&common.out.join("summary.json"), &json!({ "final": aggregate(&rows) }))?;
    print_table(&rows);
    Ok(())
}

fn gradcheck(modules: &[String], seed: u64, fault: Option<String>) -> Result<bool, Error> {
    let modules = modules
        .iter()
        .filter(|m| m.as_str() != "all")
        .map(|m| m.parse::<Module>())
        .collect::<Result<Vec<_>, _>>()?;
    let fault = fault.map(|op| FaultInjection { op, scale: 1.5 });
    let results = run_suite(&modules, seed, fault)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<12} {:<32} max rel error {:.3e}  (tol {:.0e}, {} checked)  {verdict}",
            r.module.name(),
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.checked
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(true)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(false)
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::GenData { common, seed } => gen_data(&common, seed)?,
        Command::TrainSeg(args) => train_seg(&args)?,
        Command::TrainSynth(args) => train_synth(&args)?,
        Command::Adapt {
            common,
            seg_ckpt,
            synth_ckpt,
            data,
            split,
            steps,
            loss,
            strict,
        } => adapt(&common, &seg_ckpt, &synth_ckpt, &data, split.into(), steps, loss, strict)?,
        Command::Eval {
            common,
            seg_ckpt,
            data,
            split,
        } => eval(&common, &seg_ckpt, &data, split.into())?,
        Command::Gradcheck {
            module,
            seed,
            inject_fault,
        } => {
            if !gradcheck(&module, seed, inject_fault)? {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
