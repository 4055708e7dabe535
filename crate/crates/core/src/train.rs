//! Offline supervised training of the segmentor and adversarial training of
//! the synthesizer, with per-epoch validation and best/last checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reflect_autograd::{Adam, AdamConfig, Bound, Gradients, ParamSet, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Sample};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::dice;
use crate::parallel;
use crate::segmentor::{argmax_mask, cross_entropy_loss, LabelIntensities, Segmentor};
use crate::synthesizer::Synthesizer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTrainConfig {
    pub epochs: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SynthTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_gen: 1e-3,
            lr_disc: 1e-4,
            batch_size: 4,
            seed: 0,
        }
    }
}

fn check_batch(batch_size: usize, samples: &[Sample]) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    Ok(())
}

/// Gradients of `bound` in parameter order; unreached parameters get zeros.
fn collect_grads<T: Real>(params: &ParamSet<T>, grads: &Gradients<T>, bound: &Bound) -> Vec<Tensor<T>> {
    params
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| match grads.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(p.value.shape().to_vec()),
        })
        .collect()
}

/// Averages per-sample gradients in input order into `params`.
fn install_mean<T: Real>(params: &mut ParamSet<T>, per_sample: Vec<Vec<Tensor<T>>>) {
    let n = per_sample.len();
    let mut iter = per_sample.into_iter();
    let mut total = iter.next().expect("non-empty batch");
    for grads in iter {
        for (acc, g) in total.iter_mut().zip(&grads) {
            acc.add_assign(g);
        }
    }
    let scale = T::lit(1.0 / n as f64);
    for (p, g) in params.iter_mut().zip(total) {
        p.grad = Some(g.scale(scale));
    }
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE9, epoch as u64)));
    order
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpochLog {
    pub epoch: usize,
    /// Mean batch loss; absent for the initial evaluation row.
    pub train_loss: Option<f64>,
    pub val_dice_mean: f64,
    /// Foreground classes `1..k`.
    pub val_dice_per_class: Vec<f64>,
}

pub fn seg_log_csv(log: &[SegEpochLog]) -> String {
    let classes = log.first().map_or(0, |r| r.val_dice_per_class.len());
    let mut out = String::from("epoch,train_loss,val_dice_mean");
    for c in 1..=classes {
        let _ = write!(out, ",val_dice_c{c}");
    }
    out.push('\n');
    for r in log {
        let _ = write!(out, "{},{},{:.6}", r.epoch, fmt_opt(r.train_loss), r.val_dice_mean);
        for d in &r.val_dice_per_class {
            let _ = write!(out, ",{d:.6}");
        }
        out.push('\n');
    }
    out
}

/// Parses a log written by [`seg_log_csv`].
pub fn parse_seg_log(text: &str) -> Result<Vec<SegEpochLog>> {
    let bad = |line: usize| Error::Format(format!("training log line {line}"));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 3 {
                return Err(bad(i + 1));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1));
            Ok(SegEpochLog {
                epoch: f[0].parse().map_err(|_| bad(i + 1))?,
                train_loss: if f[1].is_empty() { None } else { Some(num(f[1])?) },
                val_dice_mean: num(f[2])?,
                val_dice_per_class: f[3..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Mean foreground Dice over a labelled set, and its per-class means.
pub fn evaluate_segmentor(model: &Segmentor<f32>, samples: &[Sample]) -> Result<(f64, Vec<f64>)> {
    let k = model.config.k_classes;
    let scores = parallel::map(samples, |s| {
        let p = model.predict(&s.image)?;
        dice(&argmax_mask(&p), &s.label, k)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if scores.is_empty() {
        return Ok((0.0, vec![0.0; k - 1]));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().map(|d| d.mean).sum::<f64>() / n;
    let per_class = (1..k).map(|c| scores.iter().map(|d| d.per_class[c]).sum::<f64>() / n).collect();
    Ok((mean, per_class))
}

/// Where training writes its artefacts; `None` trains in memory.
#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub best: PathBuf,
    pub last: PathBuf,
    pub log: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            best: dir.join(format!("{stem}_best.ckpt")),
            last: dir.join(format!("{stem}_last.ckpt")),
            log: dir.join(format!("{stem}_log.csv")),
        }
    }
}

pub struct SegTrainOutcome {
    pub best: Segmentor<f32>,
    pub last: Segmentor<f32>,
    pub best_epoch: usize,
    pub log: Vec<SegEpochLog>,
}

/// One optimisation step on `batch`; returns the mean loss.
pub fn segmentor_step(model: &mut Segmentor<f32>, opt: &mut Adam<f32>, batch: &[&Sample]) -> Result<f64> {
    let results = parallel::map(batch, |s| -> Result<(f64, Vec<Tensor<f32>>)> {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let x = tape.constant(s.image.clone());
        let p = model.forward(&mut tape, &bound, x)?;
        let loss = cross_entropy_loss(&mut tape, p, &s.label)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).data()[0] as f64, collect_grads(&model.params, &grads, &bound)))
    });
    let mut total = 0.0;
    let mut per_sample = Vec::with_capacity(batch.len());
    for r in results {
        let (l, g) = r?;
        total += l;
        per_sample.push(g);
    }
    install_mean(&mut model.params, per_sample);
    opt.step(&mut model.params)?;
    model.params.zero_grads();
    Ok(total / batch.len() as f64)
}

/// Trains from `model`, numbering epochs after `history` (empty for a fresh
/// run, whose epoch 0 row is the untrained evaluation). Adam moments start
/// fresh.
pub fn train_segmentor(
    mut model: Segmentor<f32>,
    cfg: &SegTrainConfig,
    train: &[Sample],
    val: &[Sample],
    out: Option<&OutputPaths>,
    mut history: Vec<SegEpochLog>,
) -> Result<SegTrainOutcome> {
    check_batch(cfg.batch_size, train)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &model.params);
    let mut best = model.clone();
    let mut best_score = history.iter().map(|r| r.val_dice_mean).fold(f64::NEG_INFINITY, f64::max);
    let mut best_epoch = history
        .iter()
        .filter(|r| r.val_dice_mean == best_score)
        .map(|r| r.epoch)
        .next()
        .unwrap_or(0);
    let first = match history.last() {
        Some(r) => r.epoch + 1,
        None => 0,
    };
    let epochs = if history.is_empty() { cfg.epochs + 1 } else { cfg.epochs };

    for epoch in first..first + epochs {
        let train_loss = if epoch == 0 {
            None
        } else {
            let order = epoch_order(train.len(), cfg.seed, epoch);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                let loss = segmentor_step(&mut model, &mut opt, &batch)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += loss;
                batches += 1;
            }
            Some(total / batches as f64)
        };
        let (val_dice_mean, val_dice_per_class) = evaluate_segmentor(&model, val)?;
        history.push(SegEpochLog {
            epoch,
            train_loss,
            val_dice_mean,
            val_dice_per_class,
        });
        let improved = val_dice_mean > best_score;
        if improved {
            best_score = val_dice_mean;
            best_epoch = epoch;
            best = model.clone();
        }
        if let Some(paths) = out {
            model.save(&paths.last)?;
            if improved {
                best.save(&paths.best)?;
            }
            io::write_atomic(&paths.log, seg_log_csv(&history).as_bytes())?;
        }
    }
    Ok(SegTrainOutcome {
        best,
        last: model,
        best_epoch,
        log: history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEpochLog {
    pub epoch: usize,
    pub g_loss: Option<f64>,
    pub d_loss: Option<f64>,
    pub val_mae: f64,
}

pub fn synth_log_csv(log: &[SynthEpochLog]) -> String {
    let mut out = String::from("epoch,g_loss,d_loss,val_mae\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{:.6}",
            r.epoch,
            fmt_opt(r.g_loss),
            fmt_opt(r.d_loss),
            r.val_mae
        );
    }
    out
}

pub fn parse_synth_log(text: &str) -> Result<Vec<SynthEpochLog>> {
    let bad = |line: usize| Error::Format(format!("training log line {line}"));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 1));
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(i + 1))
                }
            };
            Ok(SynthEpochLog {
                epoch: f[0].parse().map_err(|_| bad(i + 1))?,
                g_loss: opt(f[1])?,
                d_loss: opt(f[2])?,
                val_mae: f[3].parse().map_err(|_| bad(i + 1))?,
            })
        })
        .collect()
}

/// Conditioning of one training pair: ground-truth heatmap and sketch.
pub struct SynthPair<'a> {
    pub sample: &'a Sample,
    pub heatmap: Tensor<f32>,
    pub sketch: Tensor<f32>,
}

pub fn synth_pairs<'a>(
    synth: &Synthesizer<f32>,
    samples: &'a [Sample],
    g: &LabelIntensities,
) -> Result<Vec<SynthPair<'a>>> {
    let sketches = parallel::map(samples, |s| synth.sketch(&s.image));
    samples
        .iter()
        .zip(sketches)
        .map(|(s, sketch)| {
            Ok(SynthPair {
                sample: s,
                heatmap: g.encode(&s.label),
                sketch: sketch?,
            })
        })
        .collect()
}

/// Mean absolute error of the generator against the true images.
pub fn evaluate_synthesizer(synth: &Synthesizer<f32>, pairs: &[SynthPair<'_>]) -> Result<f64> {
    let maes = parallel::map(pairs, |p| -> Result<f64> {
        let proxy = synth.proxy(&p.heatmap, &p.sketch)?;
        let d = proxy.zip_map(&p.sample.image, |a, b| (a - b).abs())?;
        Ok(d.sum() as f64 / d.numel() as f64)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(if maes.is_empty() { 0.0 } else { maes.iter().sum::<f64>() / maes.len() as f64 })
}

fn mean_sq_error<T: Real>(tape: &mut Tape<T>, x: Var, target: f64) -> Result<Var> {
    let d = tape.add_scalar(x, T::lit(-target))?;
    let d = tape.square(d)?;
    Ok(tape.mean(d)?)
}

/// Per-sample least-squares GAN losses. The discriminator sees a detached
/// fake; the generator is scored by a frozen copy of the discriminator, so a
/// single backward pass of the sum yields both networks' gradients.
fn synth_sample_grads(
    synth: &Synthesizer<f32>,
    pair: &SynthPair<'_>,
) -> Result<(f64, f64, Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let cfg = synth.config;
    let mut tape = Tape::new();
    let gen = synth.generator.bind(&mut tape);
    let disc = synth.discriminator.bind(&mut tape);
    let heat = tape.constant(pair.heatmap.clone());
    let sketch = tape.constant(pair.sketch.clone());
    let real = tape.constant(pair.sample.image.clone());
    let fake = synth.generate(&mut tape, &gen, heat, sketch)?;

    let diff = tape.sub(fake, real)?;
    let diff = tape.abs(diff)?;
    let rec = tape.mean(diff)?;
    let mut g_loss = tape.mul_scalar(rec, cfg.lambda_rec as f32)?;

    let d_real = synth.discriminate(&mut tape, &disc, real, heat, sketch)?;
    let detached = tape.constant(tape.value(fake).clone());
    let d_fake = synth.discriminate(&mut tape, &disc, detached, heat, sketch)?;
    let lr = mean_sq_error(&mut tape, d_real, 1.0)?;
    let lf = mean_sq_error(&mut tape, d_fake, 0.0)?;
    let d_sum = tape.add(lr, lf)?;
    let d_loss = tape.mul_scalar(d_sum, 0.5)?;

    if cfg.lambda_adv > 0.0 {
        let frozen = synth.discriminator.bind_frozen(&mut tape);
        let d_gen = synth.discriminate(&mut tape, &frozen, fake, heat, sketch)?;
        let adv = mean_sq_error(&mut tape, d_gen, 1.0)?;
        let adv = tape.mul_scalar(adv, (0.5 * cfg.lambda_adv) as f32)?;
        g_loss = tape.add(g_loss, adv)?;
    }
    let total = tape.add(g_loss, d_loss)?;
    let grads = tape.backward(total)?;
    Ok((
        tape.value(g_loss).data()[0] as f64,
        tape.value(d_loss).data()[0] as f64,
        collect_grads(&synth.generator, &grads, &gen),
        collect_grads(&synth.discriminator, &grads, &disc),
    ))
}

pub struct SynthTrainOutcome {
    pub best: Synthesizer<f32>,
    pub last: Synthesizer<f32>,
    pub best_epoch: usize,
    pub log: Vec<SynthEpochLog>,
}

/// Least-squares GAN training; each batch updates the generator and the
/// discriminator from the same forward pass. Best checkpoint by lowest
/// validation MAE.
pub fn train_synthesizer(
    mut synth: Synthesizer<f32>,
    cfg: &SynthTrainConfig,
    train: &[Sample],
    val: &[Sample],
    g: &LabelIntensities,
    out: Option<&OutputPaths>,
    mut history: Vec<SynthEpochLog>,
) -> Result<SynthTrainOutcome> {
    check_batch(cfg.batch_size, train)?;
    let train_pairs = synth_pairs(&synth, train, g)?;
    let val_pairs = synth_pairs(&synth, val, g)?;
    let mut gen_opt = Adam::new(AdamConfig::with_lr(cfg.lr_gen), &synth.generator);
    let mut disc_opt = Adam::new(AdamConfig::with_lr(cfg.lr_disc), &synth.discriminator);
    let mut best = synth.clone();
    let mut best_score = history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
    let mut best_epoch = history
        .iter()
        .filter(|r| r.val_mae == best_score)
        .map(|r| r.epoch)
        .next()
        .unwrap_or(0);
    let first = history.last().map_or(0, |r| r.epoch + 1);
    let epochs = if history.is_empty() { cfg.epochs + 1 } else { cfg.epochs };

    for epoch in first..first + epochs {
        let (g_loss, d_loss) = if epoch == 0 {
            (None, None)
        } else {
            let order = epoch_order(train_pairs.len(), cfg.seed, epoch);
            let (mut gt, mut dt, mut batches) = (0.0, 0.0, 0);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&SynthPair<'_>> = chunk.iter().map(|&i| &train_pairs[i]).collect();
                let results = parallel::map(&batch, |p| synth_sample_grads(&synth, p));
                let (mut gs, mut ds) = (Vec::new(), Vec::new());
                let (mut gl, mut dl) = (0.0, 0.0);
                for r in results {
                    let (a, b, gg, dg) = r?;
                    gl += a;
                    dl += b;
                    gs.push(gg);
                    ds.push(dg);
                }
                install_mean(&mut synth.generator, gs);
                install_mean(&mut synth.discriminator, ds);
                gen_opt.step(&mut synth.generator)?;
                disc_opt.step(&mut synth.discriminator)?;
                synth.generator.zero_grads();
                synth.discriminator.zero_grads();
                let n = batch.len() as f64;
                if !(gl / n).is_finite() || !(dl / n).is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                gt += gl / n;
                dt += dl / n;
                batches += 1;
            }
            (Some(gt / batches as f64), Some(dt / batches as f64))
        };
        let val_mae = evaluate_synthesizer(&synth, &val_pairs)?;
        history.push(SynthEpochLog {
            epoch,
            g_loss,
            d_loss,
            val_mae,
        });
        let improved = val_mae < best_score;
        if improved {
            best_score = val_mae;
            best_epoch = epoch;
            best = synth.clone();
        }
        if let Some(paths) = out {
            synth.save(&paths.last)?;
            if improved {
                best.save(&paths.best)?;
            }
            io::write_atomic(&paths.log, synth_log_csv(&history).as_bytes())?;
        }
    }
    Ok(SynthTrainOutcome {
        best,
        last: synth,
        best_epoch,
        log: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seg_log_round_trip() {
        let log = vec![
            SegEpochLog {
                epoch: 0,
                train_loss: None,
                val_dice_mean: 0.25,
                val_dice_per_class: vec![0.5, 0.0],
            },
            SegEpochLog {
                epoch: 1,
                train_loss: Some(0.75),
                val_dice_mean: 0.5,
                val_dice_per_class: vec![0.5, 0.5],
            },
        ];
        let text = seg_log_csv(&log);
        assert!(text.starts_with("epoch,train_loss,val_dice_mean,val_dice_c1,val_dice_c2\n0,,"));
        assert_eq!(parse_seg_log(&text).unwrap(), log);
    }

    #[test]
    fn synth_log_round_trip() {
        let log = vec![SynthEpochLog {
            epoch: 3,
            g_loss: Some(1.5),
            d_loss: Some(0.25),
            val_mae: 0.125,
        }];
        assert_eq!(parse_synth_log(&synth_log_csv(&log)).unwrap(), log);
    }
}
