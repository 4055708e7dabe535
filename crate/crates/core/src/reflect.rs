//! Per-image reflective adaptation: segment, render the heatmap, synthesise
//! a proxy, score it against the input and update both networks.

use std::fmt::Write as _;
use std::time::Instant;

use reflect_autograd::{Adam, AdamConfig, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::metrics::{dice, hausdorff_all, DiceResult, Summary};
use crate::parallel;
use crate::segmentor::{argmax_mask, heatmap_from_probs, LabelIntensities, ProbMap, Segmentor};
use crate::similarity::{reflective_loss, SimilarityConfig};
use crate::synthesizer::Synthesizer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr_seg: f64,
    pub lr_synth: f64,
    /// Run each image on fresh copies of the trained models.
    pub reset_per_image: bool,
    /// Score every step against the label when one is available.
    pub record_dice: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            lr_seg: 1e-4,
            lr_synth: 1e-4,
            reset_per_image: true,
            record_dice: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_seg >= 0.0) || !(self.lr_synth >= 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be >= 0, got {} and {}",
                self.lr_seg, self.lr_synth
            )));
        }
        Ok(())
    }
}

/// State of the models before update `step` (step 0 is the trained model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub ncc: Option<f64>,
    pub mi: Option<f64>,
    pub dice: Option<DiceResult>,
    /// Mean foreground Hausdorff distance.
    pub hd: Option<f64>,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub image_id: String,
    pub steps: Vec<StepRecord>,
    /// Step at which the loss stopped being finite, if it did.
    pub diverged_at: Option<usize>,
    pub final_mask: LabelMask,
}

impl AdaptReport {
    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &AdaptReport) -> bool {
        let strip = |r: &AdaptReport| {
            let mut r = r.clone();
            r.steps.iter_mut().for_each(|s| s.ms = 0.0);
            r
        };
        strip(self) == strip(other)
    }

    pub fn check(&self) -> Result<()> {
        match self.diverged_at {
            Some(step) => Err(Error::Adapt { step }),
            None => Ok(()),
        }
    }

    pub fn first(&self) -> &StepRecord {
        &self.steps[0]
    }

    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("step 0 is always recorded")
    }
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::Tensor(reflect_autograd::Error::Numeric { .. }))
}

/// Observer called with the models at each recorded step.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &Segmentor<f32>, &Synthesizer<f32>);

/// Adapts `seg` and `synth` in place on one image.
#[allow(clippy::too_many_arguments)]
pub fn adapt_in_place(
    seg: &mut Segmentor<f32>,
    synth: &mut Synthesizer<f32>,
    image_id: &str,
    image: &Tensor<f32>,
    label: Option<&LabelMask>,
    cfg: &AdaptConfig,
    sim: &SimilarityConfig,
    g: &LabelIntensities,
    mut hook: Option<StepHook<'_>>,
) -> Result<AdaptReport> {
    cfg.validate()?;
    let [_, _, h, w] = image.dims4()?;
    seg.check_extent(h, w)?;
    let k = seg.config.k_classes;
    let sketch = synth.sketch(image)?;
    let mut seg_opt = Adam::new(AdamConfig::with_lr(cfg.lr_seg), &seg.params);
    let mut gen_opt = Adam::new(AdamConfig::with_lr(cfg.lr_synth), &synth.generator);
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let mut final_mask = None;
    let mut diverged_at = None;

    for t in 0..=cfg.steps {
        let start = Instant::now();
        if let Some(hook) = hook.as_deref_mut() {
            hook(t, seg, synth);
        }
        let mut tape = Tape::new();
        let seg_vars = seg.params.bind(&mut tape);
        let gen_vars = synth.generator.bind(&mut tape);
        let x = tape.constant(image.clone());
        let sk = tape.constant(sketch.clone());
        let step = (|| -> Result<_> {
            let probs = seg.forward(&mut tape, &seg_vars, x)?;
            let heat = heatmap_from_probs(&mut tape, probs, g)?;
            let proxy = synth.generate(&mut tape, &gen_vars, heat, sk)?;
            let terms = reflective_loss(&mut tape, x, proxy, heat, sim)?;
            Ok((probs, terms))
        })();
        let (probs, terms) = match step {
            Ok(v) => v,
            Err(e) if is_numeric(&e) => {
                diverged_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        let mask = argmax_mask(&ProbMap::new(tape.value(probs).clone())?);
        let scalar = |v: reflect_autograd::Var| tape.value(v).data()[0] as f64;
        let (dice_t, hd_t) = match label.filter(|_| cfg.record_dice) {
            Some(l) => (Some(dice(&mask, l, k)?), Some(hausdorff_all(&mask, l, k, None)?.mean)),
            None => (None, None),
        };
        let mut record = StepRecord {
            step: t,
            loss: scalar(terms.total),
            ncc: terms.ncc.map(scalar),
            mi: terms.mi.map(scalar),
            dice: dice_t,
            hd: hd_t,
            ms: 0.0,
        };
        final_mask = Some(mask);
        if t < cfg.steps {
            let grads = tape.backward(terms.total)?;
            seg.params.zero_grads();
            synth.generator.zero_grads();
            seg.params.accumulate(&grads, &seg_vars);
            synth.generator.accumulate(&grads, &gen_vars);
            seg_opt.step(&mut seg.params)?;
            gen_opt.step(&mut synth.generator)?;
            seg.params.zero_grads();
            synth.generator.zero_grads();
        }
        record.ms = start.elapsed().as_secs_f64() * 1e3;
        records.push(record);
    }

    let final_mask = match final_mask {
        Some(m) => m,
        // Diverged before producing any mask: fall back to the plain
        // forward pass of the untouched model.
        None => argmax_mask(&seg.predict(image)?),
    };
    Ok(AdaptReport {
        image_id: image_id.to_string(),
        steps: records,
        diverged_at,
        final_mask,
    })
}

/// Adapts on private copies; the caller's models are left untouched.
pub fn adapt_image(
    seg: &Segmentor<f32>,
    synth: &Synthesizer<f32>,
    sample: &Sample,
    cfg: &AdaptConfig,
    sim: &SimilarityConfig,
    g: &LabelIntensities,
) -> Result<AdaptReport> {
    let (mut seg, mut synth) = (seg.clone(), synth.clone());
    adapt_in_place(
        &mut seg,
        &mut synth,
        &sample.id,
        &sample.image,
        Some(&sample.label),
        cfg,
        sim,
        g,
        None,
    )
}

/// Runs every sample. With `reset_per_image` episodes are independent and
/// may run in parallel; otherwise they run in order on shared models.
pub fn adapt_dataset(
    seg: &Segmentor<f32>,
    synth: &Synthesizer<f32>,
    samples: &[Sample],
    cfg: &AdaptConfig,
    sim: &SimilarityConfig,
    g: &LabelIntensities,
) -> Vec<Result<AdaptReport>> {
    if cfg.reset_per_image {
        return parallel::map(samples, |s| adapt_image(seg, synth, s, cfg, sim, g));
    }
    let (mut seg, mut synth) = (seg.clone(), synth.clone());
    samples
        .iter()
        .map(|s| {
            adapt_in_place(&mut seg, &mut synth, &s.id, &s.image, Some(&s.label), cfg, sim, g, None)
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `image_id,step,loss,ncc,mi,dice_mean,dice_c1..,ms_per_step`, one row per
/// recorded step. Dice columns cover the foreground classes.
pub fn curve_csv(reports: &[AdaptReport], k: usize) -> String {
    let mut out = String::from("image_id,step,loss,ncc,mi,dice_mean");
    for c in 1..k {
        let _ = write!(out, ",dice_c{c}");
    }
    out.push_str(",ms_per_step\n");
    for r in reports {
        for s in &r.steps {
            let _ = write!(
                out,
                "{},{},{:.6},{},{},{}",
                r.image_id,
                s.step,
                s.loss,
                opt(s.ncc),
                opt(s.mi),
                opt(s.dice.as_ref().map(|d| d.mean))
            );
            for c in 1..k {
                let _ = write!(out, ",{}", opt(s.dice.as_ref().map(|d| d.per_class[c])));
            }
            let _ = writeln!(out, ",{:.3}", s.ms);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub loss: Option<Summary>,
    pub dice: Option<Summary>,
    pub hd: Option<Summary>,
    pub ms: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub images: usize,
    pub failed: Vec<String>,
    pub diverged: Vec<String>,
    pub per_step: Vec<StepSummary>,
}

/// Mean/std over images at every step. Images missing a step (diverged
/// runs) are left out of that step.
pub fn summarize(reports: &[AdaptReport], failed: Vec<String>) -> AdaptSummary {
    let depth = reports.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    let per_step = (0..depth)
        .map(|t| {
            let at: Vec<&StepRecord> = reports.iter().filter_map(|r| r.steps.get(t)).collect();
            let col = |f: &dyn Fn(&StepRecord) -> Option<f64>| {
                Summary::of(&at.iter().filter_map(|s| f(s)).collect::<Vec<_>>())
            };
            StepSummary {
                step: t,
                loss: col(&|s| Some(s.loss)),
                dice: col(&|s| s.dice.as_ref().map(|d| d.mean)),
                hd: col(&|s| s.hd),
                ms: col(&|s| Some(s.ms)),
            }
        })
        .collect();
    AdaptSummary {
        images: reports.len(),
        failed,
        diverged: reports
            .iter()
            .filter(|r| r.diverged_at.is_some())
            .map(|r| r.image_id.clone())
            .collect(),
        per_step,
    }
}
