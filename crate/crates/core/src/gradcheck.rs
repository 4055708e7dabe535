//! Finite-difference verification suite covering every differentiable op
//! and loss used by the pipeline, in 64-bit precision.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflect_autograd::gradcheck::{check, relative_error, uniform, GradCheckOptions, GradCheckReport};
use reflect_autograd::{Activation, FaultInjection, ParamSet, Reduction, Tape, Tensor, Var};

use crate::data::{generate_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::segmentor::{cross_entropy_loss, heatmap_from_probs, LabelIntensities, Segmentor, SegmentorConfig};
use crate::similarity::{apply_attention, mi_loss, mi_parzen, ncc_loss, reflective_loss, SimilarityConfig};
use crate::synthesizer::{SynthConfig, Synthesizer};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Module {
    Autodiff,
    Segmentor,
    Synthesizer,
    Similarity,
    Pipeline,
}

impl Module {
    pub const ALL: [Module; 5] = [
        Module::Autodiff,
        Module::Segmentor,
        Module::Synthesizer,
        Module::Similarity,
        Module::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Autodiff => "autodiff",
            Module::Segmentor => "segmentor",
            Module::Synthesizer => "synthesizer",
            Module::Similarity => "similarity",
            Module::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: Module,
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> reflect_autograd::Result<Var>>;

struct Case {
    module: Module,
    name: &'static str,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    f: CheckFn,
}

fn lift<T>(r: Result<T>) -> reflect_autograd::Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => reflect_autograd::Error::State(other.to_string()),
    })
}

/// Uniform in [-1, 1] with values near zero pushed away from the kinks of
/// relu-like functions.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng).map(|x| if x.abs() < 0.05 { x + 0.1f64.copysign(x) } else { x })
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let m = Module::Autodiff;
    let t = OP_TOLERANCE;
    let a = uniform(&[2, 3, 4], -1.0, 1.0, rng);
    let b = uniform(&[2, 3, 4], -1.0, 1.0, rng);
    let pos = uniform(&[2, 3, 4], 0.5, 1.5, rng);
    let row = uniform(&[1, 4], 0.5, 1.5, rng);
    let kinked = away_from_zero(&[1, 2, 4, 4], rng);
    let img = uniform(&[2, 3, 6, 6], -1.0, 1.0, rng);
    let kernel = uniform(&[4, 3, 3, 3], -1.0, 1.0, rng);
    let bias = uniform(&[4], -1.0, 1.0, rng);
    let odd = uniform(&[1, 3, 7, 7], -1.0, 1.0, rng);
    let small = uniform(&[1, 2, 3, 3], -1.0, 1.0, rng);
    let even = uniform(&[1, 2, 4, 6], -1.0, 1.0, rng);
    let other = uniform(&[1, 3, 4, 6], -1.0, 1.0, rng);
    let logits = uniform(&[1, 3, 2, 2], -1.0, 1.0, rng);
    let case = |name, inputs: Vec<Tensor<f64>>, f: CheckFn| Case {
        module: m,
        name,
        tolerance: t,
        inputs,
        f,
    };
    let mut cases = vec![
        case("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        case("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        case("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        case("div", vec![a.clone(), pos.clone()], Box::new(|t, v| t.div(v[0], v[1]))),
        case("mul_broadcast", vec![a.clone(), row.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        case("div_broadcast", vec![a.clone(), row], Box::new(|t, v| t.div(v[0], v[1]))),
        case("add_scalar", vec![a.clone()], Box::new(|t, v| t.add_scalar(v[0], 0.7))),
        case("mul_scalar", vec![a.clone()], Box::new(|t, v| t.mul_scalar(v[0], -1.3))),
        case("div_scalar", vec![a.clone()], Box::new(|t, v| t.div_scalar(v[0], 255.0))),
        case("square", vec![a.clone()], Box::new(|t, v| t.square(v[0]))),
        case("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        case("abs", vec![kinked.clone()], Box::new(|t, v| t.abs(v[0]))),
        case("log_clamped", vec![pos], Box::new(|t, v| t.log_clamped(v[0], 1e-7))),
        case("conv2d", vec![img.clone(), kernel.clone(), bias.clone()], Box::new(|t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        })),
        case("conv2d_strided", vec![odd, kernel, bias], Box::new(|t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        })),
        case("upsample_nearest2x", vec![small.clone()], Box::new(|t, v| t.upsample_nearest2x(v[0]))),
        case("avg_pool2x", vec![even.clone()], Box::new(|t, v| t.avg_pool2x(v[0]))),
        case("concat_channels", vec![even, other], Box::new(|t, v| t.concat_channels(v[0], v[1]))),
        case("pad_replicate", vec![small.clone()], Box::new(|t, v| t.pad_replicate_to_multiple(v[0], 4))),
        case("softmax_channels", vec![logits], Box::new(|t, v| t.softmax_channels(v[0]))),
        case("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        case("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        case("reduce_mean_axes", vec![a], Box::new(|t, v| t.reduce(Reduction::Mean, v[0], &[0, 2]))),
    ];
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LEAKY),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        cases.push(case(name, vec![kinked.clone()], Box::new(move |t, v| t.activation(kind, v[0]))));
    }
    cases
}

fn tiny_segmentor(seed: u64) -> Segmentor<f64> {
    let cfg = SegmentorConfig {
        k_classes: 3,
        base_channels: 4,
        depth: 2,
        input_channels: 1,
    };
    Segmentor::new(cfg, seed).expect("valid config")
}

fn tiny_synth(seed: u64) -> Synthesizer<f64> {
    let cfg = SynthConfig {
        gen_base_channels: 4,
        gen_depth: 2,
        disc_base_channels: 4,
        ..SynthConfig::default()
    };
    Synthesizer::new(cfg, seed).expect("valid config")
}

fn toy_scene(seed: u64) -> (Tensor<f64>, crate::mask::LabelMask) {
    let spec = SceneSpec {
        height: 16,
        width: 16,
        radius: (3.0, 4.0),
        ring_thickness: (2.0, 3.0),
        center_jitter: 1.0,
        ..SceneSpec::default()
    };
    let (img, label) = generate_scene(&spec, seed).expect("toy scene");
    (img.cast(), label)
}

fn model_cases(rng: &mut ChaCha8Rng, seed: u64) -> Vec<Case> {
    let g = LabelIntensities::evenly_spaced(3).expect("k = 3");
    let (image, _) = toy_scene(seed);
    let logits = uniform(&[1, 3, 4, 4], -2.0, 2.0, rng);
    let heat = uniform(&[1, 1, 8, 8], 0.0, 255.0, rng);
    let sketch = Tensor::from_fn([1, 1, 8, 8], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let seg = tiny_segmentor(seed);
    let synth = tiny_synth(seed);
    let synth2 = synth.clone();
    let g2 = g.clone();
    let label4 = crate::mask::LabelMask::new(4, 4, (0..16).map(|i| (i % 3) as u8).collect()).expect("4x4");
    let disc_img = uniform(&[1, 1, 16, 16], 0.0, 1.0, rng);
    let disc_heat = uniform(&[1, 1, 16, 16], 0.0, 255.0, rng);
    let disc_sketch = Tensor::from_fn([1, 1, 16, 16], |i| ((i * 5) % 4 == 0) as u8 as f64);
    let synth3 = synth.clone();
    vec![
        Case {
            module: Module::Segmentor,
            name: "heatmap_from_logits",
            tolerance: OP_TOLERANCE,
            inputs: vec![logits.clone()],
            f: Box::new(move |t, v| {
                let p = t.softmax_channels(v[0])?;
                lift(heatmap_from_probs(t, p, &g))
            }),
        },
        Case {
            module: Module::Segmentor,
            name: "cross_entropy",
            tolerance: OP_TOLERANCE,
            inputs: vec![logits],
            f: Box::new(move |t, v| {
                let p = t.softmax_channels(v[0])?;
                lift(cross_entropy_loss(t, p, &label4))
            }),
        },
        Case {
            module: Module::Segmentor,
            name: "segmentor_heatmap_wrt_image",
            tolerance: OP_TOLERANCE,
            inputs: vec![image],
            f: Box::new(move |t, v| {
                let bound = seg.params.bind_frozen(t);
                let p = lift(seg.forward(t, &bound, v[0]))?;
                lift(heatmap_from_probs(t, p, &g2))
            }),
        },
        Case {
            module: Module::Synthesizer,
            name: "generator_wrt_heatmap",
            tolerance: OP_TOLERANCE,
            inputs: vec![heat],
            f: Box::new(move |t, v| {
                let bound = synth.generator.bind_frozen(t);
                let s = t.constant(sketch.clone());
                lift(synth.generate(t, &bound, v[0], s))
            }),
        },
        Case {
            module: Module::Synthesizer,
            name: "discriminator_wrt_inputs",
            tolerance: OP_TOLERANCE,
            inputs: vec![disc_img, disc_heat],
            f: Box::new(move |t, v| {
                let bound = synth2.discriminator.bind_frozen(t);
                let s = t.constant(disc_sketch.clone());
                lift(synth2.discriminate(t, &bound, v[0], v[1], s))
            }),
        },
        Case {
            module: Module::Synthesizer,
            name: "proxy_sum_wrt_heatmap_16",
            tolerance: OP_TOLERANCE,
            inputs: vec![uniform(&[1, 1, 16, 16], 0.0, 255.0, rng)],
            f: Box::new(move |t, v| {
                let bound = synth3.generator.bind_frozen(t);
                let s = t.constant(Tensor::zeros([1, 1, 16, 16]));
                let y = lift(synth3.generate(t, &bound, v[0], s))?;
                t.sum(y)
            }),
        },
    ]
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let cfg = SimilarityConfig::default();
    let m = Module::Similarity;
    let a18 = uniform(&[1, 1, 18, 18], 0.0, 1.0, rng);
    let b18 = uniform(&[1, 1, 18, 18], 0.0, 1.0, rng);
    let a8 = uniform(&[1, 1, 8, 8], 0.0, 1.0, rng);
    let b8 = uniform(&[1, 1, 8, 8], 0.0, 1.0, rng);
    let a16 = uniform(&[1, 1, 16, 16], 0.0, 1.0, rng);
    let b16 = uniform(&[1, 1, 16, 16], 0.0, 1.0, rng);
    let h16 = uniform(&[1, 1, 16, 16], 0.0, 255.0, rng);
    let img = uniform(&[1, 1, 5, 5], -1.0, 1.0, rng);
    let heat = uniform(&[1, 1, 5, 5], 0.0, 255.0, rng);
    let a16c = a16.clone();
    let h16c = h16.clone();
    vec![
        Case {
            module: m,
            name: "ncc_loss",
            tolerance: LOSS_TOLERANCE,
            inputs: vec![a18, b18],
            f: Box::new(move |t, v| lift(ncc_loss(t, v[0], v[1], &cfg))),
        },
        Case {
            module: m,
            name: "mi_parzen",
            tolerance: LOSS_TOLERANCE,
            inputs: vec![a8.clone(), b8.clone()],
            f: Box::new(move |t, v| lift(mi_parzen(t, v[0], v[1], &cfg))),
        },
        Case {
            module: m,
            name: "mi_loss",
            tolerance: LOSS_TOLERANCE,
            inputs: vec![a8, b8],
            f: Box::new(move |t, v| lift(mi_loss(t, v[0], v[1], &cfg))),
        },
        Case {
            module: m,
            name: "apply_attention",
            tolerance: OP_TOLERANCE,
            inputs: vec![img, heat],
            f: Box::new(|t, v| lift(apply_attention(t, v[0], v[1]))),
        },
        Case {
            module: m,
            name: "reflective_loss_wrt_proxy",
            tolerance: LOSS_TOLERANCE,
            inputs: vec![b16.clone()],
            f: Box::new(move |t, v| {
                let a = t.constant(a16.clone());
                let h = t.constant(h16.clone());
                Ok(lift(reflective_loss(t, a, v[0], h, &cfg))?.total)
            }),
        },
        Case {
            module: m,
            name: "reflective_loss_wrt_heatmap",
            tolerance: LOSS_TOLERANCE,
            inputs: vec![h16c],
            f: Box::new(move |t, v| {
                let a = t.constant(a16c.clone());
                let b = t.constant(b16.clone());
                Ok(lift(reflective_loss(t, a, b, v[0], &cfg))?.total)
            }),
        },
    ]
}

/// Reflective loss of the full segment-synthesise-compare chain.
fn pipeline_loss(
    tape: &mut Tape<f64>,
    seg: &Segmentor<f64>,
    synth: &Synthesizer<f64>,
    image: &Tensor<f64>,
    sketch: &Tensor<f64>,
    g: &LabelIntensities,
) -> Result<(Var, reflect_autograd::Bound, reflect_autograd::Bound)> {
    let sb = seg.params.bind(tape);
    let gb = synth.generator.bind(tape);
    let x = tape.constant(image.clone());
    let s = tape.constant(sketch.clone());
    let p = seg.forward(tape, &sb, x)?;
    let h = heatmap_from_probs(tape, p, g)?;
    let proxy = synth.generate(tape, &gb, h, s)?;
    let loss = reflective_loss(tape, x, proxy, h, &SimilarityConfig::default())?;
    Ok((loss.total, sb, gb))
}

/// Finite differences of the full pipeline loss at `count` randomly chosen
/// parameter elements of the segmentor and generator.
pub fn pipeline_check(seed: u64, count: usize, fault: Option<FaultInjection>) -> Result<GradCheckReport> {
    let g = LabelIntensities::evenly_spaced(3)?;
    let (image, _) = toy_scene(seed);
    let seg = tiny_segmentor(seed);
    let synth = tiny_synth(seed.wrapping_add(1));
    let sketch = synth.sketch(&image)?;

    let mut tape = Tape::with_fault(fault);
    let (loss, sb, gb) = pipeline_loss(&mut tape, &seg, &synth, &image, &sketch, &g)?;
    let grads = tape.backward(loss)?;

    let sizes: Vec<(usize, usize, usize)> = seg
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| (0, i, p.value.numel()))
        .chain(synth.generator.iter().enumerate().map(|(i, p)| (1, i, p.value.numel())))
        .collect();
    let total: usize = sizes.iter().map(|s| s.2).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9A7E);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let step = 1e-4;
    let eval = |seg: &Segmentor<f64>, synth: &Synthesizer<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _, _) = pipeline_loss(&mut t, seg, synth, &image, &sketch, &g)?;
        Ok(t.value(l).data()[0])
    };
    for flat in sample(&mut rng, total, count.min(total)).into_vec() {
        let mut offset = flat;
        let &(which, idx, _) = sizes
            .iter()
            .find(|s| {
                if offset < s.2 {
                    true
                } else {
                    offset -= s.2;
                    false
                }
            })
            .expect("index within total");
        let (set, vars): (&ParamSet<f64>, _) = if which == 0 { (&seg.params, &sb) } else { (&synth.generator, &gb) };
        let analytic = grads
            .get(vars.vars()[idx])
            .map_or(0.0, |t| t.data()[offset]);
        let orig = set.iter().nth(idx).expect("param").value.data()[offset];
        let mut values = [0.0; 2];
        for (slot, delta) in values.iter_mut().zip([step, -step]) {
            let (mut s2, mut y2) = (seg.clone(), synth.clone());
            let target = if which == 0 { &mut s2.params } else { &mut y2.generator };
            let p = target.iter_mut().nth(idx).expect("param");
            p.value.data_mut()[offset] = orig + delta;
            *slot = eval(&s2, &y2)?;
        }
        let numeric = (values[0] - values[1]) / (2.0 * step);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric, 1e-6));
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        report.checked += 1;
    }
    Ok(report)
}

/// Runs the checks of the selected modules (all when `modules` is empty).
/// `fault` corrupts the named op's backward rule in every analytic pass.
pub fn run_suite(modules: &[Module], seed: u64, fault: Option<FaultInjection>) -> Result<Vec<CheckResult>> {
    let wanted = |m: Module| modules.is_empty() || modules.contains(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    if wanted(Module::Autodiff) {
        cases.extend(op_cases(&mut rng));
    }
    if wanted(Module::Segmentor) || wanted(Module::Synthesizer) {
        cases.extend(model_cases(&mut rng, seed).into_iter().filter(|c| wanted(c.module)));
    }
    if wanted(Module::Similarity) {
        cases.extend(loss_cases(&mut rng));
    }
    let opts = GradCheckOptions {
        seed: rng.random(),
        fault: fault.clone(),
        max_elements: Some(64),
        ..GradCheckOptions::default()
    };
    let mut out = Vec::with_capacity(cases.len() + 1);
    for case in cases {
        let report = check(&case.inputs, &case.f, &opts)?;
        out.push(CheckResult {
            module: case.module,
            name: case.name.to_string(),
            max_rel_error: report.max_rel_error,
            tolerance: case.tolerance,
            checked: report.checked,
        });
    }
    if wanted(Module::Pipeline) {
        let report = pipeline_check(seed, 20, fault)?;
        out.push(CheckResult {
            module: Module::Pipeline,
            name: "reflective_pipeline_params".into(),
            max_rel_error: report.max_rel_error,
            tolerance: LOSS_TOLERANCE,
            checked: report.checked,
        });
    }
    Ok(out)
}
