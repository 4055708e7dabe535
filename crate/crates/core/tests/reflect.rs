use reflect_autograd::Tape;
use reflect_tta::data::*;
use reflect_tta::reflect::*;
use reflect_tta::segmentor::{argmax_mask, heatmap_from_probs};
use reflect_tta::similarity::reflective_loss;
use reflect_tta::*;

struct Fixture {
    seg: Segmentor<f32>,
    synth: Synthesizer<f32>,
    samples: Vec<data::Sample>,
    g: LabelIntensities,
}

fn fixture() -> Fixture {
    let data = DataConfig {
        scene: SceneSpec {
            height: 32,
            width: 32,
            radius: (4.0, 7.0),
            ring_thickness: (2.0, 4.0),
            center_jitter: 3.0,
            ..SceneSpec::default()
        },
        counts: SplitCounts { train: 0, val: 0, test: 4 },
        seed: 11,
        ..DataConfig::default()
    };
    let seg_cfg = SegmentorConfig {
        base_channels: 4,
        depth: 2,
        ..SegmentorConfig::default()
    };
    let synth_cfg = SynthConfig {
        gen_base_channels: 4,
        gen_depth: 2,
        disc_base_channels: 4,
        ..SynthConfig::default()
    };
    Fixture {
        seg: Segmentor::new(seg_cfg, 1).unwrap(),
        synth: Synthesizer::new(synth_cfg, 2).unwrap(),
        samples: data.generate_split(Split::Test).unwrap(),
        g: LabelIntensities::evenly_spaced(3).unwrap(),
    }
}

fn run(f: &Fixture, samples: &[data::Sample], cfg: &AdaptConfig) -> Vec<AdaptReport> {
    adapt_dataset(&f.seg, &f.synth, samples, cfg, &SimilarityConfig::default(), &f.g)
        .into_iter()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn degenerate_loops_reproduce_the_baseline() {
    let f = fixture();
    let baseline: Vec<LabelMask> = f.samples.iter().map(|s| argmax_mask(&f.seg.predict(&s.image).unwrap())).collect();
    let zero_steps = run(&f, &f.samples, &AdaptConfig { steps: 0, ..Default::default() });
    let zero_lr = run(
        &f,
        &f.samples,
        &AdaptConfig {
            lr_seg: 0.0,
            lr_synth: 0.0,
            ..Default::default()
        },
    );
    for i in 0..f.samples.len() {
        assert_eq!(zero_steps[i].final_mask, baseline[i]);
        assert_eq!(zero_steps[i].steps.len(), 1);
        assert_eq!(zero_lr[i].final_mask, baseline[i]);
        assert_eq!(zero_lr[i].steps.len(), 11);
        let first = zero_lr[i].first().loss;
        assert!(zero_lr[i].steps.iter().all(|s| s.loss == first));
        assert_eq!(zero_lr[i].first().dice, zero_steps[i].first().dice);
    }
}

#[test]
fn episodes_are_order_independent() {
    let f = fixture();
    let cfg = AdaptConfig { steps: 3, ..Default::default() };
    let forward = run(&f, &f.samples, &cfg);
    let mut reversed: Vec<data::Sample> = f.samples.clone();
    reversed.reverse();
    let backward = run(&f, &reversed, &cfg);
    for (a, b) in forward.iter().zip(backward.iter().rev()) {
        assert_eq!(a.image_id, b.image_id);
        assert!(a.same_trajectory(b));
    }
    let alone = adapt_image(&f.seg, &f.synth, &f.samples[2], &cfg, &SimilarityConfig::default(), &f.g).unwrap();
    assert!(alone.same_trajectory(&forward[2]));
}

#[test]
fn continual_mode_carries_weights_forward() {
    let f = fixture();
    let cfg = AdaptConfig {
        steps: 2,
        lr_seg: 1e-3,
        reset_per_image: false,
        ..Default::default()
    };
    let continual = run(&f, &f.samples, &cfg);
    let episodic = run(&f, &f.samples, &AdaptConfig { reset_per_image: true, ..cfg });
    assert!(continual[0].same_trajectory(&episodic[0]));
    assert_ne!(continual[1].first().loss, episodic[1].first().loss);
}

#[test]
fn reported_loss_matches_offline_recomputation() {
    let f = fixture();
    let sim = SimilarityConfig::default();
    let cfg = AdaptConfig { steps: 4, lr_seg: 1e-3, lr_synth: 1e-3, ..Default::default() };
    let s = &f.samples[0];
    let sketch = f.synth.sketch(&s.image).unwrap();
    let mut recomputed = Vec::new();
    let mut hook = |_: usize, seg: &Segmentor<f32>, synth: &Synthesizer<f32>| {
        let mut tape = Tape::new();
        let sb = seg.params.bind_frozen(&mut tape);
        let gb = synth.generator.bind_frozen(&mut tape);
        let x = tape.constant(s.image.clone());
        let sk = tape.constant(sketch.clone());
        let p = seg.forward(&mut tape, &sb, x).unwrap();
        let h = heatmap_from_probs(&mut tape, p, &f.g).unwrap();
        let proxy = synth.generate(&mut tape, &gb, h, sk).unwrap();
        let terms = reflective_loss(&mut tape, x, proxy, h, &sim).unwrap();
        recomputed.push(tape.value(terms.total).data()[0] as f64);
    };
    let (mut seg, mut synth) = (f.seg.clone(), f.synth.clone());
    let report = adapt_in_place(&mut seg, &mut synth, &s.id, &s.image, Some(&s.label), &cfg, &sim, &f.g, Some(&mut hook)).unwrap();
    assert_eq!(recomputed.len(), 5);
    for (r, want) in report.steps.iter().zip(&recomputed) {
        assert!((r.loss - want).abs() < 1e-5, "{} vs {want}", r.loss);
        assert!(r.ncc.is_some() && r.mi.is_some());
        assert!((r.ncc.unwrap() + r.mi.unwrap() - r.loss).abs() < 1e-5);
    }
    assert!(report.steps.windows(2).any(|w| w[0].loss != w[1].loss));
    for (a, b) in f.seg.params.iter().zip(seg.params.iter()) {
        assert_ne!(a.value, b.value);
    }
    for (a, b) in f.synth.discriminator.iter().zip(synth.discriminator.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn adaptation_leaves_caller_models_untouched() {
    let f = fixture();
    let before = f.seg.params.clone();
    run(&f, &f.samples[..1], &AdaptConfig { steps: 2, lr_seg: 1e-2, ..Default::default() });
    for (a, b) in before.iter().zip(f.seg.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn curve_and_summary() {
    let f = fixture();
    let reports = run(&f, &f.samples, &AdaptConfig { steps: 2, ..Default::default() });
    let csv = curve_csv(&reports, 3);
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    assert_eq!(csv.lines().next().unwrap(), "image_id,step,loss,ncc,mi,dice_mean,dice_c1,dice_c2,ms_per_step");
    let sum = summarize(&reports, vec!["x".into()]);
    assert_eq!(sum.per_step.len(), 3);
    assert_eq!(sum.images, 4);
    assert_eq!(sum.failed, vec!["x".to_string()]);
    let d0: Vec<f64> = reports.iter().map(|r| r.first().dice.as_ref().unwrap().mean).collect();
    assert!((sum.per_step[0].dice.unwrap().mean - d0.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    assert!(reports.iter().all(|r| r.check().is_ok()));
    assert!(summarize(&[], vec![]).per_step.is_empty());
}

#[test]
fn unlabelled_or_unscored_runs_skip_dice() {
    let f = fixture();
    let cfg = AdaptConfig { steps: 1, record_dice: false, ..Default::default() };
    let r = adapt_image(&f.seg, &f.synth, &f.samples[0], &cfg, &SimilarityConfig::default(), &f.g).unwrap();
    assert!(r.steps.iter().all(|s| s.dice.is_none() && s.hd.is_none()));
}

#[test]
fn invalid_inputs_are_rejected() {
    let f = fixture();
    let bad = AdaptConfig { lr_seg: -1.0, ..Default::default() };
    assert!(adapt_image(&f.seg, &f.synth, &f.samples[0], &bad, &SimilarityConfig::default(), &f.g).is_err());
    let mut odd = f.samples[0].clone();
    odd.image = reflect_autograd::Tensor::zeros([1, 1, 30, 30]);
    assert!(adapt_image(&f.seg, &f.synth, &odd, &AdaptConfig::default(), &SimilarityConfig::default(), &f.g).is_err());
}
