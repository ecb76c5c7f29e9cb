//! One PASS/FAIL line per acceptance criterion.
//!
//! Runs without the libtest harness: criteria execute one after another, so
//! timing budgets are measured on an otherwise idle process, and the report
//! is printed whether or not output capture is on.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use wavenet_core::audio::standardize;
use wavenet_core::dataset::{
    batches, builtin_tasks, make_split, parse_manifest, task_by_name, RawLabel, Sample, SplitPolicy,
};
use wavenet_core::gradcheck::{self, KINDS, TOLERANCE};
use wavenet_core::nn::head::softmax;
use wavenet_core::nn::weights::write_weights;
use wavenet_core::nn::Padding;
use wavenet_core::optim::{Adam, AdamConfig};
use wavenet_core::synth::{generate, SynthSpec};
use wavenet_core::trainer::{evaluate, init_model, load_examples, train, EvalReport, Example, TrainConfig, Workers};
use wavenet_core::{Error, HeadKind, LayerSpec, Model, ModelConfig, Tensor, Variant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn cases(n: u32) -> PropConfig {
    PropConfig {
        cases: n,
        failure_persistence: None,
        ..PropConfig::default()
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, budget {limit:?}"))?;
    Ok(took)
}

fn weight_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights(model, &mut buf).unwrap();
    buf
}

fn parameter_counts() -> Outcome {
    let started = Instant::now();
    let mut detail = Vec::new();
    for (variant, paper, exact) in [
        (Variant::WithInception, 302_000.0, 299_690),
        (Variant::WithoutInception, 540_000.0, 537_720),
    ] {
        let count = ModelConfig::table1(variant, 10, HeadKind::GlobalAverage)
            .and_then(|c| c.param_count())
            .map_err(|e| e.to_string())?;
        ensure(count == exact, || format!("{variant}: {count} != symbolic {exact}"))?;
        let off = (count as f64 - paper).abs() / paper;
        ensure(off <= 0.02, || format!("{variant}: {count} is {:.2}% from {paper}", off * 100.0))?;
        detail.push(format!("{variant} {count} ({:+.2}%)", (count as f64 - paper) / paper * 100.0));
    }
    let took = within(Duration::from_secs(1), started)?;
    Ok(format!("{} in {took:.2?}", detail.join(", ")))
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for kind in KINDS {
        let row = gradcheck::check(kind, 0).map_err(|e| format!("{kind}: {e}"))?;
        ensure(row.passed(), || {
            format!("{kind}: max rel err {:.3e}, {} skipped", row.max_rel_err, row.skipped)
        })?;
        worst = worst.max(row.max_rel_err);
    }
    let took = within(Duration::from_secs(120), started)?;
    Ok(format!("{} kinds, worst {worst:.2e} < {TOLERANCE:e}, {took:.2?}", KINDS.len()))
}

/// Expected shapes from first principles: "same" gives `ceil(n/s)`, valid pooling `(n-k)/s + 1`.
fn analytic(layers: &[LayerSpec], mut shape: Vec<usize>, out: &mut Vec<(&'static str, Vec<usize>)>) -> Vec<usize> {
    let same = |n: usize, s: usize| n.div_ceil(s);
    let valid = |n: usize, k: usize, s: usize| (n - k) / s + 1;
    for layer in layers {
        let slot = out.len();
        out.push((layer.kind(), Vec::new()));
        shape = match layer {
            LayerSpec::Conv1d { channels, stride, padding, .. } => {
                assert_eq!(*padding, Padding::Same);
                vec![*channels, same(shape[1], *stride)]
            }
            LayerSpec::Conv2d { channels, stride, padding, .. } => {
                assert_eq!(*padding, Padding::Same);
                vec![*channels, same(shape[1], stride[0]), same(shape[2], stride[1])]
            }
            LayerSpec::MaxPool1d { kernel, stride } => vec![shape[0], valid(shape[1], *kernel, *stride)],
            LayerSpec::MaxPool2d { kernel, stride } => vec![
                shape[0],
                valid(shape[1], kernel[0], stride[0]),
                valid(shape[2], kernel[1], stride[1]),
            ],
            LayerSpec::Relu => shape,
            LayerSpec::InceptionNucleus { branches } => {
                let outs: Vec<Vec<usize>> = branches.iter().map(|b| analytic(b, shape.clone(), out)).collect();
                vec![outs.iter().map(|o| o[0]).sum(), outs[0][1]]
            }
            LayerSpec::ReshapeChannelsFirst => vec![1, shape[0], shape[1]],
            LayerSpec::ClassHead => vec![shape[0]],
            LayerSpec::Dense { units } => vec![*units],
        };
        out[slot].1 = shape.clone();
    }
    shape
}

fn shape_propagation() -> Outcome {
    let mut checked = 0;
    for variant in [Variant::WithInception, Variant::WithoutInception] {
        let config = ModelConfig::table1(variant, 10, HeadKind::GlobalAverage).map_err(|e| e.to_string())?;
        let mut expected = Vec::new();
        let last = analytic(&config.layers, vec![1, 8000], &mut expected);
        ensure(last == [10], || format!("{variant}: analytic output {last:?}"))?;
        let steps = config.propagate().map_err(|e| e.to_string())?;
        ensure(steps.len() == expected.len(), || format!("{variant}: {} steps vs {}", steps.len(), expected.len()))?;
        for (step, (kind, shape)) in steps.iter().zip(&expected) {
            ensure(step.kind == *kind && step.output == *shape, || {
                format!("{variant} layer {} ({}): {:?}, formula says {shape:?}", step.index, step.kind, step.output)
            })?;
        }
        let model = init_model(config, 0).map_err(|e| e.to_string())?;
        let y = model.forward(&Tensor::zeros(&[8000])).map_err(|e| e.to_string())?;
        ensure(y.shape() == [10], || format!("{variant}: forward gives {:?}", y.shape()))?;
        checked += steps.len();
    }
    let broken = vec![
        LayerSpec::conv1d(8, 80, 4),
        LayerSpec::Relu,
        LayerSpec::MaxPool1d { kernel: 4000, stride: 1 },
        LayerSpec::ClassHead,
    ];
    match ModelConfig::custom(broken, 8) {
        Err(Error::Layer { index: 2, kind: "maxpool1d", .. }) => {}
        other => return Err(format!("oversized pool not pinpointed: {other:?}")),
    }
    Ok(format!("{checked} layer shapes match, bad layer reported by index"))
}

fn synthetic_end_to_end() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SynthSpec::tones(3, 200, 0.3, 11);
    generate(&spec, dir.path()).map_err(|e| e.to_string())?;
    let samples = parse_manifest(dir.path().join("manifest.csv")).map_err(|e| e.to_string())?;
    ensure(samples.len() == 600, || format!("{} clips", samples.len()))?;
    let task = task_by_name("three_class").map_err(|e| e.to_string())?;
    let config = TrainConfig {
        variant: Variant::WithInception,
        task: task.name.clone(),
        // desk budget: one core, so small batches and a livelier step size
        batch_size: 8,
        lr: 3e-3,
        max_epochs: 2,
        seed: 11,
        ..TrainConfig::default()
    };
    let split = make_split(&samples, &task, &config.split, config.seed, config.test_fraction).map_err(|e| e.to_string())?;
    let train_set = load_examples(&split.train).map_err(|e| e.to_string())?;
    let test_set = load_examples(&split.test).map_err(|e| e.to_string())?;
    let mut model = init_model(config.model_config(3).map_err(|e| e.to_string())?, config.seed).map_err(|e| e.to_string())?;
    let history = train(&config, &mut model, &train_set, None).map_err(|e| e.to_string())?;
    let report = evaluate(&model, &test_set, &task, &Workers::new(1).unwrap()).map_err(|e| e.to_string())?;
    let constant = EvalReport::from_predictions(&task, "constant", &vec![0; test_set.len()], &test_set)
        .map_err(|e| e.to_string())?;
    let took = within(Duration::from_secs(600), started)?;
    ensure(report.overall_acc >= 95.0, || format!("held-out accuracy {:.2}%", report.overall_acc))?;
    ensure(history.epochs.len() <= 50, || format!("{} epochs", history.epochs.len()))?;
    ensure((constant.overall_acc - 100.0 / 3.0).abs() < 0.005, || {
        format!("constant predictor {:.2}%", constant.overall_acc)
    })?;
    Ok(format!(
        "{:.2}% on {} held-out clips after {} epochs in {:.0?}; constant predictor {:.2}% (chance {:.2}%)",
        report.overall_acc,
        test_set.len(),
        history.epochs.len(),
        took,
        constant.overall_acc,
        report.chance
    ))
}

fn tone_examples(classes: usize, per_class: usize, seed: u64) -> Vec<Example> {
    let dir = tempfile::tempdir().unwrap();
    generate(&SynthSpec::tones(classes, per_class, 0.1, seed), dir.path()).unwrap();
    let samples = parse_manifest(dir.path().join("manifest.csv")).unwrap();
    let task = if classes == 2 { "canonical_vs_noncanonical" } else { "three_class" };
    let task = task_by_name(task).unwrap();
    let labeled = task.apply(&samples);
    load_examples(&labeled).unwrap()
}

fn overfit_one_batch() -> Outcome {
    let data: Vec<Example> = {
        let all = tone_examples(3, 1, 1);
        all.into_iter().take(2).collect()
    };
    let classes: Vec<usize> = data.iter().map(|e| e.class).collect();
    ensure(data.len() == 2 && classes[0] != classes[1], || format!("toy set classes {classes:?}"))?;
    let config = TrainConfig {
        batch_size: 2,
        max_epochs: 200,
        lambda: 0.0,
        tolerance: 0.0,
        patience: usize::MAX,
        ..TrainConfig::default()
    };
    let table1 = ModelConfig::table1(Variant::WithoutInception, 3, HeadKind::GlobalAverage).unwrap();
    let mut model = init_model(table1, 0).map_err(|e| e.to_string())?;
    let history = train(&config, &mut model, &data, None).map_err(|e| e.to_string())?;
    let hit = history.epochs.iter().find(|e| e.loss < 0.01);
    match hit {
        Some(e) => Ok(format!("loss {:.2e} at epoch {}", e.loss, e.epoch)),
        None => Err(format!("final loss {:.3e}", history.epochs.last().map_or(f64::NAN, |e| e.loss))),
    }
}

fn determinism() -> Outcome {
    let data = tone_examples(3, 4, 5);
    let run = || {
        let config = TrainConfig {
            variant: Variant::WithoutInception,
            batch_size: 4,
            max_epochs: 3,
            seed: 7,
            threads: 1,
            ..TrainConfig::default()
        };
        let mut model = init_model(config.model_config(3).unwrap(), config.seed).unwrap();
        let mut log = Vec::new();
        train(&config, &mut model, &data, Some(&mut log)).unwrap();
        (log, weight_bytes(&model))
    };
    let (log_a, w_a) = run();
    let (log_b, w_b) = run();
    ensure(!log_a.is_empty(), || "empty run log".into())?;
    ensure(log_a == log_b, || "run logs differ".into())?;
    ensure(w_a == w_b, || "weights differ".into())?;
    Ok(format!("{} log bytes and {} weight bytes identical", log_a.len(), w_a.len()))
}

fn manifest_strategy() -> impl Strategy<Value = Vec<Sample>> {
    prop::collection::vec((0..5usize, 0..4usize, 0..6usize), 1..80).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (label, age, family))| Sample {
                clip_path: format!("clip{i}.wav").into(),
                raw_label: RawLabel::ALL[label],
                age_months: [3, 6, 9, 18][age],
                family_id: format!("F{family:02}"),
            })
            .collect()
    })
}

fn split_hygiene() -> Outcome {
    let tasks = builtin_tasks();
    let mut runner = TestRunner::new(cases(256));
    runner
        .run(&(manifest_strategy(), 0..tasks.len(), any::<u64>()), |(samples, t, seed)| {
            let task = &tasks[t];
            let labeled = task.apply(&samples);
            let mut fams: Vec<&String> = labeled.iter().map(|l| &l.sample.family_id).collect();
            fams.sort();
            fams.dedup();
            for fam in fams {
                let split = make_split(&samples, task, &SplitPolicy::LeaveOneFamilyOut(fam.clone()), seed, 0.2).unwrap();
                prop_assert!(split.test.iter().all(|l| &l.sample.family_id == fam));
                prop_assert!(split.train.iter().all(|l| &l.sample.family_id != fam));
                prop_assert_eq!(split.train.len() + split.test.len(), labeled.len());
            }
            Ok(())
        })
        .map_err(|e| format!("lofo: {e}"))?;
    runner
        .run(&(0..300usize, 1..40usize, any::<u64>(), 0..50u64), |(n, bs, seed, epoch)| {
            let b = batches(n, bs, seed, epoch);
            let mut seen: Vec<usize> = b.concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= bs));
            prop_assert!(b.iter().rev().skip(1).all(|x| x.len() == bs));
            Ok(())
        })
        .map_err(|e| format!("batches: {e}"))?;
    Ok("256 random manifests x every family; 256 epoch permutations".into())
}

fn numeric_invariants() -> Outcome {
    let mut runner = TestRunner::new(cases(256));
    runner
        .run(
            &(prop::collection::vec(-30.0f32..30.0, 2..12), -50.0f32..50.0),
            |(logits, shift)| {
                let p = softmax(&logits).unwrap();
                let sum: f64 = p.iter().map(|&v| f64::from(v)).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6, "sum {}", sum);
                // shifting f32 logits rounds them, so invariance is checked in f64
                let wide: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
                let shifted: Vec<f64> = wide.iter().map(|v| v + f64::from(shift)).collect();
                let (a, b) = (softmax(&wide).unwrap(), softmax(&shifted).unwrap());
                prop_assert!(a.iter().zip(&b).all(|(a, b)| (a - b).abs() <= 1e-12));
                Ok(())
            },
        )
        .map_err(|e| format!("softmax: {e}"))?;
    runner
        .run(
            &(prop::collection::vec(-1.0f32..1.0, 8000), -100.0f32..100.0, 0.01f32..50.0),
            |(noise, offset, scale)| {
                let mut x: Vec<f32> = noise.iter().map(|v| offset + scale * v).collect();
                standardize(&mut x);
                let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / x.len() as f64;
                prop_assert!(mean.abs() < 1e-5, "mean {}", mean);
                Ok(())
            },
        )
        .map_err(|e| format!("standardize: {e}"))?;

    let mut model = init_model(ModelConfig::table1(Variant::WithoutInception, 3, HeadKind::GlobalAverage).unwrap(), 2)
        .map_err(|e| e.to_string())?;
    let before = weight_bytes(&model);
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let zeros: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let mut adam = Adam::new(AdamConfig::default(), shapes.iter().map(Vec::as_slice));
    for _ in 0..5 {
        adam.step(model.params_mut(), &zeros).map_err(|e| e.to_string())?;
    }
    ensure(weight_bytes(&model) == before, || "adam moved parameters under zero gradients".into())?;

    let data = tone_examples(3, 2, 9);
    let task = task_by_name("three_class").unwrap();
    evaluate(&model, &data, &task, &Workers::new(2).unwrap()).map_err(|e| e.to_string())?;
    ensure(weight_bytes(&model) == before, || "evaluation changed the weights".into())?;
    Ok("softmax sum/shift, standardized mean, zero-gradient adam, read-only evaluation".into())
}

fn task_taxonomy() -> Outcome {
    let tasks = builtin_tasks();
    let got: Vec<(String, String)> = tasks.iter().map(|t| (t.name.clone(), format!("{:.2}", t.chance_percent()))).collect();
    let want = [
        ("infant_vs_adult", "50.00"),
        ("vocalization_vs_nonvocalization", "50.00"),
        ("canonical_vs_noncanonical", "50.00"),
        ("ids_vs_ads", "50.00"),
        ("three_class", "33.33"),
        ("four_class", "25.00"),
        ("five_class", "20.00"),
    ];
    let want: Vec<(String, String)> = want.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    ensure(got == want, || format!("{got:?}"))?;
    Ok(got.iter().map(|(_, c)| c.as_str()).collect::<Vec<_>>().join("/"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("parameter-count fidelity", parameter_counts),
        ("gradient correctness", gradient_correctness),
        ("shape propagation", shape_propagation),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("overfit one batch", overfit_one_batch),
        ("determinism", determinism),
        ("split hygiene", split_hygiene),
        ("numeric invariants", numeric_invariants),
        ("task taxonomy", task_taxonomy),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed.len(), failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
