//! Mini-batch training, evaluation reports and the leave-one-family-out sweep.
//!
//! Per-sample forward/backward passes may run on a worker pool, but their
//! gradients are always summed in batch order, so results do not depend on
//! the thread count.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::load_clip;
use crate::dataset::{batches, stratified_mask, Labeled, SplitPolicy, TaskSpec, AGES};
use crate::error::{Error, Result};
use crate::nn::head::softmax_xent;
use crate::nn::{Gradients, HeadKind, Model, ModelConfig, ParamRole, Variant};
use crate::optim::{l2_penalty, Adam, AdamConfig, ConvergenceMonitor};
use crate::tensor::Tensor;

/// A model-ready clip with its task class and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Tensor<f32>,
    pub class: usize,
    pub age_months: u32,
    pub family_id: String,
}

impl Example {
    pub fn new(samples: Vec<f32>, labeled: &Labeled) -> Result<Self> {
        Ok(Example {
            input: Tensor::new(&[samples.len()], samples)?,
            class: labeled.class,
            age_months: labeled.sample.age_months,
            family_id: labeled.sample.family_id.clone(),
        })
    }
}

/// Loads every clip referenced by `labeled`, in order.
pub fn load_examples(labeled: &[Labeled]) -> Result<Vec<Example>> {
    labeled.iter().map(|l| Example::new(load_clip(&l.sample.clip_path)?, l)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub head: HeadKind,
    pub task: String,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub lr: f64,
    pub split: SplitPolicy,
    pub test_fraction: f64,
    pub threads: usize,
    /// Relative loss improvement that still counts as progress.
    pub tolerance: f64,
    /// Epochs without progress before training stops.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::WithInception,
            head: HeadKind::GlobalAverage,
            task: "infant_vs_adult".into(),
            batch_size: 128,
            max_epochs: 300,
            seed: 0,
            lambda: 1e-4,
            lr: 1e-3,
            split: SplitPolicy::RandomHoldout,
            test_fraction: crate::dataset::DEFAULT_TEST_FRACTION,
            threads: 1,
            tolerance: 1e-4,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("λ {} must be ≥ 0", self.lambda));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test fraction {} is not in (0, 1)", self.test_fraction));
        }
        Ok(())
    }

    /// Table 1 network for this config.
    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        ModelConfig::table1(self.variant, num_classes, self.head)
    }
}

/// Fresh weights from `seed`, on a stream separate from batch shuffling.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    Model::from_config(config, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy plus the ℓ2 penalty.
    pub loss: f64,
    /// Percent of training clips classified correctly during the epoch.
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub converged: bool,
}

/// Order-preserving map that optionally fans out to a private thread pool.
pub struct Workers(Option<rayon::ThreadPool>);

impl Workers {
    pub fn new(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Workers(None));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map(|p| Workers(Some(p)))
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    pub fn map<T: Sync, U: Send>(&self, items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
        match &self.0 {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

struct SampleStep {
    loss: f64,
    correct: bool,
    grads: Gradients<f32>,
}

fn sample_step(model: &Model<f32>, ex: &Example) -> Result<SampleStep> {
    let (logits, trace) = model.forward_trace(&ex.input)?;
    let r = softmax_xent(logits.data(), ex.class)?;
    Ok(SampleStep {
        loss: f64::from(r.loss),
        correct: argmax(logits.data()) == ex.class,
        grads: model.backward(&trace, &r.dlogits)?,
    })
}

/// Trains in place, appending one JSON line per epoch to `log`.
pub fn train(
    config: &TrainConfig,
    model: &mut Model<f32>,
    data: &[Example],
    mut log: Option<&mut dyn Write>,
) -> Result<History> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.class >= model.num_classes()) {
        return Err(Error::Dataset(format!(
            "class {} outside a {}-class model",
            bad.class,
            model.num_classes()
        )));
    }
    let workers = Workers::new(config.threads)?;
    let info = model.param_info();
    let is_weight: Vec<bool> = info.iter().map(|p| p.role == ParamRole::Weight).collect();
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, info.iter().map(|p| p.shape.as_slice()));
    let mut monitor = ConvergenceMonitor::new(config.tolerance, config.patience);
    let mut history = History::default();

    for epoch in 0..config.max_epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in batches(data.len(), config.batch_size, config.seed, epoch as u64).into_iter().enumerate() {
            let abort = |message: String| Error::Training { epoch, batch: b, message };
            let steps = workers.map(&batch, |&i| sample_step(model, &data[i]));
            let mut grads = Gradients::zeros_like(model);
            let mut data_loss = 0.0;
            for step in steps {
                let step = step.map_err(|e| abort(e.to_string()))?;
                grads.accumulate(&step.grads)?;
                data_loss += step.loss;
                correct += usize::from(step.correct);
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n as f32);
            let params = model.params();
            let weights: Vec<&Tensor<f32>> = params.iter().zip(&is_weight).filter(|(_, &w)| w).map(|(p, _)| *p).collect();
            let mut weight_grads: Vec<&mut Tensor<f32>> = grads
                .tensors
                .iter_mut()
                .zip(&is_weight)
                .filter(|(_, &w)| w)
                .map(|(g, _)| g)
                .collect();
            let penalty = l2_penalty(&weights, &mut weight_grads, config.lambda)?;
            let loss = data_loss / n + penalty;
            if !loss.is_finite() {
                return Err(abort(format!("loss is {loss}")));
            }
            adam.step(model.params_mut(), &grads.tensors).map_err(|e| abort(e.to_string()))?;
            loss_sum += loss * n;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: 100.0 * correct as f64 / data.len() as f64,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io("run log", e))?;
        }
        history.epochs.push(record);
        if monitor.observe(record.loss) {
            history.converged = true;
            break;
        }
    }
    Ok(history)
}

/// Argmax class per example.
pub fn predict(model: &Model<f32>, data: &[Example], workers: &Workers) -> Result<Vec<usize>> {
    workers
        .map(data, |ex| model.forward(&ex.input).map(|y| argmax(y.data())))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub n: usize,
    /// `None` when the class has no test clips.
    pub acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgeAccuracy {
    pub age_months: u32,
    pub n: usize,
    pub acc: f64,
}

/// Accuracy summary in percent; field order is the JSON key order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub variant: String,
    pub class_names: Vec<String>,
    pub n: usize,
    pub overall_acc: f64,
    pub chance: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub by_age: Vec<AgeAccuracy>,
    pub history: Vec<EpochRecord>,
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Buckets by age in `AGES` order; empty buckets are left out.
pub fn age_breakdown(predictions: &[usize], data: &[Example]) -> Vec<AgeAccuracy> {
    AGES.iter()
        .filter_map(|&age| {
            let (n, hits) = predictions
                .iter()
                .zip(data)
                .filter(|(_, e)| e.age_months == age)
                .fold((0, 0), |(n, h), (&p, e)| (n + 1, h + usize::from(p == e.class)));
            (n > 0).then(|| AgeAccuracy {
                age_months: age,
                n,
                acc: percent(hits, n),
            })
        })
        .collect()
}

impl EvalReport {
    pub fn from_predictions(task: &TaskSpec, variant: &str, predictions: &[usize], data: &[Example]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Dataset("test set is empty".into()));
        }
        if predictions.len() != data.len() {
            return Err(Error::shape("one prediction per example is required"));
        }
        let k = task.num_classes();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&p, e) in predictions.iter().zip(data) {
            if p >= k || e.class >= k {
                return Err(Error::Dataset(format!("class index outside the {k} classes of {}", task.name)));
            }
            confusion[e.class][p] += 1;
        }
        let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
        let per_class = task
            .class_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let n: usize = confusion[c].iter().sum();
                ClassAccuracy {
                    class: name.clone(),
                    n,
                    acc: (n > 0).then(|| percent(confusion[c][c], n)),
                }
            })
            .collect();
        Ok(EvalReport {
            task: task.name.clone(),
            variant: variant.to_string(),
            class_names: task.class_names.clone(),
            n: data.len(),
            overall_acc: percent(trace, data.len()),
            chance: task.chance_percent(),
            per_class,
            confusion,
            by_age: age_breakdown(predictions, data),
            history: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `task,variant,overall_acc,chance,age,n,acc`: an `all` row, then one per age.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["task", "variant", "overall_acc", "chance", "age", "n", "acc"])?;
        let mut row = |age: String, n: usize, acc: f64| {
            out.write_record([
                self.task.clone(),
                self.variant.clone(),
                format!("{:.2}", self.overall_acc),
                format!("{:.2}", self.chance),
                age,
                n.to_string(),
                format!("{acc:.2}"),
            ])
        };
        row("all".into(), self.n, self.overall_acc)?;
        for a in &self.by_age {
            row(a.age_months.to_string(), a.n, a.acc)?;
        }
        out.flush().map_err(|e| Error::io("csv report", e))
    }
}

fn variant_name(model: &Model<f32>) -> String {
    model.config().variant.map_or_else(|| "custom".into(), |v| v.to_string())
}

/// Scores `model` on `data` without touching its parameters.
pub fn evaluate(model: &Model<f32>, data: &[Example], task: &TaskSpec, workers: &Workers) -> Result<EvalReport> {
    let predictions = predict(model, data, workers)?;
    EvalReport::from_predictions(task, &variant_name(model), &predictions, data)
}

/// Per-age slices of one evaluation.
pub fn evaluate_by_age(model: &Model<f32>, data: &[Example], workers: &Workers) -> Result<Vec<AgeAccuracy>> {
    Ok(age_breakdown(&predict(model, data, workers)?, data))
}

/// Splits in-memory examples by `policy`; holdout is stratified by class.
pub fn split_examples(data: &[Example], policy: &SplitPolicy, seed: u64, test_fraction: f64) -> Result<(Vec<Example>, Vec<Example>)> {
    let mask = match policy {
        SplitPolicy::RandomHoldout => {
            let classes: Vec<usize> = data.iter().map(|e| e.class).collect();
            stratified_mask(&classes, seed, test_fraction)?
        }
        SplitPolicy::LeaveOneFamilyOut(fam) => {
            if !data.iter().any(|e| &e.family_id == fam) {
                return Err(Error::Dataset(format!("family `{fam}` has no samples")));
            }
            data.iter().map(|e| &e.family_id == fam).collect()
        }
    };
    let (test, train): (Vec<_>, Vec<_>) = data.iter().cloned().zip(mask).partition(|(_, t)| *t);
    Ok((train.into_iter().map(|(e, _)| e).collect(), test.into_iter().map(|(e, _)| e).collect()))
}

/// Trains a fresh model on `train` and evaluates it on `test`.
pub fn fit_and_evaluate(
    config: &TrainConfig,
    model_config: &ModelConfig,
    task: &TaskSpec,
    train_set: &[Example],
    test_set: &[Example],
    log: Option<&mut dyn Write>,
) -> Result<(Model<f32>, EvalReport)> {
    let mut model = init_model(model_config.clone(), config.seed)?;
    let history = train(config, &mut model, train_set, log)?;
    let mut report = evaluate(&model, test_set, task, &Workers::new(config.threads)?)?;
    report.history = history.epochs;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyReport {
    pub family_id: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LofoReport {
    pub baseline: EvalReport,
    pub families: Vec<FamilyReport>,
    pub mean_acc: f64,
    pub min_acc: f64,
    pub max_acc: f64,
    /// Holdout accuracy minus mean held-out-family accuracy; positive means the families leak.
    pub delta: f64,
}

/// One train/evaluate cycle per family, plus a stratified-holdout baseline.
pub fn lofo_sweep(config: &TrainConfig, model_config: &ModelConfig, task: &TaskSpec, data: &[Example]) -> Result<LofoReport> {
    let fams = families_of(data);
    if fams.len() < 2 {
        return Err(Error::Dataset(format!(
            "leave-one-family-out needs at least 2 families, found {}",
            fams.len()
        )));
    }
    let (train_set, test_set) = split_examples(data, &SplitPolicy::RandomHoldout, config.seed, config.test_fraction)?;
    let (_, baseline) = fit_and_evaluate(config, model_config, task, &train_set, &test_set, None)?;
    let mut reports = Vec::with_capacity(fams.len());
    for fam in fams {
        let policy = SplitPolicy::LeaveOneFamilyOut(fam.clone());
        let (train_set, test_set) = split_examples(data, &policy, config.seed, config.test_fraction)?;
        let (_, report) = fit_and_evaluate(config, model_config, task, &train_set, &test_set, None)?;
        reports.push(FamilyReport { family_id: fam, report });
    }
    let accs: Vec<f64> = reports.iter().map(|r| r.report.overall_acc).collect();
    let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok(LofoReport {
        delta: baseline.overall_acc - mean_acc,
        baseline,
        families: reports,
        mean_acc,
        min_acc: accs.iter().copied().fold(f64::INFINITY, f64::min),
        max_acc: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn families_of(data: &[Example]) -> Vec<String> {
    let mut f: Vec<String> = data.iter().map(|e| e.family_id.clone()).collect();
    f.sort();
    f.dedup();
    f
}
