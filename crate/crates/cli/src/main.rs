//! `wavenet`: synthesize, prepare, train, evaluate and inspect raw-waveform CNNs.
//!
//! Exit codes: 0 success, 1 data or runtime failure, 2 usage or configuration error.

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use wavenet_core::audio::{ingest, load_clip, write_cached};
use wavenet_core::dataset::{make_split, parse_manifest, task_by_name, write_manifest, Sample, TaskSpec};
use wavenet_core::gradcheck::{self, KINDS};
use wavenet_core::nn::head::softmax;
use wavenet_core::nn::weights::{read_weights, write_weights};
use wavenet_core::synth::{generate, SynthSpec};
use wavenet_core::trainer::{evaluate, init_model, load_examples, lofo_sweep, train, Example, Workers};
use wavenet_core::{Error, HeadKind, Model, ModelConfig, Tensor, Variant};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "wavenet", version, about = "End-to-end CNNs for 1 s, 8 kHz vocalization clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tone corpus (WAVs + manifest.csv).
    Synth(SynthArgs),
    /// Resample, tile and standardize manifest WAVs into a .f32 clip cache.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        /// Cache directory; receives the clips and an updated manifest.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write weights, run log and report.
    Train(RunArgs),
    /// Leave-one-family-out sweep against a holdout baseline.
    Lofo(RunArgs),
    /// Evaluate saved weights on a task split.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        /// Score every task clip instead of the held-out split.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Class probabilities for single clips.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        wav: Vec<PathBuf>,
        /// Task whose class names label the output.
        #[arg(long)]
        task: Option<String>,
    },
    /// Layer-by-layer shapes and parameter counts.
    Params {
        #[arg(long, default_value = "with_inception")]
        variant: Variant,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value = "global_average")]
        head: HeadKind,
    },
    /// Finite-difference gradient check per layer kind.
    Gradcheck {
        /// `all` or a comma-separated list of layer kinds.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    clips_per_class: usize,
    /// Noise standard deviation relative to a unit tone.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    families: usize,
    /// Per-family carrier shift in Hz (makes families leak into the label).
    #[arg(long, default_value_t = 0.0)]
    family_shift: f64,
    #[arg(long, default_value_t = 0.3)]
    coloration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Run settings; each flag overrides the same key from `--config`.
#[derive(Args, Default)]
struct RunArgs {
    /// key = value file; see the resolved config.txt of any run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    /// `holdout` or `lofo:<family>`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    test_fraction: Option<String>,
    #[arg(long, env = "WAVENET_THREADS")]
    threads: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

/// Failure classes that map onto exit codes.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Manifest { .. } => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

type Outcome = Result<ExitCode, Failure>;

fn io_fail(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path).map_err(Failure::Usage)?;
        }
        let flags = [
            ("manifest", &self.manifest),
            ("task", &self.task),
            ("variant", &self.variant),
            ("head", &self.head),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("lambda", &self.lambda),
            ("split", &self.split),
            ("test_fraction", &self.test_fraction),
            ("threads", &self.threads),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v).map_err(|e| Failure::Usage(format!("--{key}: {e}")))?;
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn manifest_samples(cfg: &RunConfig) -> Result<Vec<Sample>, Failure> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Failure::Usage("no manifest given (--manifest or `manifest =`)".into()))?;
    if !path.is_file() {
        return Err(Failure::Usage(format!("manifest not found: {}", path.display())));
    }
    Ok(parse_manifest(path)?)
}

/// Creates `<out>/<timestamp>-<task>-<variant>`, suffixing on collision.
fn run_dir(cfg: &RunConfig, kind: &str) -> Result<PathBuf, Failure> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{kind}-{}-{}", cfg.train.task, cfg.train.variant);
    fs::create_dir_all(&cfg.out).map_err(io_fail(&cfg.out))?;
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = cfg.out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                fs::write(dir.join("config.txt"), cfg.to_text()).map_err(io_fail(&dir))?;
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_fail(&dir)(e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(io_fail(path))
}

fn load_model(path: &Path) -> Result<Model<f32>, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(read_weights(std::io::BufReader::new(file))?)
}

fn check_classes(model: &Model<f32>, task: &TaskSpec) -> Result<(), Failure> {
    if model.num_classes() != task.num_classes() {
        return Err(Failure::Usage(format!(
            "weights predict {} classes, task {} has {}",
            model.num_classes(),
            task.name,
            task.num_classes()
        )));
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Outcome {
    let mut spec = SynthSpec::tones(a.classes, a.clips_per_class, a.noise, a.seed);
    spec.families = a.families;
    spec.family_shift_hz = a.family_shift;
    spec.coloration = a.coloration;
    let rows = generate(&spec, &a.out)?;
    println!("{} clips -> {}", rows.len(), a.out.join("manifest.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_prepare(manifest: &Path, out: &Path) -> Outcome {
    let cfg = RunConfig {
        manifest: Some(manifest.to_path_buf()),
        ..RunConfig::default()
    };
    let samples = manifest_samples(&cfg)?;
    fs::create_dir_all(out).map_err(io_fail(out))?;
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for s in &samples {
        let written = ingest(&s.clip_path).and_then(|clips| {
            clips
                .iter()
                .map(|c| write_cached(out, c))
                .collect::<wavenet_core::Result<Vec<_>>>()
        });
        match written {
            Ok(paths) => rows.extend(paths.into_iter().map(|p| Sample {
                clip_path: p,
                ..s.clone()
            })),
            Err(e) => failed.push(format!("{}: {e}", s.clip_path.display())),
        }
    }
    write_manifest(out.join("manifest.csv"), &rows)?;
    println!("{} clips from {} files -> {}", rows.len(), samples.len() - failed.len(), out.display());
    if failed.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!("{} of {} files failed:", failed.len(), samples.len());
    for f in &failed {
        eprintln!("  {f}");
    }
    Ok(ExitCode::from(1))
}

struct Prepared {
    task: TaskSpec,
    train: Vec<Example>,
    test: Vec<Example>,
}

fn prepare_split(cfg: &RunConfig) -> Result<Prepared, Failure> {
    let samples = manifest_samples(cfg)?;
    let task = task_by_name(&cfg.train.task)?;
    let t = &cfg.train;
    let split = make_split(&samples, &task, &t.split, t.seed, t.test_fraction)?;
    Ok(Prepared {
        train: load_examples(&split.train)?,
        test: load_examples(&split.test)?,
        task,
    })
}

fn cmd_train(args: &RunArgs) -> Outcome {
    let cfg = args.resolve()?;
    let data = prepare_split(&cfg)?;
    let dir = run_dir(&cfg, "train")?;
    let model_config = cfg.train.model_config(data.task.num_classes())?;
    let mut model = init_model(model_config, cfg.train.seed)?;
    let log_path = dir.join("run_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_fail(&log_path))?);
    eprintln!(
        "training {} on {} clips ({} held out), {} parameters",
        cfg.train.variant,
        data.train.len(),
        data.test.len(),
        model.num_params()
    );
    let started = Instant::now();
    let history = train(&cfg.train, &mut model, &data.train, Some(&mut log))?;
    log.flush().map_err(io_fail(&log_path))?;
    let weights_path = dir.join("weights.bin");
    let mut w = BufWriter::new(fs::File::create(&weights_path).map_err(io_fail(&weights_path))?);
    write_weights(&model, &mut w)?;
    w.flush().map_err(io_fail(&weights_path))?;
    let mut report = evaluate(&model, &data.test, &data.task, &Workers::new(cfg.train.threads)?)?;
    report.history = history.epochs;
    write_file(&dir.join("report.json"), report.to_json()?)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&dir.join("report.csv"), csv)?;
    eprintln!(
        "{} epochs in {:.1} s, test accuracy {:.2}% (chance {:.2}%)",
        report.history.len(),
        started.elapsed().as_secs_f64(),
        report.overall_acc,
        report.chance
    );
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_lofo(args: &RunArgs) -> Outcome {
    let cfg = args.resolve()?;
    let samples = manifest_samples(&cfg)?;
    let task = task_by_name(&cfg.train.task)?;
    let data = load_examples(&task.apply(&samples))?;
    let model_config = cfg.train.model_config(task.num_classes())?;
    let report = lofo_sweep(&cfg.train, &model_config, &task, &data)?;
    let dir = run_dir(&cfg, "lofo")?;
    write_file(&dir.join("lofo.json"), serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    println!(
        "baseline {:.2}%, families mean {:.2}% (min {:.2}, max {:.2}), delta {:.2}",
        report.baseline.overall_acc, report.mean_acc, report.min_acc, report.max_acc, report.delta
    );
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(weights: &Path, all: bool, args: &RunArgs) -> Outcome {
    let cfg = args.resolve()?;
    let model = load_model(weights)?;
    let task = task_by_name(&cfg.train.task)?;
    check_classes(&model, &task)?;
    let test: Vec<Example> = if all {
        load_examples(&task.apply(&manifest_samples(&cfg)?))?
    } else {
        prepare_split(&cfg)?.test
    };
    let report = evaluate(&model, &test, &task, &Workers::new(cfg.train.threads)?)?;
    let json = report.to_json()?;
    if args.out.is_some() {
        fs::create_dir_all(&cfg.out).map_err(io_fail(&cfg.out))?;
        write_file(&cfg.out.join("eval.json"), &json)?;
    }
    println!("{json}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(weights: &Path, wavs: &[PathBuf], task: Option<&str>) -> Outcome {
    let model = load_model(weights)?;
    let names: Vec<String> = match task {
        Some(name) => {
            let t = task_by_name(name)?;
            check_classes(&model, &t)?;
            t.class_names
        }
        None => (0..model.num_classes()).map(|c| format!("class_{c}")).collect(),
    };
    let mut failed = false;
    for wav in wavs {
        let probs = load_clip(wav).and_then(|x| {
            let y = model.forward(&Tensor::new(&[x.len()], x)?)?;
            softmax(y.data())
        });
        match probs {
            Ok(p) => {
                println!("{}", wav.display());
                for (name, v) in names.iter().zip(p) {
                    println!("  {name}\t{v:.9}");
                }
            }
            Err(e) => {
                eprintln!("{}: {e}", wav.display());
                failed = true;
            }
        }
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_params(variant: Variant, classes: usize, head: HeadKind) -> Outcome {
    let config = ModelConfig::table1(variant, classes, head)?;
    println!("{:>3}  {:<24} {:<16} {:<16} {:>9}", "#", "layer", "input", "output", "params");
    for s in config.propagate()? {
        let name = format!("{}{}", "  ".repeat(s.depth), s.kind);
        println!(
            "{:>3}  {:<24} {:<16} {:<16} {:>9}",
            s.index,
            name,
            format!("{:?}", s.input),
            format!("{:?}", s.output),
            s.params
        );
    }
    println!("total {}", config.param_count()?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(layers: &str, seed: u64) -> Outcome {
    let kinds: Vec<&str> = if layers == "all" {
        KINDS.to_vec()
    } else {
        layers.split(',').map(str::trim).collect()
    };
    if let Some(bad) = kinds.iter().find(|k| !KINDS.contains(k)) {
        return Err(Failure::Usage(format!("unknown layer kind `{bad}` (known: {})", KINDS.join(", "))));
    }
    println!("{:<24} {:>7} {:>7} {:>13}  status", "kind", "checked", "skipped", "max_rel_err");
    let mut all_ok = true;
    for kind in kinds {
        let row = gradcheck::check(kind, seed)?;
        let ok = row.passed();
        all_ok &= ok;
        println!(
            "{:<24} {:>7} {:>7} {:>13.3e}  {}",
            row.kind,
            row.checked,
            row.skipped,
            row.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare { manifest, out } => cmd_prepare(manifest, out),
        Command::Train(a) => cmd_train(a),
        Command::Lofo(a) => cmd_lofo(a),
        Command::Eval { weights, all, run } => cmd_eval(weights, *all, run),
        Command::Predict { weights, wav, task } => cmd_predict(weights, wav, task.as_deref()),
        Command::Params { variant, classes, head } => cmd_params(*variant, *classes, *head),
        Command::Gradcheck { layers, seed } => cmd_gradcheck(layers, *seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
