//! `key = value` run configuration with flag overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use wavenet_core::trainer::TrainConfig;

/// Every accepted key, in the order the resolved file lists them.
pub const KEYS: [&str; 16] = [
    "manifest",
    "cache",
    "out",
    "task",
    "variant",
    "head",
    "seed",
    "epochs",
    "batch",
    "lr",
    "lambda",
    "split",
    "test_fraction",
    "threads",
    "tolerance",
    "patience",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            cache: None,
            out: PathBuf::from("runs"),
            train: TrainConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "cache" => self.cache = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "task" => t.task = value.to_string(),
            "variant" => t.variant = value.parse().map_err(|e| format!("{e}"))?,
            "head" => t.head = value.parse().map_err(|e| format!("{e}"))?,
            "seed" => t.seed = num(key, value)?,
            "epochs" => t.max_epochs = num(key, value)?,
            "batch" => t.batch_size = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "lambda" => t.lambda = num(key, value)?,
            "split" => t.split = value.parse().map_err(|e| format!("{e}"))?,
            "test_fraction" => t.test_fraction = num(key, value)?,
            "threads" => t.threads = num(key, value)?,
            "tolerance" => t.tolerance = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies a config file: `key = value` lines, `#` comments, blank lines.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            self.set(key.trim(), value.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "manifest" => path(&self.manifest),
            "cache" => path(&self.cache),
            "out" => self.out.display().to_string(),
            "task" => t.task.clone(),
            "variant" => t.variant.to_string(),
            "head" => t.head.to_string(),
            "seed" => t.seed.to_string(),
            "epochs" => t.max_epochs.to_string(),
            "batch" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "lambda" => t.lambda.to_string(),
            "split" => t.split.to_string(),
            "test_fraction" => t.test_fraction.to_string(),
            "threads" => t.threads.to_string(),
            "tolerance" => t.tolerance.to_string(),
            "patience" => t.patience.to_string(),
            _ => unreachable!("key list and accessor agree"),
        }
    }

    /// Fully resolved config; feeding it back through [`apply_text`](Self::apply_text) reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key);
            if value.is_empty() {
                let _ = writeln!(out, "# {key} =");
            } else {
                let _ = writeln!(out, "{key} = {value}");
            }
        }
        out
    }
}
