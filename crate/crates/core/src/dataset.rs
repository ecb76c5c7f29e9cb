//! Clip manifests, the seven classification tasks, splits and batching.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["clip_path", "raw_label", "age_months", "family_id"];
pub const AGES: [u32; 4] = [3, 6, 9, 18];
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Annotation categories a clip can carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawLabel {
    LaughCry,
    Canonical,
    NonCanonical,
    Ids,
    Ads,
}

impl RawLabel {
    pub const ALL: [RawLabel; 5] = [
        RawLabel::LaughCry,
        RawLabel::Canonical,
        RawLabel::NonCanonical,
        RawLabel::Ids,
        RawLabel::Ads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RawLabel::LaughCry => "laugh_cry",
            RawLabel::Canonical => "canonical",
            RawLabel::NonCanonical => "non_canonical",
            RawLabel::Ids => "ids",
            RawLabel::Ads => "ads",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RawLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        RawLabel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown raw label `{s}`"))
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub clip_path: PathBuf,
    pub raw_label: RawLabel,
    pub age_months: u32,
    pub family_id: String,
}

fn read_rows<R: std::io::Read>(reader: R, base: Option<&Path>) -> Result<Vec<Sample>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut records = csv.records();
    match records.next() {
        None => {
            return Err(Error::Manifest {
                line: 1,
                message: "missing header",
                found: String::new(),
            })
        }
        Some(header) => {
            let header = header?;
            if header.iter().ne(MANIFEST_HEADER) {
                return Err(Error::Manifest {
                    line: 1,
                    message: "header must be clip_path,raw_label,age_months,family_id",
                    found: header.iter().collect::<Vec<_>>().join(","),
                });
            }
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |message, found: &str| Error::Manifest {
            line,
            message,
            found: found.to_string(),
        };
        if record.len() != 4 {
            return Err(bad("expected 4 fields", &record.iter().collect::<Vec<_>>().join(",")));
        }
        let raw_label = record[1].parse().map_err(|_| bad("unknown raw_label", &record[1]))?;
        let age_months = record[2]
            .parse()
            .ok()
            .filter(|a| AGES.contains(a))
            .ok_or_else(|| bad("unknown age_months", &record[2]))?;
        if record[0].is_empty() {
            return Err(bad("empty clip_path", ""));
        }
        if record[3].is_empty() {
            return Err(bad("empty family_id", ""));
        }
        let clip_path = match base {
            Some(dir) => dir.join(&record[0]),
            None => PathBuf::from(&record[0]),
        };
        if !seen.insert(clip_path.clone()) {
            return Err(bad("duplicate clip_path", &record[0]));
        }
        out.push(Sample {
            clip_path,
            raw_label,
            age_months,
            family_id: record[3].to_string(),
        });
    }
    Ok(out)
}

/// Parses manifest text; paths are kept exactly as written.
pub fn parse_manifest_str(text: &str) -> Result<Vec<Sample>> {
    read_rows(text.as_bytes(), None)
}

/// Parses a manifest file. Relative clip paths resolve against its directory.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_rows(file, path.parent())
}

/// Writes a manifest; paths are written relative to `base` when possible.
pub fn write_manifest(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for s in samples {
        let clip = s.clip_path.strip_prefix(base).unwrap_or(&s.clip_path);
        let age = s.age_months.to_string();
        w.write_record([&*clip.to_string_lossy(), s.raw_label.name(), &age, &s.family_id])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sorted distinct family identifiers.
pub fn families(samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| s.family_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// A classification problem over raw labels; unmapped labels are excluded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TaskSpec {
    pub name: String,
    pub class_names: Vec<String>,
    mapping: [Option<usize>; 5],
}

impl TaskSpec {
    pub fn new(name: &str, class_names: &[&str], mapping: [Option<usize>; 5]) -> Result<Self> {
        let k = class_names.len();
        if k < 2 {
            return Err(Error::Config(format!("task {name} needs at least 2 classes")));
        }
        let used: BTreeSet<usize> = mapping.iter().flatten().copied().collect();
        if used.iter().any(|&c| c >= k) || used.len() != k {
            return Err(Error::Config(format!("task {name}: every class needs at least one raw label")));
        }
        Ok(TaskSpec {
            name: name.to_string(),
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            mapping,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Class index of a raw label, or `None` when excluded.
    pub fn class_of(&self, label: RawLabel) -> Option<usize> {
        self.mapping[label.index()]
    }

    /// Uninformed-guess accuracy in percent.
    pub fn chance_percent(&self) -> f64 {
        100.0 / self.num_classes() as f64
    }

    /// Keeps samples the task covers, paired with their class.
    pub fn apply(&self, samples: &[Sample]) -> Vec<Labeled> {
        samples
            .iter()
            .filter_map(|s| {
                self.class_of(s.raw_label).map(|class| Labeled {
                    sample: s.clone(),
                    class,
                })
            })
            .collect()
    }
}

/// The seven comparisons, in order.
pub fn builtin_tasks() -> Vec<TaskSpec> {
    use RawLabel::*;
    let build = |name, classes: &[&str], groups: &[&[RawLabel]]| {
        let mut mapping = [None; 5];
        for (c, group) in groups.iter().enumerate() {
            for l in group.iter() {
                mapping[l.index()] = Some(c);
            }
        }
        TaskSpec::new(name, classes, mapping).expect("builtin task is well formed")
    };
    vec![
        build(
            "infant_vs_adult",
            &["infant", "adult"],
            &[&[LaughCry, Canonical, NonCanonical], &[Ids, Ads]],
        ),
        build(
            "vocalization_vs_nonvocalization",
            &["vocalization", "non_vocalization"],
            &[&[Canonical, NonCanonical], &[LaughCry]],
        ),
        build(
            "canonical_vs_noncanonical",
            &["canonical", "non_canonical"],
            &[&[Canonical], &[NonCanonical]],
        ),
        build("ids_vs_ads", &["ids", "ads"], &[&[Ids], &[Ads]]),
        build(
            "three_class",
            &["laugh_cry", "babbling", "adult"],
            &[&[LaughCry], &[Canonical, NonCanonical], &[Ids, Ads]],
        ),
        build(
            "four_class",
            &["laugh_cry", "canonical", "non_canonical", "adult"],
            &[&[LaughCry], &[Canonical], &[NonCanonical], &[Ids, Ads]],
        ),
        build(
            "five_class",
            &["laugh_cry", "canonical", "non_canonical", "ids", "ads"],
            &[&[LaughCry], &[Canonical], &[NonCanonical], &[Ids], &[Ads]],
        ),
    ]
}

/// Looks up a builtin task by name.
pub fn task_by_name(name: &str) -> Result<TaskSpec> {
    builtin_tasks().into_iter().find(|t| t.name == name).ok_or_else(|| {
        let names: Vec<_> = builtin_tasks().into_iter().map(|t| t.name).collect();
        Error::Config(format!("unknown task `{name}` (expected one of {})", names.join(", ")))
    })
}

/// A sample with its task class.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Labeled {
    pub sample: Sample,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "family")]
pub enum SplitPolicy {
    RandomHoldout,
    LeaveOneFamilyOut(String),
}

impl fmt::Display for SplitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitPolicy::RandomHoldout => f.write_str("holdout"),
            SplitPolicy::LeaveOneFamilyOut(fam) => write!(f, "lofo:{fam}"),
        }
    }
}

impl FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "holdout" => Ok(SplitPolicy::RandomHoldout),
            Some(("lofo", fam)) if !fam.is_empty() => Ok(SplitPolicy::LeaveOneFamilyOut(fam.to_string())),
            _ => Err(Error::Config(format!("split `{s}` is not `holdout` or `lofo:<family>`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Labeled>,
    pub test: Vec<Labeled>,
    pub policy: SplitPolicy,
}

/// Marks `round(n_c * test_fraction)` random members of every class as test.
pub fn stratified_mask(classes: &[usize], seed: u64, test_fraction: f64) -> Result<Vec<bool>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} is not in (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; classes.len()];
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        idx[..n_test].iter().for_each(|&i| mask[i] = true);
    }
    Ok(mask)
}

/// Filters to the task, then splits. Holdout is stratified per class.
///
/// Both halves keep manifest order; only membership depends on `seed`.
pub fn make_split(
    samples: &[Sample],
    task: &TaskSpec,
    policy: &SplitPolicy,
    seed: u64,
    test_fraction: f64,
) -> Result<Split> {
    let labeled = task.apply(samples);
    let in_test: Vec<bool> = match policy {
        SplitPolicy::LeaveOneFamilyOut(fam) => {
            if !labeled.iter().any(|l| &l.sample.family_id == fam) {
                return Err(Error::Dataset(format!("family `{fam}` has no samples in task {}", task.name)));
            }
            labeled.iter().map(|l| &l.sample.family_id == fam).collect()
        }
        SplitPolicy::RandomHoldout => {
            let classes: Vec<usize> = labeled.iter().map(|l| l.class).collect();
            stratified_mask(&classes, seed, test_fraction)?
        }
    };
    let (test, train): (Vec<_>, Vec<_>) = labeled.into_iter().zip(in_test).partition(|(_, t)| *t);
    Ok(Split {
        train: train.into_iter().map(|(l, _)| l).collect(),
        test: test.into_iter().map(|(l, _)| l).collect(),
        policy: policy.clone(),
    })
}

/// Shuffled index batches for one epoch; the last batch may be short.
///
/// The permutation depends only on `(seed, epoch)`.
///
/// # Panics
/// If `batch_size` is zero.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
