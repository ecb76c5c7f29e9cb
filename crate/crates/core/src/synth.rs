//! Synthetic labeled corpora: amplitude-modulated tones in noise.
//!
//! Each class draws its carrier and modulation rate from its own band, so
//! separability is known in advance. Families add a fixed one-pole coloration
//! and, optionally, a carrier offset that makes family identity leak into the
//! class signal.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, CLIP_LEN, SAMPLE_RATE};
use crate::dataset::{write_manifest, RawLabel, Sample, AGES};
use crate::error::{Error, Result};

/// Label assigned to class `c` is `LABEL_ORDER[c % 5]`.
///
/// The order keeps the first three classes in distinct groups of every
/// multi-class task.
pub const LABEL_ORDER: [RawLabel; 5] = [
    RawLabel::LaughCry,
    RawLabel::Canonical,
    RawLabel::Ids,
    RawLabel::NonCanonical,
    RawLabel::Ads,
];

const NYQUIST: f64 = SAMPLE_RATE as f64 / 2.0;
const PEAK: f64 = 0.8;

/// Signal recipe for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGen {
    /// Carrier frequency range in Hz.
    pub carrier_hz: (f64, f64),
    /// Amplitude-modulation rate range in Hz.
    pub am_hz: (f64, f64),
    /// Standard deviation of additive white noise, relative to a unit tone.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ClassGen>,
    pub clips_per_class: usize,
    pub families: usize,
    /// Largest one-pole coefficient magnitude; family `f` gets an evenly spaced value in `[-c, c]`.
    pub coloration: f64,
    /// Carrier shift of family `f`, `f * family_shift_hz`; zero keeps families exchangeable.
    pub family_shift_hz: f64,
    /// Ages drawn uniformly per clip.
    pub ages: Vec<u32>,
    pub seed: u64,
}

impl SynthSpec {
    /// Evenly spaced tone bands 600 Hz apart starting at 400 Hz, 4 families, light coloration.
    pub fn tones(num_classes: usize, clips_per_class: usize, noise: f64, seed: u64) -> Self {
        let classes = (0..num_classes)
            .map(|c| {
                let centre = 400.0 + 600.0 * c as f64;
                ClassGen {
                    carrier_hz: (centre - 50.0, centre + 50.0),
                    am_hz: (2.0 + c as f64, 4.0 + c as f64),
                    noise,
                }
            })
            .collect();
        SynthSpec {
            classes,
            clips_per_class,
            families: 4,
            coloration: 0.3,
            family_shift_hz: 0.0,
            ages: AGES.to_vec(),
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes.is_empty() || self.clips_per_class == 0 || self.families == 0 {
            return bad("need at least one class, clip per class and family".into());
        }
        if !(0.0..1.0).contains(&self.coloration) {
            return bad(format!("coloration {} is not in [0, 1)", self.coloration));
        }
        if self.ages.is_empty() || self.ages.iter().any(|a| !AGES.contains(a)) {
            return bad(format!("ages {:?} must be a non-empty subset of {AGES:?}", self.ages));
        }
        let max_shift = self.family_shift_hz * (self.families - 1) as f64;
        for (c, g) in self.classes.iter().enumerate() {
            let (lo, hi) = g.carrier_hz;
            let shifted = (lo.min(lo + max_shift), hi.max(hi + max_shift));
            if !(lo > 0.0 && lo <= hi && shifted.0 > 0.0 && shifted.1 < NYQUIST) {
                return bad(format!("class {c}: carrier band {lo}..{hi} Hz (after family shift) leaves (0, {NYQUIST})"));
            }
            let (alo, ahi) = g.am_hz;
            if !(alo >= 0.0 && alo <= ahi && ahi < NYQUIST) {
                return bad(format!("class {c}: modulation band {alo}..{ahi} Hz is invalid"));
            }
            if !(g.noise >= 0.0 && g.noise.is_finite()) {
                return bad(format!("class {c}: noise {} is invalid", g.noise));
            }
        }
        Ok(())
    }

    fn family_pole(&self, f: usize) -> f64 {
        if self.families == 1 {
            return 0.0;
        }
        self.coloration * (2.0 * f as f64 / (self.families - 1) as f64 - 1.0)
    }
}

/// A generated clip before it is written anywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub class: usize,
    pub samples: Vec<f32>,
    /// Manifest row with a path relative to the corpus root.
    pub sample: Sample,
}

pub fn family_name(f: usize) -> String {
    format!("F{:02}", f + 1)
}

fn render_clip(spec: &SynthSpec, class: usize, index: usize, stream: u64) -> SynthClip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let g = &spec.classes[class];
    let family = index % spec.families;
    let carrier = rng.gen_range(g.carrier_hz.0..=g.carrier_hz.1) + family as f64 * spec.family_shift_hz;
    let am = rng.gen_range(g.am_hz.0..=g.am_hz.1);
    let (p0, p1): (f64, f64) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    // uniform noise scaled to the requested standard deviation
    let noise_amp = g.noise * 3f64.sqrt();
    let pole = spec.family_pole(family);
    let rate = f64::from(SAMPLE_RATE);
    let mut prev = 0.0;
    let mut x: Vec<f64> = (0..CLIP_LEN)
        .map(|n| {
            let t = n as f64 / rate;
            let envelope = (1.0 + 0.5 * (2.0 * PI * am * t + p1).sin()) / 1.5;
            let v = envelope * (2.0 * PI * carrier * t + p0).sin() + noise_amp * rng.gen_range(-1.0..1.0);
            prev = (1.0 - pole.abs()) * v + pole * prev;
            prev
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    let age_months = spec.ages[rng.gen_range(0..spec.ages.len())];
    SynthClip {
        class,
        samples: x.into_iter().map(|v| v as f32).collect(),
        sample: Sample {
            clip_path: PathBuf::from("wav").join(format!("c{class}_{index:05}.wav")),
            raw_label: LABEL_ORDER[class % LABEL_ORDER.len()],
            age_months,
            family_id: family_name(family),
        },
    }
}

/// Renders the corpus in memory, class-major.
pub fn render(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let per = spec.clips_per_class;
    Ok((0..spec.num_classes())
        .flat_map(|c| (0..per).map(move |i| (c, i)))
        .map(|(c, i)| render_clip(spec, c, i, (c * per + i) as u64))
        .collect())
}

/// Writes `wav/*.wav` (16-bit, 8 kHz) and `manifest.csv` under `out_dir`.
///
/// Returns the manifest rows with paths joined onto `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut rows = Vec::new();
    for clip in render(spec)? {
        let mut sample = clip.sample;
        sample.clip_path = out_dir.join(&sample.clip_path);
        write_wav(&sample.clip_path, &clip.samples, SAMPLE_RATE)?;
        rows.push(sample);
    }
    write_manifest(out_dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}
