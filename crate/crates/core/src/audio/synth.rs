//! Seeded four-class synthetic corpus and its on-disk manifest.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{load_wav, write_wav_pcm16, WaveClip};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClipClass {
    Tone,
    Chirp,
    NoiseBurst,
    AmTone,
}

impl ClipClass {
    pub const ALL: [ClipClass; 4] = [Self::Tone, Self::Chirp, Self::NoiseBurst, Self::AmTone];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tone => "tone",
            Self::Chirp => "chirp",
            Self::NoiseBurst => "noise_burst",
            Self::AmTone => "am_tone",
        }
    }
}

impl fmt::Display for ClipClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClipClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown clip class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    pub clip: WaveClip,
    pub label: usize,
    pub class: ClipClass,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_clips: usize,
    pub duration_ms: f64,
    pub sample_rate_hz: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_clips: 64,
            duration_ms: 340.0,
            sample_rate_hz: 16_000,
        }
    }
}

/// SplitMix64 finalizer over `(seed, index)`; clip RNGs do not depend on worker count.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clip `i` belongs to class `i % 4`, so any multiple of four is exactly balanced.
pub fn make_synth_corpus(cfg: &SynthConfig) -> Result<Vec<LabeledClip>> {
    let n_classes = ClipClass::ALL.len();
    if cfg.n_clips < 2 * n_classes {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs at least {} clips, got {}",
            2 * n_classes,
            cfg.n_clips
        )));
    }
    if cfg.sample_rate_hz == 0 || !(cfg.duration_ms > 0.0) {
        return Err(Error::InvalidArgument(
            "duration and sample rate must be positive".into(),
        ));
    }
    let len = (cfg.duration_ms * cfg.sample_rate_hz as f64 / 1000.0).round() as usize;
    (0..cfg.n_clips)
        .into_par_iter()
        .map(|i| {
            let class = ClipClass::ALL[i % n_classes];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
            let samples = generate(class, len, cfg.sample_rate_hz as f64, &mut rng);
            Ok(LabeledClip {
                id: format!("clip_{i:05}"),
                clip: WaveClip::new(samples, cfg.sample_rate_hz)?,
                label: class.label(),
                class,
            })
        })
        .collect()
}

fn generate(class: ClipClass, len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nyq = sr / 2.0;
    let amp = rng.gen_range(0.3..0.6);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut out: Vec<f64> = match class {
        ClipClass::Tone => {
            let f = rng.gen_range(300.0..(0.4 * nyq));
            (0..len)
                .map(|i| amp * (2.0 * PI * f * i as f64 / sr + phase).sin())
                .collect()
        }
        ClipClass::Chirp => {
            let f0 = rng.gen_range(200.0..1000.0);
            let f1 = rng.gen_range(2000.0..(0.75 * nyq));
            let dur = len as f64 / sr;
            let k = (f1 - f0) / dur;
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    amp * (2.0 * PI * (f0 * t + 0.5 * k * t * t) + phase).sin()
                })
                .collect()
        }
        ClipClass::NoiseBurst => {
            let width = rng.gen_range(0.3..0.6) * len as f64;
            let start = rng.gen_range(0.0..(len as f64 - width));
            (0..len)
                .map(|i| {
                    let x = i as f64;
                    let on = if x >= start && x < start + width {
                        1.0
                    } else {
                        0.05
                    };
                    let z: f64 = StandardNormal.sample(rng);
                    0.5 * amp * on * z
                })
                .collect()
        }
        ClipClass::AmTone => {
            let f = rng.gen_range(300.0..(0.4 * nyq));
            let fm = rng.gen_range(8.0..20.0);
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    let env = 0.5 * (1.0 + (2.0 * PI * fm * t).sin());
                    amp * env * (2.0 * PI * f * t + phase).sin()
                })
                .collect()
        }
    };
    for s in &mut out {
        let z: f64 = StandardNormal.sample(rng);
        *s += 0.003 * z;
    }
    out
}

/// One manifest line: `path<TAB>label<TAB>class`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub class_name: String,
}

/// Writes `<id>.wav` per clip plus a manifest with paths relative to `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, clips: &[LabeledClip]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for c in clips {
        let name = format!("{}.wav", c.id);
        write_wav_pcm16(dir.join(&name), &c.clip)?;
        manifest.push_str(&format!("{name}\t{}\t{}\n", c.label, c.class));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Relative paths resolve against the manifest's directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| Error::Corrupt {
            path: path.to_path_buf(),
            detail: format!("line {}: {detail}", n + 1),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let label = fields[1]
            .parse()
            .map_err(|_| bad(format!("label {:?} is not an integer", fields[1])))?;
        let p = Path::new(fields[0]);
        out.push(ManifestEntry {
            path: if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            },
            label,
            class_name: fields[2].to_string(),
        });
    }
    Ok(out)
}

/// Loads every clip named by a manifest; ids are file stems.
pub fn load_corpus(manifest: impl AsRef<Path>) -> Result<Vec<LabeledClip>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let class = e.class_name.parse()?;
            let id = e
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(LabeledClip {
                id,
                clip: load_wav(&e.path)?,
                label: e.label,
                class,
            })
        })
        .collect()
}
