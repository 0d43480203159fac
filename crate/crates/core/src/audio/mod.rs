//! Waveform loading, log-mel features and the synthetic training corpus.

mod mel;
mod synth;
mod wav;

pub use mel::{
    hann_window, hz_to_mel, log_mel, mel_band_edges, mel_center_frequencies, mel_filterbank,
    mel_to_hz, resample, MelConfig, FRONTEND_SAMPLE_RATE, LOG_FLOOR,
};
pub use synth::{
    derive_seed, load_corpus, make_synth_corpus, read_manifest, write_corpus, ClipClass,
    LabeledClip, ManifestEntry, SynthConfig, MANIFEST_FILE,
};
pub use wav::{encode_pcm16, load_wav, parse_wav, write_wav_pcm16};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mono audio with samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct WaveClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl WaveClip {
    /// Values outside [-1, 1] are clamped.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("audio clip has no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Log-mel features `[frames, mel_bins]` plus normalization bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    data: Tensor<f64>,
    normalized: bool,
    norm_mean: f64,
    norm_std: f64,
}

impl MelSpectrogram {
    pub fn from_tensor(data: Tensor<f64>) -> Result<Self> {
        data.expect_rank(2, "spectrogram")?;
        Ok(Self {
            data,
            normalized: false,
            norm_mean: 0.0,
            norm_std: 1.0,
        })
    }

    pub fn data(&self) -> &Tensor<f64> {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn mel_bins(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `(mean, std)` applied by [`MelSpectrogram::normalize`], if any.
    pub fn normalization(&self) -> Option<(f64, f64)> {
        self.normalized.then_some((self.norm_mean, self.norm_std))
    }

    /// `(x - mean) / std`, recorded so it can be undone.
    pub fn normalize(&self, mean: f64, std: f64) -> Result<Self> {
        if self.normalized {
            return Err(Error::State("spectrogram is already normalized".into()));
        }
        if !(std > 0.0) || !mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "normalization needs finite mean and positive std, got ({mean}, {std})"
            )));
        }
        Ok(Self {
            data: self.data.map(|v| (v - mean) / std),
            normalized: true,
            norm_mean: mean,
            norm_std: std,
        })
    }

    pub fn denormalize(&self) -> Result<Self> {
        if !self.normalized {
            return Err(Error::State("spectrogram is not normalized".into()));
        }
        let (m, s) = (self.norm_mean, self.norm_std);
        Ok(Self {
            data: self.data.map(|v| v * s + m),
            normalized: false,
            norm_mean: 0.0,
            norm_std: 1.0,
        })
    }

    /// Keeps the first `frames` frames, padding with the log floor when short.
    pub fn fit_frames(&self, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument(
                "target frame count must be positive".into(),
            ));
        }
        let bins = self.mel_bins();
        let pad = if self.normalized {
            (LOG_FLOOR.ln() - self.norm_mean) / self.norm_std
        } else {
            LOG_FLOOR.ln()
        };
        let mut data = vec![pad; frames * bins];
        let keep = frames.min(self.frames()) * bins;
        data[..keep].copy_from_slice(&self.data.data()[..keep]);
        Ok(Self {
            data: Tensor::new(vec![frames, bins], data)?,
            ..self.clone()
        })
    }
}

/// Mean and (population) standard deviation over every element of a set of spectrograms.
pub fn corpus_stats<'a>(specs: impl IntoIterator<Item = &'a MelSpectrogram>) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for s in specs {
        for &v in s.data().data() {
            n += 1;
            sum += v;
            sq += v * v;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no spectrogram values".into()));
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    Ok((mean, var.sqrt()))
}

/// Resample, log-mel, and fit to `frames` (normalization is applied separately).
pub fn clip_features(clip: &WaveClip, mel: &MelConfig, frames: usize) -> Result<MelSpectrogram> {
    let clip = resample(clip, FRONTEND_SAMPLE_RATE)?;
    log_mel(&clip, mel)?.fit_frames(frames)
}
