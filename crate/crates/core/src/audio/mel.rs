//! Hann-windowed STFT and HTK-scale triangular mel filterbank.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{MelSpectrogram, WaveClip};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FRONTEND_SAMPLE_RATE: u32 = 16_000;
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// `n_mels + 2` band edges equally spaced on the mel scale from 0 Hz to Nyquist.
pub fn mel_band_edges(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Center frequency of every mel filter.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let edges = mel_band_edges(n_mels, sample_rate);
    edges[1..=n_mels].to_vec()
}

/// Triangular filters with unit peak, `[n_mels][n_fft/2 + 1]`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_band_edges(n_mels, sample_rate);
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Frontend framing parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            win_ms: 25.0,
            hop_ms: 10.0,
        }
    }
}

impl MelConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms * FRONTEND_SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * FRONTEND_SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    /// Frames produced for `len` samples, without padding.
    pub fn frame_count(&self, len: usize) -> usize {
        let win = self.win_samples();
        if len < win {
            0
        } else {
            1 + (len - win) / self.hop_samples()
        }
    }
}

/// Natural-log mel power spectrogram, frames × mel bins.
pub fn log_mel(clip: &WaveClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if clip.sample_rate_hz() != FRONTEND_SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "log-mel expects {FRONTEND_SAMPLE_RATE} Hz audio, got {} Hz",
            clip.sample_rate_hz()
        )));
    }
    if cfg.n_mels == 0 {
        return Err(Error::InvalidArgument("n_mels must be positive".into()));
    }
    let win = cfg.win_samples();
    let hop = cfg.hop_samples();
    if win == 0 || hop == 0 {
        return Err(Error::InvalidArgument(
            "window and hop must be at least one sample".into(),
        ));
    }
    let samples = clip.samples();
    let frames = cfg.frame_count(samples.len());
    if frames == 0 {
        return Err(Error::TooShort {
            samples: samples.len(),
            needed: win,
        });
    }

    let window = hann_window(win);
    let bank = mel_filterbank(cfg.n_mels, win, FRONTEND_SAMPLE_RATE);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let bins = win / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut power = vec![0.0; bins];
    let mut data = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    MelSpectrogram::from_tensor(Tensor::new(vec![frames, cfg.n_mels], data)?)
}

/// Linear-interpolation resampling to `target_hz`.
pub fn resample(clip: &WaveClip, target_hz: u32) -> Result<WaveClip> {
    if target_hz == 0 {
        return Err(Error::InvalidArgument(
            "target sample rate must be positive".into(),
        ));
    }
    let src_hz = clip.sample_rate_hz();
    if src_hz == target_hz {
        return Ok(clip.clone());
    }
    let src = clip.samples();
    let ratio = src_hz as f64 / target_hz as f64;
    let len = ((src.len() as f64) * target_hz as f64 / src_hz as f64)
        .round()
        .max(1.0) as usize;
    let last = src.len() - 1;
    let out = (0..len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = pos - lo as f64;
            if hi == lo {
                src[lo]
            } else {
                src[lo] * (1.0 - frac) + src[hi] * frac
            }
        })
        .collect();
    WaveClip::new(out, target_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> WaveClip {
        let n = (secs * 16000.0) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin())
            .collect();
        WaveClip::new(s, 16000).unwrap()
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn frame_count_arithmetic() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.win_samples(), 400);
        assert_eq!(cfg.hop_samples(), 160);
        assert_eq!(cfg.frame_count(160_000), 998);
        let spec = log_mel(&tone(440.0, 10.0), &cfg).unwrap();
        assert_eq!(spec.frames(), 998);
        assert_eq!(spec.mel_bins(), 128);
    }

    #[test]
    fn silence_hits_the_floor() {
        let clip = WaveClip::new(vec![0.0; 4000], 16000).unwrap();
        let spec = log_mel(&clip, &MelConfig::default()).unwrap();
        assert!(spec.data().data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_peaks_at_nearest_center() {
        let cfg = MelConfig::default();
        let centers = mel_center_frequencies(cfg.n_mels, 16000);
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let spec = log_mel(&tone(1000.0, 0.5), &cfg).unwrap();
        for t in 0..spec.frames() {
            let row = spec.data().row(t);
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn too_short_and_wrong_rate() {
        let short = WaveClip::new(vec![0.1; 399], 16000).unwrap();
        assert!(matches!(
            log_mel(&short, &MelConfig::default()),
            Err(Error::TooShort {
                samples: 399,
                needed: 400
            })
        ));
        let other = WaveClip::new(vec![0.1; 1000], 8000).unwrap();
        assert!(log_mel(&other, &MelConfig::default()).is_err());
    }

    #[test]
    fn one_hop_delay_shifts_frames() {
        let base = tone(730.0, 0.3);
        let mut delayed = vec![0.0; 160];
        delayed.extend_from_slice(base.samples());
        let delayed = WaveClip::new(delayed, 16000).unwrap();
        let cfg = MelConfig::default();
        let a = log_mel(&base, &cfg).unwrap();
        let b = log_mel(&delayed, &cfg).unwrap();
        for t in 0..a.frames() {
            for (x, y) in a.data().row(t).iter().zip(b.data().row(t + 1)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn resample_identity_and_constant() {
        let clip = WaveClip::new(vec![0.3; 100], 16000).unwrap();
        assert_eq!(resample(&clip, 16000).unwrap(), clip);
        let up = resample(&clip, 44100).unwrap();
        assert_eq!(up.samples().len(), 276);
        assert!(up.samples().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(resample(&clip, 0).is_err());
    }

    #[test]
    fn resample_ramp_matches_pointwise_interpolation() {
        let n = 800;
        let ramp: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let clip = WaveClip::new(ramp.clone(), 8000).unwrap();
        let up = resample(&clip, 16000).unwrap();
        assert_eq!(up.sample_rate_hz(), 16000);
        assert_eq!(up.samples().len(), 1600);
        for (i, &v) in up.samples().iter().enumerate() {
            let pos = i as f64 / 2.0;
            let lo = pos.floor() as usize;
            let expect = if lo + 1 < n {
                ramp[lo] + (ramp[lo + 1] - ramp[lo]) * (pos - lo as f64)
            } else {
                ramp[n - 1]
            };
            assert!((v - expect).abs() < 1e-12, "sample {i}");
        }
    }
}
