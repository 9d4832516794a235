//! Log-mel spectrograms (HTK mel scale, Hann-windowed STFT).

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied before `log10` so silence maps to a finite value.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 512,
            n_mels: 128,
            f_min: 0.0,
            f_max: 11025.0,
        }
    }
}

impl SpectrogramConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `1 + floor((len - n_fft) / hop)`, or 0 when `len < n_fft`.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            1 + (len - self.n_fft) / self.hop
        }
    }

    /// Frames produced by a clip of `seconds`.
    pub fn frames_for(&self, seconds: f64) -> usize {
        self.n_frames((seconds * self.sample_rate as f64).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 || self.n_fft < 2 || self.hop == 0 {
            return Err(Error::Config(format!(
                "sample_rate {}, n_fft {}, hop {} must be positive",
                self.sample_rate, self.n_fft, self.hop
            )));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= f_min < f_max <= {nyquist} Hz, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        if self.n_mels < 2 {
            return Err(Error::Config(format!(
                "n_mels must be >= 2, got {}",
                self.n_mels
            )));
        }
        Ok(())
    }
}

/// HTK mel scale: `2595 · log10(1 + f / 700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `[n_mels × n_bins]`, non-negative, peak 1 per triangle.
    pub weights: Tensor,
    pub centers_hz: Vec<f64>,
    pub f_min: f64,
    pub f_max: f64,
    pub n_mels: usize,
}

impl MelFilterbank {
    /// Row whose centre frequency is closest to `hz`.
    pub fn row_nearest(&self, hz: f64) -> usize {
        let mut best = 0;
        for (r, c) in self.centers_hz.iter().enumerate() {
            if (c - hz).abs() < (self.centers_hz[best] - hz).abs() {
                best = r;
            }
        }
        best
    }

    /// Rows whose centre frequency lies in `[lo, hi]`.
    pub fn rows_in_band(&self, lo: f64, hi: f64) -> Vec<usize> {
        (0..self.n_mels)
            .filter(|&r| (lo..=hi).contains(&self.centers_hz[r]))
            .collect()
    }

    /// Projects a power spectrum of `n_bins` values onto the mel rows.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        let bins = self.weights.shape()[1];
        (0..self.n_mels)
            .map(|r| {
                self.weights.data()[r * bins..(r + 1) * bins]
                    .iter()
                    .zip(power)
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect()
    }
}

/// Triangular filters with edges uniformly spaced on the mel scale between
/// `f_min` and `f_max`.
pub fn mel_filterbank(config: &SpectrogramConfig) -> Result<MelFilterbank> {
    config.validate()?;
    let n_bins = config.n_bins();
    let (lo, hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * config.sample_rate as f64 / config.n_fft as f64;
    let mut weights = vec![0.0; config.n_mels * n_bins];
    for m in 0..config.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let f = bin_hz(k);
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                weights[m * n_bins + k] = w;
                any = true;
            }
        }
        if !any {
            return Err(Error::Config(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) contains no FFT bin; lower n_mels or raise n_fft"
            )));
        }
    }
    Ok(MelFilterbank {
        weights: Tensor::new(vec![config.n_mels, n_bins], weights)?,
        centers_hz: edges[1..=config.n_mels].to_vec(),
        f_min: config.f_min,
        f_max: config.f_max,
        n_mels: config.n_mels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// `[n_mels × n_frames]`.
    pub values: Tensor,
    pub config: SpectrogramConfig,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Reusable STFT + filterbank state for one configuration.
pub struct MelAnalyzer {
    config: SpectrogramConfig,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelAnalyzer {
    pub fn new(config: &SpectrogramConfig) -> Result<Self> {
        let filterbank = mel_filterbank(config)?;
        let n = config.n_fft;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(MelAnalyzer {
            config: config.clone(),
            filterbank,
            window,
            fft,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.config
    }

    /// Pre-log mel energies `[n_mels × n_frames]`.
    pub fn mel_energies(&self, clip: &AudioClip) -> Result<Tensor> {
        let cfg = &self.config;
        if clip.sample_rate() != cfg.sample_rate {
            return Err(Error::SampleRate {
                expected: cfg.sample_rate,
                found: clip.sample_rate(),
            });
        }
        let frames = cfg.n_frames(clip.len());
        if frames == 0 {
            return Err(Error::ClipTooShort {
                samples: clip.len(),
                n_fft: cfg.n_fft,
            });
        }
        let n_bins = cfg.n_bins();
        let mut out = vec![0.0; cfg.n_mels * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        let x = clip.samples();
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(x[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, e) in self.filterbank.apply(&power).into_iter().enumerate() {
                out[m * frames + t] = e;
            }
        }
        Tensor::new(vec![cfg.n_mels, frames], out)
    }

    /// `log10(max(energy, 1e-10))`, then min-max normalized to `[0, 1]`
    /// (all zeros when the log matrix is constant).
    pub fn spectrogram(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        let energies = self.mel_energies(clip)?;
        let logged = energies.map(|e| e.max(LOG_FLOOR).log10());
        let (lo, hi) = logged
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let range = hi - lo;
        let values = if range > 0.0 {
            logged.map(|v| (v - lo) / range)
        } else {
            Tensor::zeros(logged.shape())
        };
        Ok(MelSpectrogram {
            values,
            config: self.config.clone(),
        })
    }
}

pub fn mel_spectrogram(clip: &AudioClip, config: &SpectrogramConfig) -> Result<MelSpectrogram> {
    MelAnalyzer::new(config)?.spectrogram(clip)
}

/// Centre-crops or symmetrically zero-pads the time axis to exactly
/// `frames` columns (odd padding puts the extra column on the right).
///
/// # Panics
/// If `frames == 0`.
pub fn fixed_size_crop(spec: &MelSpectrogram, frames: usize) -> MelSpectrogram {
    assert!(frames > 0, "fixed_size_crop needs a positive frame count");
    let (rows, cols) = (spec.n_mels(), spec.n_frames());
    let mut out = vec![0.0; rows * frames];
    if cols >= frames {
        let start = (cols - frames) / 2;
        for r in 0..rows {
            out[r * frames..(r + 1) * frames]
                .copy_from_slice(&spec.values.row(r)[start..start + frames]);
        }
    } else {
        let left = (frames - cols) / 2;
        for r in 0..rows {
            out[r * frames + left..r * frames + left + cols].copy_from_slice(spec.values.row(r));
        }
    }
    MelSpectrogram {
        values: Tensor::new(vec![rows, frames], out).expect("sized above"),
        config: spec.config.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(hz: f64, seconds: f64, sr: u32) -> AudioClip {
        let n = (seconds * sr as f64) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / sr as f64).sin())
            .collect();
        AudioClip::new(s, sr).unwrap()
    }

    #[test]
    fn mel_scale_reference_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 781.1728).abs() < 1e-3);
        assert!((mel_to_hz(hz_to_mel(4321.0)) - 4321.0).abs() < 1e-9);
    }

    #[test]
    fn default_filterbank_invariants() {
        let fb = mel_filterbank(&SpectrogramConfig::default()).unwrap();
        assert_eq!(fb.weights.shape(), &[128, 513]);
        assert!(fb.weights.data().iter().all(|&w| w >= 0.0));
        for r in 0..128 {
            assert!(fb.weights.row(r).iter().any(|&w| w > 0.0), "row {r} empty");
        }
        assert!(fb.centers_hz.windows(2).all(|w| w[0] < w[1]));
        let ones = vec![1.0; 513];
        assert!(fb.apply(&ones).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn invalid_frequency_range_rejected() {
        let mut cfg = SpectrogramConfig::default();
        cfg.f_max = 12000.0;
        assert!(mel_filterbank(&cfg).is_err());
        cfg.f_max = 11025.0;
        cfg.f_min = 11025.0;
        assert!(mel_filterbank(&cfg).is_err());
        cfg.f_min = 0.0;
        cfg.n_mels = 1;
        assert!(mel_filterbank(&cfg).is_err());
    }

    #[test]
    fn silence_normalizes_to_zeros() {
        let clip = AudioClip::new(vec![0.0; 22050], 22050).unwrap();
        let spec = mel_spectrogram(&clip, &SpectrogramConfig::default()).unwrap();
        assert!(spec.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_clip() {
        let cfg = SpectrogramConfig::default();
        let clip = sine(440.0, 1024.0 / 22050.0, 22050);
        assert_eq!(clip.len(), 1024);
        let spec = mel_spectrogram(&clip, &cfg).unwrap();
        assert_eq!(spec.n_frames(), 1);
    }

    #[test]
    fn too_short_clip_is_an_error() {
        let clip = AudioClip::new(vec![0.1; 1000], 22050).unwrap();
        assert!(matches!(
            mel_spectrogram(&clip, &SpectrogramConfig::default()),
            Err(Error::ClipTooShort { .. })
        ));
    }

    #[test]
    fn sample_rate_mismatch_is_not_resampled() {
        let clip = AudioClip::new(vec![0.1; 4096], 16000).unwrap();
        assert!(matches!(
            mel_spectrogram(&clip, &SpectrogramConfig::default()),
            Err(Error::SampleRate { .. })
        ));
    }

    #[test]
    fn one_kilohertz_sine_peaks_in_the_nearest_filter() {
        let cfg = SpectrogramConfig::default();
        let spec = mel_spectrogram(&sine(1000.0, 1.0, 22050), &cfg).unwrap();
        let fb = mel_filterbank(&cfg).unwrap();
        let expected = fb.row_nearest(1000.0);
        for t in 0..spec.n_frames() {
            let col: Vec<f64> = (0..128).map(|r| spec.values.row(r)[t]).collect();
            let argmax = (0..128).fold(0, |b, r| if col[r] > col[b] { r } else { b });
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn values_are_normalized_and_finite() {
        let spec =
            mel_spectrogram(&sine(3000.0, 0.5, 22050), &SpectrogramConfig::default()).unwrap();
        assert!(spec.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn ramp(rows: usize, cols: usize) -> MelSpectrogram {
        let data = (0..rows * cols).map(|i| (i % cols) as f64 + 1.0).collect();
        MelSpectrogram {
            values: Tensor::new(vec![rows, cols], data).unwrap(),
            config: SpectrogramConfig::default(),
        }
    }

    #[test]
    fn crop_identity() {
        let s = ramp(3, 100);
        assert_eq!(fixed_size_crop(&s, 100), s);
    }

    #[test]
    fn crop_pads_symmetrically() {
        let out = fixed_size_crop(&ramp(2, 50), 100);
        let row = out.values.row(1);
        assert!(row[..25].iter().all(|&v| v == 0.0));
        assert!(row[75..].iter().all(|&v| v == 0.0));
        assert_eq!(row[25], 1.0);
        assert_eq!(row[74], 50.0);
    }

    #[test]
    fn crop_keeps_centre_columns() {
        let out = fixed_size_crop(&ramp(2, 200), 100);
        let row = out.values.row(0);
        assert_eq!(row[0], 51.0); // column 50
        assert_eq!(row[99], 150.0); // column 149
    }
}
