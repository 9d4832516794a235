//! PCM audio clips and WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                op: "audio clip".into(),
            });
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Multiplies every sample by `gain`.
    pub fn scaled(&self, gain: f64) -> AudioClip {
        AudioClip {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Non-overlapping segments of `seconds` each; a trailing remainder
    /// shorter than a segment is dropped.
    pub fn segments(&self, seconds: f64) -> Vec<AudioClip> {
        let len = (seconds * self.sample_rate as f64).round() as usize;
        if len == 0 {
            return Vec::new();
        }
        self.samples
            .chunks_exact(len)
            .map(|c| AudioClip {
                samples: c.to_vec(),
                sample_rate: self.sample_rate,
            })
            .collect()
    }
}

/// Reads a 16-bit PCM WAV, mixing channels to mono by their mean and
/// scaling by 1/32768.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let unsupported = |detail: String| Error::UnsupportedEncoding {
        path: path.to_path_buf(),
        detail,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => unsupported(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{:?} with {} bits per sample (need PCM16)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(unsupported("zero channels".into()));
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| unsupported(e.to_string()))?;
    if raw.len() < channels {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled RIFF/WAVE header for PCM16.
    fn wav_bytes(channels: u16, rate: u32, samples: &[i16]) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data_len).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * channels as u32 * 2).to_le_bytes());
        b.extend_from_slice(&(channels * 2).to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn four_sample_fixture_scales_by_32768() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("four.wav");
        std::fs::write(&p, wav_bytes(1, 8000, &[32767, -32768, 0, 16384])).unwrap();
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.sample_rate(), 8000);
        assert_eq!(clip.samples(), &[32767.0 / 32768.0, -1.0, 0.0, 0.5]);
        assert!((clip.samples()[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn one_second_of_silence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("silence.wav");
        std::fs::write(&p, wav_bytes(1, 22050, &vec![0; 22050])).unwrap();
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.len(), 22050);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
        assert!((clip.duration_s() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antiphase_stereo_mixes_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stereo.wav");
        let frames: Vec<i16> = (0..100).flat_map(|_| [16384i16, -16384]).collect();
        std::fs::write(&p, wav_bytes(2, 22050, &frames)).unwrap();
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.len(), 100);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_wav(&dir.path().join("absent.wav")),
            Err(Error::MissingFile(_))
        ));

        let empty = dir.path().join("empty.wav");
        std::fs::write(&empty, wav_bytes(1, 22050, &[])).unwrap();
        assert!(matches!(load_wav(&empty), Err(Error::EmptyAudio(_))));

        let float = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.25f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            load_wav(&float),
            Err(Error::UnsupportedEncoding { .. })
        ));

        let garbage = dir.path().join("garbage.wav");
        std::fs::write(&garbage, b"not a wav file at all").unwrap();
        assert!(matches!(
            load_wav(&garbage),
            Err(Error::UnsupportedEncoding { .. })
        ));
    }

    #[test]
    fn write_then_load_keeps_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let clip = AudioClip::new(vec![0.5, -0.25, 0.0, 0.9], 16000).unwrap();
        write_wav(&p, &clip).unwrap();
        let back = load_wav(&p).unwrap();
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 16384.0);
        }
    }

    #[test]
    fn thirty_seconds_give_six_five_second_segments() {
        let clip = AudioClip::new(vec![0.0; 30 * 100], 100).unwrap();
        assert_eq!(clip.segments(5.0).len(), 6);
        let short = AudioClip::new(vec![0.0; 29 * 100 + 99], 100).unwrap();
        assert_eq!(short.segments(5.0).len(), 5);
    }
}
