use std::f64::consts::PI;

use melgraph::audio::AudioClip;
use melgraph::mel::{
    fixed_size_crop, hz_to_mel, mel_filterbank, mel_spectrogram, MelAnalyzer, SpectrogramConfig,
};
use melgraph::Error;
use proptest::prelude::*;

fn sine(hz: f64, seconds: f64, sr: u32) -> AudioClip {
    let n = (seconds * sr as f64).round() as usize;
    let s = (0..n)
        .map(|i| 0.5 * (2.0 * PI * hz * i as f64 / sr as f64).sin())
        .collect();
    AudioClip::new(s, sr).unwrap()
}

fn noise(n: usize, seed: u64) -> AudioClip {
    // xorshift keeps the fixture independent of the crate's RNG plumbing
    let mut x = seed.max(1);
    let s = (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x as f64 / u64::MAX as f64) * 2.0 - 1.0
        })
        .map(|v| v * 0.4)
        .collect();
    AudioClip::new(s, 22050).unwrap()
}

#[test]
fn mel_formula_at_zero_and_700_hz() {
    assert_eq!(hz_to_mel(0.0), 0.0);
    let expected = 2595.0 * 2f64.log10();
    assert!((hz_to_mel(700.0) - expected).abs() < 1e-9);
}

#[test]
fn filterbank_rows_with_flat_spectrum_are_non_negative() {
    let cfg = SpectrogramConfig::default();
    let fb = mel_filterbank(&cfg).unwrap();
    let out = fb.apply(&vec![1.0; cfg.n_bins()]);
    assert_eq!(out.len(), 128);
    assert!(out.iter().all(|&v| v >= 0.0));
    assert!(fb.centers_hz.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn sine_peaks_in_the_filter_whose_centre_is_nearest() {
    let cfg = SpectrogramConfig::default();
    let fb = mel_filterbank(&cfg).unwrap();
    // oracle: nearest centre on the mel axis, computed from the centres directly
    let target = hz_to_mel(1000.0);
    let expected = (0..fb.centers_hz.len())
        .min_by(|&a, &b| {
            let da = (hz_to_mel(fb.centers_hz[a]) - target).abs();
            let db = (hz_to_mel(fb.centers_hz[b]) - target).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    let spec = mel_spectrogram(&sine(1000.0, 1.0, 22050), &cfg).unwrap();
    for t in 0..spec.n_frames() {
        let col: Vec<f64> = (0..128).map(|r| spec.values.row(r)[t]).collect();
        let arg = (0..128).fold(0, |b, r| if col[r] > col[b] { r } else { b });
        assert_eq!(arg, expected, "frame {t}");
    }
}

#[test]
fn exactly_one_frame() {
    let cfg = SpectrogramConfig::default();
    let spec = mel_spectrogram(&noise(cfg.n_fft, 3), &cfg).unwrap();
    assert_eq!(spec.n_frames(), 1);
    let short = mel_spectrogram(&noise(cfg.n_fft - 1, 3), &cfg);
    assert!(matches!(short, Err(Error::ClipTooShort { .. })));
}

#[test]
fn five_seconds_fit_the_backbone_input_after_cropping() {
    let cfg = SpectrogramConfig::default();
    let spec = mel_spectrogram(&noise(5 * 22050, 9), &cfg).unwrap();
    assert_eq!(spec.n_frames(), 1 + (5 * 22050 - 1024) / 512);
    let fixed = fixed_size_crop(&spec, 216);
    assert_eq!(fixed.values.shape(), &[128, 216]);
}

#[test]
fn crop_examples() {
    let cfg = SpectrogramConfig::default();
    let spec = mel_spectrogram(&noise(1024 + 199 * 512, 5), &cfg).unwrap();
    assert_eq!(spec.n_frames(), 200);
    let crop = fixed_size_crop(&spec, 100);
    for r in [0, 64, 127] {
        assert_eq!(crop.values.row(r), &spec.values.row(r)[50..150]);
    }
    let short = mel_spectrogram(&noise(1024 + 49 * 512, 5), &cfg).unwrap();
    let padded = fixed_size_crop(&short, 100);
    for r in [0, 127] {
        let row = padded.values.row(r);
        assert!(row[..25].iter().chain(&row[75..]).all(|&v| v == 0.0));
        assert_eq!(&row[25..75], short.values.row(r));
    }
    assert_eq!(fixed_size_crop(&crop, 100), crop);
}

#[test]
fn spectrograms_are_bit_reproducible() {
    let cfg = SpectrogramConfig::default();
    let clip = noise(30_000, 11);
    let a = mel_spectrogram(&clip, &cfg).unwrap();
    let b = MelAnalyzer::new(&cfg).unwrap().spectrogram(&clip).unwrap();
    assert_eq!(a.values.data(), b.values.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn frame_count_formula(extra in 0usize..6000, seed in 1u64..1000) {
        let cfg = SpectrogramConfig::default();
        let n = cfg.n_fft + extra;
        let spec = mel_spectrogram(&noise(n, seed), &cfg).unwrap();
        prop_assert_eq!(spec.values.shape(), &[128, 1 + extra / cfg.hop][..]);
        prop_assert!(spec.values.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn doubling_amplitude_never_lowers_mel_energy(seed in 1u64..1000, len in 1024usize..4096) {
        let analyzer = MelAnalyzer::new(&SpectrogramConfig::default()).unwrap();
        let clip = noise(len, seed);
        let a = analyzer.mel_energies(&clip).unwrap();
        let b = analyzer.mel_energies(&clip.scaled(2.0)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!(y >= x);
        }
    }
}
