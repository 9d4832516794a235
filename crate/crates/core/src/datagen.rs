//! Procedural genre-like audio, labeled datasets, stratified splits and the
//! GTZAN directory loader.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, AudioClip};
use crate::error::{Error, Result};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed derived from a master seed and a path of indices.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// Decaying harmonic series on a fundamental drawn from `[f0_lo, f0_hi]`.
    HarmonicStack {
        f0_lo: f64,
        f0_hi: f64,
        harmonics: usize,
    },
    /// White noise band-limited to a sub-band of `[lo_hz, hi_hz]`.
    BandNoise { lo_hz: f64, hi_hz: f64 },
    /// Short decaying broadband clicks at a rate drawn from `[rate_lo, rate_hi]` Hz.
    PulseTrain {
        rate_lo: f64,
        rate_hi: f64,
        click_ms: f64,
    },
    /// Linear sweep across the clip from a start to an end frequency.
    Chirp {
        start_lo: f64,
        start_hi: f64,
        end_lo: f64,
        end_hi: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenreSpec {
    pub name: String,
    pub generator: Generator,
    /// Per-component amplitude multiplier range.
    pub amplitude_jitter: (f64, f64),
    /// White-noise level relative to the signal RMS.
    pub noise_floor: (f64, f64),
}

fn valid_range((lo, hi): (f64, f64)) -> bool {
    lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi
}

impl GenreSpec {
    pub fn new(name: &str, generator: Generator) -> Self {
        GenreSpec {
            name: name.into(),
            generator,
            amplitude_jitter: (0.7, 1.3),
            noise_floor: (0.01, 0.05),
        }
    }

    pub fn with_noise_floor(mut self, lo: f64, hi: f64) -> Self {
        self.noise_floor = (lo, hi);
        self
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = sample_rate as f64 / 2.0;
        let in_band = |f: f64| f > 0.0 && f < nyq;
        let bad = |what: &str| Err(Error::Config(format!("genre {}: {what}", self.name)));
        if !valid_range(self.amplitude_jitter) || !valid_range(self.noise_floor) {
            return bad("jitter and noise ranges must be ordered non-negative intervals");
        }
        match &self.generator {
            Generator::HarmonicStack {
                f0_lo,
                f0_hi,
                harmonics,
            } => {
                if !(in_band(*f0_lo) && f0_lo <= f0_hi && in_band(*f0_hi)) || *harmonics == 0 {
                    return bad("fundamental band outside (0, nyquist) or no harmonics");
                }
            }
            Generator::BandNoise { lo_hz, hi_hz } => {
                if !(in_band(*lo_hz) && lo_hz < hi_hz && in_band(*hi_hz)) {
                    return bad("noise band outside (0, nyquist)");
                }
            }
            Generator::PulseTrain {
                rate_lo,
                rate_hi,
                click_ms,
            } => {
                if !(*rate_lo > 0.0 && rate_lo <= rate_hi && *click_ms > 0.0) {
                    return bad("pulse rate and click length must be positive");
                }
            }
            Generator::Chirp {
                start_lo,
                start_hi,
                end_lo,
                end_hi,
            } => {
                let ok = [start_lo, start_hi, end_lo, end_hi]
                    .iter()
                    .all(|f| in_band(**f))
                    && start_lo <= start_hi
                    && end_lo <= end_hi;
                if !ok {
                    return bad("chirp endpoints outside (0, nyquist)");
                }
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Renders one clip; identical `(spec, duration, rate, seed)` give identical
/// samples. Output is peak-normalized to 0.9.
pub fn synth_clip(
    spec: &GenreSpec,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<AudioClip> {
    spec.validate(sample_rate)?;
    if !(duration_s >= 1.0) {
        return Err(Error::Config(format!(
            "clip duration must be >= 1 s, got {duration_s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let tau = std::f64::consts::TAU;
    let mut x = vec![0.0; n];
    match &spec.generator {
        Generator::HarmonicStack {
            f0_lo,
            f0_hi,
            harmonics,
        } => {
            let f0 = draw(&mut rng, (*f0_lo, *f0_hi));
            for h in 1..=*harmonics {
                let f = f0 * h as f64;
                if f >= sr / 2.0 {
                    break;
                }
                let amp = draw(&mut rng, spec.amplitude_jitter) / (h * h) as f64;
                let phase = rng.random_range(0.0..tau);
                for (i, v) in x.iter_mut().enumerate() {
                    *v += amp * (tau * f * i as f64 / sr + phase).sin();
                }
            }
        }
        Generator::BandNoise { lo_hz, hi_hz } => {
            let width = hi_hz - lo_hz;
            let lo = lo_hz + rng.random_range(0.0..0.1) * width;
            let hi = hi_hz - rng.random_range(0.0..0.1) * width;
            let mut buf: Vec<Complex<f64>> = (0..n)
                .map(|_| Complex::new(gaussian(&mut rng), 0.0))
                .collect();
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(n).process(&mut buf);
            for (k, c) in buf.iter_mut().enumerate() {
                let f = k.min(n - k) as f64 * sr / n as f64;
                if f < lo || f > hi {
                    *c = Complex::new(0.0, 0.0);
                }
            }
            planner.plan_fft_inverse(n).process(&mut buf);
            for (v, c) in x.iter_mut().zip(&buf) {
                *v = c.re;
            }
        }
        Generator::PulseTrain {
            rate_lo,
            rate_hi,
            click_ms,
        } => {
            let rate = draw(&mut rng, (*rate_lo, *rate_hi));
            let period = sr / rate;
            let click_len = ((click_ms / 1000.0) * sr).max(1.0) as usize;
            let decay = click_len as f64 / 4.0;
            let mut start = rng.random_range(0.0..period);
            while (start as usize) < n {
                let amp = draw(&mut rng, spec.amplitude_jitter);
                let s0 = start as usize;
                for i in 0..click_len.min(n - s0) {
                    x[s0 + i] += amp * gaussian(&mut rng) * (-(i as f64) / decay).exp();
                }
                start += period;
            }
        }
        Generator::Chirp {
            start_lo,
            start_hi,
            end_lo,
            end_hi,
        } => {
            let f_start = draw(&mut rng, (*start_lo, *start_hi));
            let f_end = draw(&mut rng, (*end_lo, *end_hi));
            let phase = rng.random_range(0.0..tau);
            let total = n as f64 / sr;
            let amp = draw(&mut rng, spec.amplitude_jitter);
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / sr;
                *v = amp
                    * (tau * (f_start * t + (f_end - f_start) * t * t / (2.0 * total)) + phase)
                        .sin();
            }
        }
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let level = draw(&mut rng, spec.noise_floor) * rms;
    for v in x.iter_mut() {
        *v += level * gaussian(&mut rng);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    AudioClip::new(x, sample_rate)
}

/// Four spectrally distinct classes.
pub fn separable_suite() -> Vec<GenreSpec> {
    vec![
        GenreSpec::new(
            "harmonic",
            Generator::HarmonicStack {
                f0_lo: 110.0,
                f0_hi: 440.0,
                harmonics: 6,
            },
        ),
        GenreSpec::new(
            "band_noise",
            Generator::BandNoise {
                lo_hz: 4000.0,
                hi_hz: 8000.0,
            },
        ),
        GenreSpec::new(
            "pulse_train",
            Generator::PulseTrain {
                rate_lo: 3.5,
                rate_hi: 4.5,
                click_ms: 20.0,
            },
        ),
        GenreSpec::new(
            "chirp",
            Generator::Chirp {
                start_lo: 400.0,
                start_hi: 600.0,
                end_lo: 4500.0,
                end_hi: 5500.0,
            },
        ),
    ]
}

/// Four classes with pairwise overlapping bands and heavier noise, so that
/// accuracy depends on how many labels are available.
pub fn confusable_suite() -> Vec<GenreSpec> {
    vec![
        GenreSpec::new(
            "low_harmonic",
            Generator::HarmonicStack {
                f0_lo: 110.0,
                f0_hi: 300.0,
                harmonics: 6,
            },
        )
        .with_noise_floor(0.5, 2.0),
        GenreSpec::new(
            "high_harmonic",
            Generator::HarmonicStack {
                f0_lo: 220.0,
                f0_hi: 440.0,
                harmonics: 6,
            },
        )
        .with_noise_floor(0.5, 2.0),
        GenreSpec::new(
            "low_noise",
            Generator::BandNoise {
                lo_hz: 2500.0,
                hi_hz: 6500.0,
            },
        )
        .with_noise_floor(0.5, 2.0),
        GenreSpec::new(
            "high_noise",
            Generator::BandNoise {
                lo_hz: 3500.0,
                hi_hz: 7500.0,
            },
        )
        .with_noise_floor(0.5, 2.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClipSource {
    Synthetic {
        spec: GenreSpec,
        seed: u64,
        duration_s: f64,
    },
    File {
        path: PathBuf,
        segment: usize,
        segment_s: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: usize,
    pub class: usize,
    /// Source-clip identity; segments of one recording share a group.
    pub group: usize,
    pub source: ClipSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub clips: Vec<ClipRecord>,
    pub class_names: Vec<String>,
    /// Files skipped while loading.
    pub warnings: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for c in &self.clips {
            counts[c.class] += 1;
        }
        counts
    }

    /// Renders or loads the clips at `indices`, in that order. Consecutive
    /// segments of one file are read from a single load.
    pub fn materialize(
        &self,
        indices: &[usize],
        sample_rate: u32,
        mut each: impl FnMut(usize, AudioClip) -> Result<()>,
    ) -> Result<()> {
        let mut cached: Option<(PathBuf, AudioClip)> = None;
        for &i in indices {
            let rec = self
                .clips
                .get(i)
                .ok_or_else(|| Error::Index(format!("clip {i} of {}", self.clips.len())))?;
            let clip = match &rec.source {
                ClipSource::Synthetic {
                    spec,
                    seed,
                    duration_s,
                } => synth_clip(spec, *duration_s, sample_rate, *seed)?,
                ClipSource::File {
                    path,
                    segment,
                    segment_s,
                } => {
                    if cached.as_ref().map(|(p, _)| p != path).unwrap_or(true) {
                        let audio = load_wav(path)?;
                        if audio.sample_rate() != sample_rate {
                            return Err(Error::SampleRate {
                                expected: sample_rate,
                                found: audio.sample_rate(),
                            });
                        }
                        cached = Some((path.clone(), audio));
                    }
                    let audio = &cached.as_ref().expect("just cached").1;
                    audio
                        .segments(*segment_s)
                        .into_iter()
                        .nth(*segment)
                        .ok_or_else(|| {
                            Error::Index(format!("segment {segment} of {}", path.display()))
                        })?
                }
            };
            each(i, clip)?;
        }
        Ok(())
    }
}

/// Balanced synthetic dataset; clip `k` of class `c` is seeded by
/// `derive_seed(seed, [c, k])`.
pub fn generate_dataset(
    specs: &[GenreSpec],
    clips_per_class: usize,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<LabeledDataset> {
    if specs.len() < 2 {
        return Err(Error::Config("need at least two genre specs".into()));
    }
    if clips_per_class < 2 {
        return Err(Error::Config("need at least two clips per class".into()));
    }
    if !(duration_s >= 1.0) {
        return Err(Error::Config(format!(
            "clip duration must be >= 1 s, got {duration_s}"
        )));
    }
    for s in specs {
        s.validate(sample_rate)?;
    }
    let mut clips = Vec::with_capacity(specs.len() * clips_per_class);
    for (class, spec) in specs.iter().enumerate() {
        for k in 0..clips_per_class {
            let id = clips.len();
            clips.push(ClipRecord {
                id,
                class,
                group: id,
                source: ClipSource::Synthetic {
                    spec: spec.clone(),
                    seed: derive_seed(seed, &[class as u64, k as u64]),
                    duration_s,
                },
            });
        }
    }
    Ok(LabeledDataset {
        clips,
        class_names: specs.iter().map(|s| s.name.clone()).collect(),
        warnings: 0,
    })
}

/// Node roles after splitting. A node is in at most one of `labeled` and
/// `test`; training-pool nodes without a visible label are `unlabeled`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMasks {
    pub labeled: Vec<bool>,
    pub unlabeled: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMasks {
    pub fn count(mask: &[bool]) -> usize {
        mask.iter().filter(|&&m| m).count()
    }

    pub fn train_pool(&self) -> Vec<bool> {
        self.test.iter().map(|t| !t).collect()
    }
}

/// Largest-remainder apportionment of `round(total · fraction)` items over
/// classes of the given sizes; ties go to the lower class index.
fn apportion(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = ((total as f64 * fraction).round() as usize).min(total);
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 * target as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let mut left = target - alloc.iter().sum::<usize>();
    for &c in order.iter().cycle().take(sizes.len() * 2) {
        if left == 0 {
            break;
        }
        if alloc[c] < sizes[c] {
            alloc[c] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Stratified, group-aware split: `test_fraction` of source groups go to
/// test, then `labeled_fraction` of the remaining pool keep their labels.
pub fn split_dataset(
    dataset: &LabeledDataset,
    test_fraction: f64,
    labeled_fraction: f64,
    seed: u64,
) -> Result<SplitMasks> {
    for (name, f) in [
        ("test_fraction", test_fraction),
        ("labeled_fraction", labeled_fraction),
    ] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("{name} must be in (0, 1], got {f}")));
        }
    }
    let k = dataset.n_classes();
    let mut groups: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); k];
    let mut group_class: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, c) in dataset.clips.iter().enumerate() {
        if let Some(&prev) = group_class.get(&c.group) {
            if prev != c.class {
                return Err(Error::Config(format!(
                    "group {} spans two classes",
                    c.group
                )));
            }
        }
        group_class.insert(c.group, c.class);
        groups[c.class].entry(c.group).or_default().push(i);
    }
    for (c, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::Config(format!(
                "infeasible stratification: class {} has {} source clip(s)",
                dataset.class_names[c],
                g.len()
            )));
        }
    }
    let mut shuffled: Vec<Vec<usize>> = groups
        .iter()
        .enumerate()
        .map(|(c, g)| {
            let mut ids: Vec<usize> = g.keys().copied().collect();
            ids.shuffle(&mut rng_for(seed, &[0x5e11, c as u64]));
            ids
        })
        .collect();

    let sizes: Vec<usize> = shuffled.iter().map(Vec::len).collect();
    let n_test = apportion(&sizes, test_fraction);
    let pools: Vec<Vec<usize>> = shuffled
        .iter_mut()
        .zip(&n_test)
        .map(|(ids, &t)| ids.split_off(t))
        .collect();
    let pool_sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
    let n_labeled = apportion(&pool_sizes, labeled_fraction);

    let n = dataset.len();
    let mut masks = SplitMasks {
        labeled: vec![false; n],
        unlabeled: vec![false; n],
        test: vec![false; n],
    };
    for c in 0..k {
        for gid in &shuffled[c] {
            for &i in &groups[c][gid] {
                masks.test[i] = true;
            }
        }
        for (rank, gid) in pools[c].iter().enumerate() {
            for &i in &groups[c][gid] {
                if rank < n_labeled[c] {
                    masks.labeled[i] = true;
                } else {
                    masks.unlabeled[i] = true;
                }
            }
        }
    }
    Ok(masks)
}

/// Reads a `root/<genre>/*.wav` tree. Class names are the sorted genre
/// directory names; every file contributes its whole `segment_s` segments.
/// Unreadable files and files at another sample rate are skipped and counted
/// in `warnings`.
pub fn load_gtzan_layout(root: &Path, segment_s: f64, sample_rate: u32) -> Result<LabeledDataset> {
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let genre_dirs: Vec<PathBuf> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if genre_dirs.is_empty() {
        return Err(Error::Config(format!(
            "no genre directories under {}",
            root.display()
        )));
    }
    let mut dataset = LabeledDataset {
        clips: Vec::new(),
        class_names: Vec::new(),
        warnings: 0,
    };
    let mut group = 0;
    for dir in genre_dirs {
        let class = dataset.class_names.len();
        dataset.class_names.push(
            dir.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        let files = read_dir(&dir)?.into_iter().filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        });
        for path in files {
            let segments = match wav_segment_count(&path, segment_s, sample_rate) {
                Ok(s) if s > 0 => s,
                Ok(_) => {
                    log::warn!("skipping {}: shorter than one segment", path.display());
                    dataset.warnings += 1;
                    continue;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    dataset.warnings += 1;
                    continue;
                }
            };
            for segment in 0..segments {
                let id = dataset.clips.len();
                dataset.clips.push(ClipRecord {
                    id,
                    class,
                    group,
                    source: ClipSource::File {
                        path: path.clone(),
                        segment,
                        segment_s,
                    },
                });
            }
            group += 1;
        }
    }
    if dataset.clips.is_empty() {
        return Err(Error::Config(format!(
            "no readable WAV files under {}",
            root.display()
        )));
    }
    Ok(dataset)
}

fn wav_segment_count(path: &Path, segment_s: f64, sample_rate: u32) -> Result<usize> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::UnsupportedEncoding {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "not PCM16".into(),
        });
    }
    if spec.sample_rate != sample_rate {
        return Err(Error::SampleRate {
            expected: sample_rate,
            found: spec.sample_rate,
        });
    }
    let frames = reader.duration() as usize;
    let seg = (segment_s * sample_rate as f64).round() as usize;
    Ok(frames / seg.max(1))
}

/// Keeps at most `per_class` source groups per class (seeded choice),
/// renumbering clip ids.
pub fn subsample_groups(dataset: &LabeledDataset, per_class: usize, seed: u64) -> LabeledDataset {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
    for c in &dataset.clips {
        if !by_class[c.class].contains(&c.group) {
            by_class[c.class].push(c.group);
        }
    }
    let mut keep = std::collections::BTreeSet::new();
    for (c, gs) in by_class.iter_mut().enumerate() {
        gs.shuffle(&mut rng_for(seed, &[0x5ab5, c as u64]));
        keep.extend(gs.iter().take(per_class).copied());
    }
    let clips = dataset
        .clips
        .iter()
        .filter(|c| keep.contains(&c.group))
        .enumerate()
        .map(|(id, c)| ClipRecord { id, ..c.clone() })
        .collect();
    LabeledDataset {
        clips,
        class_names: dataset.class_names.clone(),
        warnings: dataset.warnings,
    }
}
