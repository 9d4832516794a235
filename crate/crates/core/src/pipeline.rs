//! Experiment driver: configuration, on-disk stages and metrics.
//!
//! Each stage reads what earlier stages wrote under the output directory:
//!
//! ```text
//! prepare        dataset.csv split.json spectrograms.tensor
//! train-siamese  frac_XXX/siamese.{bin,manifest.json} pairs.csv siamese_trace.json
//! embed          frac_XXX/embeddings.tensor graph.csv
//! train-gnn      frac_XXX/gnn.* baseline.* gnn_trace.{json,csv} baseline_trace.json
//! evaluate       frac_XXX/confusion.{csv,pgm} projection.csv, metrics.json metrics.txt
//! explain        explain/*.pgm *.ppm *.csv summary.csv
//! ```
//!
//! `frac_XXX` is the labeled fraction in percent. Stage wall-clock times go
//! to `timings.json` so that `metrics.json` depends only on config and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    confusable_suite, derive_seed, generate_dataset, load_gtzan_layout, separable_suite,
    split_dataset, subsample_groups, ClipSource, GenreSpec, LabeledDataset, SplitMasks,
};
use crate::error::{Error, Result};
use crate::gradcam::{write_explanation, Explainer};
use crate::graph::{
    predict_and_score, train_baseline, train_gnn, EmbeddingGraph, GnnConfig, GnnModel, MlpBaseline,
    Score, TrainTrace,
};
use crate::io::{read_tensor, write_bytes, write_pgm, write_tensor};
use crate::mel::{fixed_size_crop, MelAnalyzer, MelSpectrogram, SpectrogramConfig};
use crate::siamese::{
    embed_all, evaluate_pairs, sample_pairs, train_siamese, BackboneConfig, PairEvaluation,
    SiameseConfig, SiameseModel, SiameseTrace, TapLayer,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Gtzan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticSuite {
    Separable,
    Confusable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub suite: SyntheticSuite,
    /// TOML file of `[[genre]]` tables replacing the built-in suite.
    pub genre_file: Option<PathBuf>,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub gtzan_dir: Option<PathBuf>,
    pub segment_s: f64,
    /// Cap on source recordings per class (GTZAN).
    pub max_files_per_class: Option<usize>,
    pub write_audio: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            suite: SyntheticSuite::Separable,
            genre_file: None,
            clips_per_class: 50,
            duration_s: 5.0,
            gtzan_dir: None,
            segment_s: 5.0,
            max_files_per_class: None,
            write_audio: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub labeled_fractions: Vec<f64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.3,
            labeled_fractions: vec![0.3, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Class names to explain; empty means every class.
    pub classes: Vec<String>,
    /// Test clips explained per class; 0 disables the stage.
    pub clips_per_class: usize,
    pub threshold: f64,
    pub tap: TapLayer,
    /// Which split's models to explain; defaults to the largest fraction.
    pub labeled_fraction: Option<f64>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            classes: Vec::new(),
            clips_per_class: 3,
            threshold: 0.5,
            tap: TapLayer::LastConv,
            labeled_fraction: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random choice is derived from it.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub spectrogram: SpectrogramConfig,
    pub backbone: BackboneConfig,
    pub siamese: SiameseConfig,
    pub gnn: GnnConfig,
    pub splits: SplitConfig,
    pub explain: ExplainConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub labeled_fractions: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults, then the file at `path` (if any), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "config file {} does not exist",
                        p.display()
                    )));
                }
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if overrides.seed.is_some() {
            cfg.seed = overrides.seed;
        }
        if overrides.output_dir.is_some() {
            cfg.output_dir = overrides.output_dir.clone();
        }
        if !overrides.labeled_fractions.is_empty() {
            cfg.splits.labeled_fractions = overrides.labeled_fractions.clone();
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir.as_deref().ok_or_else(|| {
            Error::Config("an output directory is required (config `output_dir` or --out)".into())
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.output_dir()?;
        self.spectrogram.validate()?;
        self.backbone.validate()?;
        self.siamese.validate()?;
        self.gnn.validate()?;
        if self.spectrogram.n_mels != self.backbone.input_rows {
            return Err(Error::Config(format!(
                "spectrogram.n_mels {} must equal backbone.input_rows {}",
                self.spectrogram.n_mels, self.backbone.input_rows
            )));
        }
        let fr = &self.splits.labeled_fractions;
        if fr.is_empty() {
            return Err(Error::Config("splits.labeled_fractions is empty".into()));
        }
        for &f in fr.iter().chain([&self.splits.test_fraction]) {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
            }
        }
        let mut tags: Vec<String> = fr.iter().map(|&f| fraction_tag(f)).collect();
        tags.sort();
        tags.dedup();
        if tags.len() != fr.len() {
            return Err(Error::Config(
                "labeled fractions must differ at percent resolution".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.explain.threshold) {
            return Err(Error::Config("explain.threshold outside [0, 1]".into()));
        }
        let ds = &self.dataset;
        match ds.source {
            DatasetSource::Synthetic => {
                if let Some(p) = &ds.genre_file {
                    if !p.is_file() {
                        return Err(Error::MissingFile(p.clone()));
                    }
                }
            }
            DatasetSource::Gtzan => match &ds.gtzan_dir {
                Some(p) if p.is_dir() => {}
                Some(p) => return Err(Error::MissingFile(p.clone())),
                None => {
                    return Err(Error::Config(
                        "dataset.gtzan_dir is required for the gtzan source".into(),
                    ))
                }
            },
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenreFile {
    genre: Vec<GenreSpec>,
}

pub fn load_genre_file(path: &Path) -> Result<Vec<GenreSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: GenreFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(f.genre)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    TrainSiamese,
    Embed,
    TrainGnn,
    Evaluate,
    Explain,
    All,
}

impl Stage {
    pub const SEQUENCE: [Stage; 6] = [
        Stage::Prepare,
        Stage::TrainSiamese,
        Stage::Embed,
        Stage::TrainGnn,
        Stage::Evaluate,
        Stage::Explain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainSiamese => "train-siamese",
            Stage::Embed => "embed",
            Stage::TrainGnn => "train-gnn",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::All => "all",
        }
    }
}

/// Directory name of a labeled fraction: `frac_030` for 0.3.
pub fn fraction_tag(f: f64) -> String {
    format!("frac_{:03}", (f * 100.0).round() as u32)
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// What `prepare` records about the dataset and its splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub class_names: Vec<String>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub test: Vec<bool>,
    /// Labeled mask per fraction tag.
    pub labeled: BTreeMap<String, Vec<bool>>,
    pub skipped_files: usize,
}

impl SplitRecord {
    pub fn masks(&self, fraction: f64) -> Result<SplitMasks> {
        let tag = fraction_tag(fraction);
        let labeled = self
            .labeled
            .get(&tag)
            .ok_or_else(|| Error::Config(format!("labeled fraction {fraction} was not prepared")))?
            .clone();
        let unlabeled = labeled
            .iter()
            .zip(&self.test)
            .map(|(&l, &t)| !l && !t)
            .collect();
        Ok(SplitMasks {
            labeled,
            unlabeled,
            test: self.test.clone(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl From<&Score> for ScoreSummary {
    fn from(s: &Score) -> Self {
        ScoreSummary {
            accuracy: s.accuracy,
            confusion: s.confusion.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub labeled_fraction: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub siamese_test_pairs: PairEvaluation,
    pub siamese_loss: Vec<f64>,
    pub siamese_train_accuracy: Vec<f64>,
    pub gnn: ScoreSummary,
    pub gnn_loss: Vec<f64>,
    pub gnn_train_accuracy: Vec<f64>,
    pub baseline: ScoreSummary,
    pub baseline_loss: Vec<f64>,
    /// Share of embedding variance along the two projection axes.
    pub projection_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub n_clips: usize,
    pub class_names: Vec<String>,
    pub splits: Vec<SplitMetrics>,
}

impl MetricsReport {
    /// Aligned text table, one row per labeled fraction.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "seed {}  clips {}  classes {}",
            self.seed,
            self.n_clips,
            self.class_names.join(",")
        );
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>10} {:>6} {:>12} {:>10} {:>10}",
            "labeled", "n_label", "n_unlabel", "n_test", "pair_acc", "gnn_acc", "2layer_nn"
        );
        for m in &self.splits {
            let _ = writeln!(
                s,
                "{:>7.0}% {:>8} {:>10} {:>6} {:>12.4} {:>10.4} {:>10.4}",
                m.labeled_fraction * 100.0,
                m.n_labeled,
                m.n_unlabeled,
                m.n_test,
                m.siamese_test_pairs.accuracy,
                m.gnn.accuracy,
                m.baseline.accuracy
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[n, 2]`.
    pub coords: Tensor,
    /// Variance along the two axes over total variance, in `[0, 1]`.
    pub explained: f64,
}

/// Projection onto the two leading principal directions of the centred
/// rows. Axis signs are fixed so the largest-magnitude loading is positive.
pub fn project_2d(x: &Tensor) -> Result<Projection> {
    if x.rank() != 2 || x.shape()[0] < 3 {
        return Err(Error::shape(
            "project_2d",
            format!("{:?}, need at least 3 rows", x.shape()),
        ));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut()
            .zip(x.row(i))
            .for_each(|(m, v)| *m += v / n as f64);
    }
    let centred: Vec<f64> = (0..n)
        .flat_map(|i| x.row(i).iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let c = nalgebra::DMatrix::from_row_slice(n, d, &centred);
    let cov = c.transpose() * &c / (n as f64 - 1.0).max(1.0);
    let total: f64 = cov.trace();
    if !(total > 1e-300) {
        log::warn!("project_2d: embeddings are identical; returning zero coordinates");
        return Ok(Projection {
            coords: Tensor::zeros(&[n, 2]),
            explained: 0.0,
        });
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite")
            .then(a.cmp(&b))
    });
    let mut coords = vec![0.0; n * 2];
    let mut captured = 0.0;
    for (axis, &k) in order.iter().take(2.min(d)).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        captured += eig.eigenvalues[k].max(0.0);
        for i in 0..n {
            coords[i * 2 + axis] = centred[i * d..(i + 1) * d]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    Ok(Projection {
        coords: Tensor::new(vec![n, 2], coords)?,
        explained: (captured / total).clamp(0.0, 1.0),
    })
}

/// Paths of one run.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }
    pub fn dataset_csv(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }
    pub fn split_json(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn spectrograms(&self) -> PathBuf {
        self.root.join("spectrograms.tensor")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn metrics_txt(&self) -> PathBuf {
        self.root.join("metrics.txt")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
    pub fn explain_dir(&self) -> PathBuf {
        self.root.join("explain")
    }
    pub fn frac(&self, f: f64) -> PathBuf {
        self.root.join(fraction_tag(f))
    }
    pub fn siamese(&self, f: f64) -> PathBuf {
        self.frac(f).join("siamese")
    }
    pub fn gnn(&self, f: f64) -> PathBuf {
        self.frac(f).join("gnn")
    }
    pub fn baseline(&self, f: f64) -> PathBuf {
        self.frac(f).join("baseline")
    }
    pub fn embeddings(&self, f: f64) -> PathBuf {
        self.frac(f).join("embeddings.tensor")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// Seed streams for each consumer of randomness.
const SEED_DATA: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_SIAMESE: u64 = 3;
const SEED_PAIRS: u64 = 4;
const SEED_GNN: u64 = 5;
const SEED_BASELINE: u64 = 6;
const SEED_EVAL: u64 = 7;

/// Runs one stage (or all of them) under the output-directory lock.
/// Returns the metrics when the stage produces them.
pub fn run_pipeline(config: &ExperimentConfig, stage: Stage) -> Result<Option<MetricsReport>> {
    config.validate()?;
    let out = config.output_dir()?;
    let _lock = OutputLock::acquire(out)?;
    let layout = Layout::new(out);
    let stages: Vec<Stage> = if stage == Stage::All {
        Stage::SEQUENCE.to_vec()
    } else {
        vec![stage]
    };
    let mut report = None;
    for s in stages {
        let started = Instant::now();
        log::info!("stage {}", s.name());
        match s {
            Stage::Prepare => prepare(config, &layout)?,
            Stage::TrainSiamese => stage_train_siamese(config, &layout)?,
            Stage::Embed => stage_embed(config, &layout)?,
            Stage::TrainGnn => stage_train_gnn(config, &layout)?,
            Stage::Evaluate => report = Some(stage_evaluate(config, &layout)?),
            Stage::Explain => stage_explain(config, &layout)?,
            Stage::All => unreachable!("expanded above"),
        }
        record_timing(&layout, s, started.elapsed().as_secs_f64())?;
    }
    Ok(report)
}

fn record_timing(layout: &Layout, stage: Stage, seconds: f64) -> Result<()> {
    let path = layout.timings();
    let mut t: BTreeMap<String, f64> = if path.exists() {
        read_json(&path)?
    } else {
        BTreeMap::new()
    };
    t.insert(stage.name().into(), seconds);
    write_json(&path, &t)
}

/// Builds the dataset described by the config.
pub fn build_dataset(config: &ExperimentConfig) -> Result<LabeledDataset> {
    let ds = &config.dataset;
    let sr = config.spectrogram.sample_rate;
    match ds.source {
        DatasetSource::Synthetic => {
            let specs = match &ds.genre_file {
                Some(p) => load_genre_file(p)?,
                None => match ds.suite {
                    SyntheticSuite::Separable => separable_suite(),
                    SyntheticSuite::Confusable => confusable_suite(),
                },
            };
            generate_dataset(
                &specs,
                ds.clips_per_class,
                ds.duration_s,
                sr,
                derive_seed(config.seed()?, &[SEED_DATA]),
            )
        }
        DatasetSource::Gtzan => {
            let root = ds.gtzan_dir.as_deref().expect("validated");
            let full = load_gtzan_layout(root, ds.segment_s, sr)?;
            Ok(match ds.max_files_per_class {
                Some(k) => subsample_groups(&full, k, derive_seed(config.seed()?, &[SEED_DATA])),
                None => full,
            })
        }
    }
}

/// Fixed-size spectrograms `[n, n_mels, frames]` of every clip, computed in
/// parallel over source groups.
pub fn compute_spectrograms(
    dataset: &LabeledDataset,
    spec_cfg: &SpectrogramConfig,
    frames: usize,
) -> Result<Tensor> {
    let analyzer = MelAnalyzer::new(spec_cfg)?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in dataset.clips.iter().enumerate() {
        groups.entry(c.group).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let rendered: Vec<Vec<(usize, MelSpectrogram)>> = groups
        .par_iter()
        .map(|idx| {
            let mut out = Vec::with_capacity(idx.len());
            dataset.materialize(idx, spec_cfg.sample_rate, |i, clip| {
                out.push((i, fixed_size_crop(&analyzer.spectrogram(&clip)?, frames)));
                Ok(())
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut specs: Vec<Option<MelSpectrogram>> = vec![None; dataset.len()];
    for (i, s) in rendered.into_iter().flatten() {
        specs[i] = Some(s);
    }
    let mut data = Vec::with_capacity(dataset.len() * spec_cfg.n_mels * frames);
    for s in specs {
        data.extend_from_slice(s.expect("every clip rendered").values.data());
    }
    Tensor::new(vec![dataset.len(), spec_cfg.n_mels, frames], data)
}

fn describe_source(src: &ClipSource) -> String {
    match src {
        ClipSource::Synthetic {
            spec,
            seed,
            duration_s,
        } => {
            format!("synthetic:{}:seed={seed}:duration={duration_s}", spec.name)
        }
        ClipSource::File {
            path,
            segment,
            segment_s,
        } => {
            format!("{}#{}@{}s", path.display(), segment, segment_s)
        }
    }
}

fn prepare(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let seed = config.seed()?;
    let dataset = build_dataset(config)?;
    if dataset.warnings > 0 {
        log::warn!("{} audio file(s) skipped", dataset.warnings);
    }
    let split_seed = derive_seed(seed, &[SEED_SPLIT]);
    let mut labeled = BTreeMap::new();
    let mut test: Option<Vec<bool>> = None;
    for &f in &config.splits.labeled_fractions {
        let m = split_dataset(&dataset, config.splits.test_fraction, f, split_seed)?;
        if let Some(t) = &test {
            debug_assert_eq!(t, &m.test);
        }
        test = Some(m.test);
        labeled.insert(fraction_tag(f), m.labeled);
    }
    let record = SplitRecord {
        class_names: dataset.class_names.clone(),
        labels: dataset.labels(),
        groups: dataset.clips.iter().map(|c| c.group).collect(),
        test: test.expect("at least one fraction"),
        labeled,
        skipped_files: dataset.warnings,
    };

    let specs = compute_spectrograms(&dataset, &config.spectrogram, config.backbone.input_cols)?;
    write_tensor(&layout.spectrograms(), &specs)?;
    write_json(&layout.split_json(), &record)?;

    let path = layout.dataset_csv();
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec![
        "clip".to_string(),
        "class".into(),
        "class_name".into(),
        "group".into(),
        "source".into(),
        "split".into(),
    ];
    header.extend(
        record
            .labeled
            .keys()
            .map(|t| format!("labeled_{}", &t[5..])),
    );
    w.write_record(&header)?;
    for (i, c) in dataset.clips.iter().enumerate() {
        let mut rec = vec![
            i.to_string(),
            c.class.to_string(),
            dataset.class_names[c.class].clone(),
            c.group.to_string(),
            describe_source(&c.source),
            if record.test[i] { "test" } else { "train" }.to_string(),
        ];
        rec.extend(record.labeled.values().map(|m| (m[i] as u8).to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if config.dataset.write_audio {
        let dir = layout.root.join("audio");
        let all: Vec<usize> = (0..dataset.len()).collect();
        dataset.materialize(&all, config.spectrogram.sample_rate, |i, clip| {
            crate::audio::write_wav(&dir.join(format!("clip{i:04}.wav")), &clip)
        })?;
    }
    Ok(())
}

fn load_inputs(layout: &Layout) -> Result<(SplitRecord, Tensor)> {
    let record: SplitRecord = read_json(&layout.split_json())?;
    let specs = read_tensor(&layout.spectrograms())?;
    if specs.shape()[0] != record.labels.len() {
        return Err(Error::Format {
            path: layout.spectrograms(),
            detail: format!(
                "{} spectrograms for {} clips",
                specs.shape()[0],
                record.labels.len()
            ),
        });
    }
    Ok((record, specs))
}

fn siamese_config(config: &ExperimentConfig) -> Result<SiameseConfig> {
    Ok(SiameseConfig {
        seed: derive_seed(config.seed()?, &[SEED_SIAMESE]),
        ..config.siamese.clone()
    })
}

fn gnn_config(config: &ExperimentConfig, stream: u64) -> Result<GnnConfig> {
    Ok(GnnConfig {
        seed: derive_seed(config.seed()?, &[stream]),
        ..config.gnn.clone()
    })
}

fn stage_train_siamese(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let (record, specs) = load_inputs(layout)?;
    let cfg = siamese_config(config)?;
    for &f in &config.splits.labeled_fractions {
        let masks = record.masks(f)?;
        let mut model = SiameseModel::new(config.backbone.clone(), cfg.seed)?;
        let trace = train_siamese(&mut model, &specs, &record.labels, &masks.labeled, &cfg)?;
        model.save(&layout.siamese(f))?;
        write_json(&layout.frac(f).join("siamese_trace.json"), &trace)?;
        let audit = sample_pairs(
            &record.labels,
            &masks.labeled,
            1.0,
            derive_seed(config.seed()?, &[SEED_PAIRS]),
        )?;
        audit.write_csv(&layout.frac(f).join("pairs.csv"))?;
    }
    Ok(())
}

fn stage_embed(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let (record, specs) = load_inputs(layout)?;
    for &f in &config.splits.labeled_fractions {
        let model = SiameseModel::load(config.backbone.clone(), &layout.siamese(f))?;
        let emb = embed_all(&model.backbone, &specs)?;
        write_tensor(&layout.embeddings(f), &emb)?;
        let graph =
            EmbeddingGraph::from_split(emb, &record.labels, &record.masks(f)?, record.n_classes())?;
        graph.write_csv(&layout.frac(f).join("graph.csv"))?;
    }
    Ok(())
}

fn load_graph(layout: &Layout, record: &SplitRecord, f: f64) -> Result<EmbeddingGraph> {
    let emb = read_tensor(&layout.embeddings(f))?;
    EmbeddingGraph::from_split(emb, &record.labels, &record.masks(f)?, record.n_classes())
}

fn stage_train_gnn(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let record: SplitRecord = read_json(&layout.split_json())?;
    let gcfg = gnn_config(config, SEED_GNN)?;
    let bcfg = gnn_config(config, SEED_BASELINE)?;
    for &f in &config.splits.labeled_fractions {
        let graph = load_graph(layout, &record, f)?;
        let mut model = GnnModel::new(
            graph.feature_dim(),
            &gcfg.hidden,
            graph.n_classes,
            gcfg.seed,
        )?;
        let trace = train_gnn(&mut model, &graph, &gcfg)?;
        model.save(&layout.gnn(f))?;
        write_json(&layout.frac(f).join("gnn_trace.json"), &trace)?;
        trace.write_csv(&layout.frac(f).join("gnn_trace.csv"))?;
        let (mlp, btrace) = train_baseline(&graph, &bcfg)?;
        mlp.save(&layout.baseline(f))?;
        write_json(&layout.frac(f).join("baseline_trace.json"), &btrace)?;
    }
    Ok(())
}

fn stage_evaluate(config: &ExperimentConfig, layout: &Layout) -> Result<MetricsReport> {
    let record: SplitRecord = read_json(&layout.split_json())?;
    let eval_seed = derive_seed(config.seed()?, &[SEED_EVAL]);
    let mut splits = Vec::new();
    for &f in &config.splits.labeled_fractions {
        let graph = load_graph(layout, &record, f)?;
        let (d, k) = (graph.feature_dim(), graph.n_classes);
        let gnn = GnnModel::load(d, &config.gnn.hidden, k, &layout.gnn(f))?;
        let score = predict_and_score(&gnn, &graph)?;
        let baseline = MlpBaseline::load(d, k, &layout.baseline(f))?.score(&graph)?;
        let siamese = SiameseModel::load(config.backbone.clone(), &layout.siamese(f))?;
        let pairs = evaluate_pairs(
            &siamese.head,
            &graph.features,
            &record.labels,
            &graph.test_mask,
            eval_seed,
        )?;
        let s_trace: SiameseTrace = read_json(&layout.frac(f).join("siamese_trace.json"))?;
        let g_trace: TrainTrace = read_json(&layout.frac(f).join("gnn_trace.json"))?;
        let b_trace: TrainTrace = read_json(&layout.frac(f).join("baseline_trace.json"))?;

        score.write_confusion_csv(&layout.frac(f).join("confusion.csv"), &record.class_names)?;
        write_pgm(
            &layout.frac(f).join("confusion.pgm"),
            &score.confusion_image(),
        )?;
        let proj = project_2d(&graph.features)?;
        write_projection(
            &layout.frac(f).join("projection.csv"),
            &proj,
            &graph,
            &score,
        )?;

        let masks = record.masks(f)?;
        splits.push(SplitMetrics {
            labeled_fraction: f,
            n_labeled: SplitMasks::count(&masks.labeled),
            n_unlabeled: SplitMasks::count(&masks.unlabeled),
            n_test: SplitMasks::count(&masks.test),
            siamese_test_pairs: pairs,
            siamese_loss: s_trace.loss,
            siamese_train_accuracy: s_trace.accuracy,
            gnn: (&score).into(),
            gnn_loss: g_trace.loss,
            gnn_train_accuracy: g_trace.train_accuracy,
            baseline: (&baseline).into(),
            baseline_loss: b_trace.loss,
            projection_variance: proj.explained,
        });
    }
    let report = MetricsReport {
        seed: config.seed()?,
        n_clips: record.labels.len(),
        class_names: record.class_names.clone(),
        splits,
    };
    write_json(&layout.metrics_json(), &report)?;
    write_bytes(&layout.metrics_txt(), report.to_table().as_bytes())?;
    Ok(report)
}

fn write_projection(
    path: &Path,
    proj: &Projection,
    graph: &EmbeddingGraph,
    score: &Score,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "x", "y", "label", "predicted", "mask"])?;
    for i in 0..graph.len() {
        w.write_record([
            i.to_string(),
            format!("{:e}", proj.coords.row(i)[0]),
            format!("{:e}", proj.coords.row(i)[1]),
            graph.labels[i].map(|l| l.to_string()).unwrap_or_default(),
            score.predictions[i].to_string(),
            graph.role(i).as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn stage_explain(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let ec = &config.explain;
    if ec.clips_per_class == 0 {
        return Ok(());
    }
    let f = ec.labeled_fraction.unwrap_or_else(|| {
        config
            .splits
            .labeled_fractions
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let (record, specs) = load_inputs(layout)?;
    let graph = load_graph(layout, &record, f)?;
    let siamese = SiameseModel::load(config.backbone.clone(), &layout.siamese(f))?;
    let gnn = GnnModel::load(
        graph.feature_dim(),
        &config.gnn.hidden,
        graph.n_classes,
        &layout.gnn(f),
    )?;
    let predictions = predict_and_score(&gnn, &graph)?.predictions;
    let explainer = Explainer {
        backbone: &siamese.backbone,
        gnn: &gnn,
        graph: &graph,
        specs: &specs,
        tap: ec.tap,
    };
    let classes: Vec<usize> = if ec.classes.is_empty() {
        (0..record.n_classes()).collect()
    } else {
        ec.classes
            .iter()
            .map(|name| {
                record
                    .class_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Config(format!("explain.classes: unknown class {name}")))
            })
            .collect::<Result<_>>()?
    };
    let filterbank = crate::mel::mel_filterbank(&config.spectrogram)?;
    let dir = layout.explain_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let summary_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record([
        "clip",
        "class",
        "predicted",
        "peak_row",
        "peak_hz",
        "heatmap",
    ])?;
    for &c in &classes {
        let clips = (0..graph.len())
            .filter(|&i| graph.test_mask[i] && record.labels[i] == c)
            .take(ec.clips_per_class);
        for i in clips {
            let heat = explainer.explain(i, c)?;
            let spec = MelSpectrogram {
                values: specs.index_axis0(i),
                config: config.spectrogram.clone(),
            };
            let files = write_explanation(&dir, i, &heat, &spec, ec.threshold)?;
            let rows = heat.values.shape()[0];
            let row_sums: Vec<f64> = (0..rows).map(|r| heat.values.row(r).iter().sum()).collect();
            let peak = (0..rows).fold(0, |b, r| if row_sums[r] > row_sums[b] { r } else { b });
            w.write_record([
                i.to_string(),
                record.class_names[c].clone(),
                record.class_names[predictions[i]].clone(),
                peak.to_string(),
                format!("{:.1}", filterbank.centers_hz[peak]),
                files
                    .heatmap
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&summary_path, e))
}
