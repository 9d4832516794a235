//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (visible without `--nocapture`) before asserting.
//!
//! The pipeline runs share one CPU-bound process, so every test holds a
//! global lock; the separable run is computed once and reused by the
//! localization check.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::{cam_tap_error, check_op_trial, gnn_loss_trial, siamese_loss_trial, CamFixture, OPS};
use melgraph::autodiff::gradcheck::DEFAULT_EPS;
use melgraph::datagen::{derive_seed, separable_suite, synth_clip};
use melgraph::gradcam::Explainer;
use melgraph::graph::{
    edge_message, extend_graph, gnn_forward, train_gnn, EdgeGcnLayer, EmbeddingGraph, GnnConfig,
    GnnModel,
};
use melgraph::mel::{fixed_size_crop, MelAnalyzer};
use melgraph::pipeline::{
    run_pipeline, ExperimentConfig, Layout, MetricsReport, SplitRecord, Stage,
};
use melgraph::siamese::{combine_features, embed_all, sample_pairs, SiameseModel, TapLayer};
use melgraph::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n}: {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "{}", line.trim_end());
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

/// Runs `trial` on successive seeds until `n` of them return a value,
/// returning the worst value and the number of seeds skipped.
fn worst_of(n: usize, mut trial: impl FnMut(u64) -> Option<f64>) -> (f64, usize) {
    let (mut worst, mut done, mut skipped) = (0.0f64, 0, 0);
    let mut seed = 0;
    while done < n {
        assert!(seed < 10 * n as u64, "too many draws near kinks");
        match trial(seed) {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => skipped += 1,
        }
        seed += 1;
    }
    (worst, skipped)
}

#[test]
fn c1_gradient_integrity() {
    let _g = serial();
    let started = Instant::now();
    let mut op_worst = (0.0f64, "");
    for &name in OPS {
        for t in 0..100 {
            let e = check_op_trial(name, t).max_rel_err;
            if e > op_worst.0 {
                op_worst = (e, name);
            }
        }
    }
    let (siamese, s_skip) = worst_of(100, |s| siamese_loss_trial(s, 1e-4).map(|r| r.max_rel_err));
    let (gnn, g_skip) = worst_of(100, |s| {
        gnn_loss_trial(s, DEFAULT_EPS).map(|r| r.max_rel_err)
    });
    let (cam, c_skip) = worst_of(100, |s| {
        let fx = CamFixture::new(s);
        let tap = if s % 2 == 0 {
            TapLayer::LastConv
        } else {
            TapLayer::Pooled
        };
        cam_tap_error(
            &fx.explainer(tap),
            (s % 4) as usize,
            (s / 4 % 3) as usize,
            1e-5,
        )
    });
    let elapsed = started.elapsed();
    let pass = op_worst.0 <= 1e-5
        && siamese.max(gnn).max(cam) <= 1e-4
        && elapsed < Duration::from_secs(120);
    verdict(
        1,
        pass,
        &format!(
            "{} ops x100 worst {:.1e} ({}); siamese {siamese:.1e} (skipped {s_skip}), \
             gnn {gnn:.1e} (skipped {g_skip}), cam tap {cam:.1e} (skipped {c_skip}); {:.1}s",
            OPS.len(),
            op_worst.0,
            op_worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c2_combined_feature_algebra() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..1000 {
        let a: Vec<f64> = (0..128).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..128).map(|_| rng.random_range(-10.0..10.0)).collect();
        let x = combine_features(&a, &b).unwrap();
        let y = combine_features(&b, &a).unwrap();
        let layout = x.len() == 512
            && x[..128] == a[..]
            && x[128..256] == b[..]
            && (0..128).all(|k| x[256 + k] == (a[k] - b[k]).powi(2) && x[384 + k] == a[k] * b[k]);
        let swap = x[256..] == y[256..] && x[..128] == y[128..256] && x[128..256] == y[..128];
        if !(layout && swap) {
            failures += 1;
        }
    }
    verdict(
        2,
        failures == 0,
        &format!("1000 pairs, {failures} violations"),
    );
}

#[test]
fn c3_pair_counts_match_enumeration() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut mismatches, mut worst_ratio, mut sampled) = (0, 1.0f64, 0);
    for t in 0..100 {
        let n = rng.random_range(4..=50);
        let k = rng.random_range(2..=6);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let labels: Vec<usize> = (0..n)
            .map(|_| {
                let mut u = rng.random_range(0.0..total);
                weights
                    .iter()
                    .position(|&w| {
                        u -= w;
                        u < 0.0
                    })
                    .unwrap_or(k - 1)
            })
            .collect();
        let (mut pos, mut neg) = (0, 0);
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] == labels[j] {
                    pos += 1;
                } else {
                    neg += 1;
                }
            }
        }
        match sample_pairs(&labels, &vec![true; n], 1.0, t) {
            Ok(set) => {
                sampled += 1;
                if (set.candidate_pos, set.candidate_neg) != (pos, neg) {
                    mismatches += 1;
                }
                let r = set.ratio();
                if (r - 1.0).abs() > (worst_ratio - 1.0).abs() {
                    worst_ratio = r;
                }
            }
            Err(Error::NoPairs(_)) if pos == 0 || neg == 0 => {}
            Err(_) => mismatches += 1,
        }
    }
    let pass = mismatches == 0 && (0.9..=1.1).contains(&worst_ratio);
    verdict(
        3,
        pass,
        &format!("100 instances ({sampled} sampled), {mismatches} count mismatches, ratio furthest from 1: {worst_ratio:.3}"),
    );
}

fn random_graph(n: usize, d: usize, classes: usize, rng: &mut ChaCha8Rng) -> EmbeddingGraph {
    let features = Tensor::randn(&[n, d], 1.0, rng);
    let labels = (0..n).map(|i| Some(i % classes)).collect();
    let test: Vec<bool> = (0..n).map(|i| i % 3 == 2).collect();
    let train = test.iter().map(|t| !t).collect();
    EmbeddingGraph::new(features, labels, train, test, classes).unwrap()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let data = perm.iter().flat_map(|&p| t.row(p).to_vec()).collect();
    Tensor::new(vec![perm.len(), t.shape()[1]], data).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn c4_graph_network_structure() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut perm_dev = 0.0f64;
    for t in 0..50 {
        let n = rng.random_range(2..16);
        let g = random_graph(n, 6, 3, &mut rng);
        let model = GnnModel::new(6, &[5, 4], 3, t).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let base = gnn_forward(&g, &model).unwrap().logits;
        let mut pg = g.clone();
        pg.features = permute_rows(&g.features, &perm);
        let moved = gnn_forward(&pg, &model).unwrap().logits;
        perm_dev = perm_dev.max(max_abs_diff(
            permute_rows(&base, &perm).data(),
            moved.data(),
        ));
    }

    let mut asymmetric = 0;
    for _ in 0..50 {
        let layer = EdgeGcnLayer {
            gamma_weight: Tensor::randn(&[8, 8], 0.5, &mut rng),
            gamma_bias: Tensor::randn(&[8], 0.1, &mut rng),
            phi_weight: Tensor::randn(&[16, 4], 0.5, &mut rng),
            phi_bias: Tensor::randn(&[4], 0.1, &mut rng),
        };
        let xi: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xj: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = edge_message(&xi, &xj, &layer).unwrap();
        let b = edge_message(&xj, &xi, &layer).unwrap();
        if max_abs_diff(&a, &b) > 1e-6 {
            asymmetric += 1;
        }
    }

    let mut dup_dev = 0.0f64;
    for t in 0..20 {
        let g = random_graph(10, 6, 3, &mut rng);
        let model = GnnModel::new(6, &[5, 4], 3, t).unwrap();
        let original = rng.random_range(0..10);
        let copy = Tensor::new(vec![1, 6], g.features.row(original).to_vec()).unwrap();
        let logits = gnn_forward(&extend_graph(&g, &copy).unwrap(), &model)
            .unwrap()
            .logits;
        dup_dev = dup_dev.max(max_abs_diff(logits.row(original), logits.row(10)));
    }

    // relabeling or hiding test labels must not change training at all
    let g = random_graph(12, 5, 3, &mut rng);
    let cfg = GnnConfig {
        epochs: 40,
        lr: 1e-2,
        hidden: vec![4, 3],
        seed: 3,
    };
    let mut hidden = g.clone();
    for i in 0..g.len() {
        if g.test_mask[i] {
            hidden.labels[i] = if i % 2 == 0 { None } else { Some((i + 1) % 3) };
        }
    }
    let mut a = GnnModel::new(5, &cfg.hidden, 3, 9).unwrap();
    let mut b = a.clone();
    let no_leak =
        train_gnn(&mut a, &g, &cfg).unwrap() == train_gnn(&mut b, &hidden, &cfg).unwrap() && a == b;

    let pass = perm_dev <= 1e-9 && asymmetric == 50 && dup_dev <= 1e-6 && no_leak;
    verdict(
        4,
        pass,
        &format!(
            "permutation {perm_dev:.1e}, asymmetric {asymmetric}/50, duplicate {dup_dev:.1e}, \
             test labels isolated: {no_leak}"
        ),
    );
}

struct SeparableRun {
    config: ExperimentConfig,
    dir: PathBuf,
    report: MetricsReport,
    elapsed: Duration,
}

/// Default configuration, four separable classes × 50 clips, seed 42, all
/// labels available to the GNN.
fn separable_run() -> &'static SeparableRun {
    static RUN: OnceLock<SeparableRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = scratch("separable");
        let mut config = ExperimentConfig::default();
        config.seed = Some(42);
        config.output_dir = Some(dir.clone());
        config.splits.labeled_fractions = vec![1.0];
        config.explain.clips_per_class = 0;
        let started = Instant::now();
        let report = run_pipeline(&config, Stage::All).unwrap().unwrap();
        SeparableRun {
            config,
            dir,
            report,
            elapsed: started.elapsed(),
        }
    })
}

#[test]
fn c5_separable_end_to_end() {
    let _g = serial();
    let run = separable_run();
    let s = &run.report.splits[0];
    let pair = s.siamese_test_pairs.accuracy;
    let gnn = s.gnn.accuracy;
    let mins = run.elapsed.as_secs_f64() / 60.0;
    let pass = run.report.n_clips == 200
        && run.config.siamese.epochs == 20
        && pair >= 0.90
        && gnn >= 0.95
        && mins < 15.0;
    verdict(
        5,
        pass,
        &format!(
            "pair accuracy {pair:.3}, gnn {gnn:.3} (2-layer nn {:.3}) at 100% labeled, {mins:.1} min",
            s.baseline.accuracy
        ),
    );
}

#[test]
fn c6_labeled_fraction_trend() {
    let _g = serial();
    let fractions = [0.3, 0.5, 1.0];
    let (mut gnn, mut gap) = ([0.0; 3], [0.0; 3]);
    let seeds = 1..=5u64;
    let n = seeds.clone().count() as f64;
    for seed in seeds {
        let mut cfg = ExperimentConfig::from_toml(
            "[dataset]\nsuite = \"confusable\"\nclips_per_class = 30\n\
             [siamese]\nepochs = 8\n[explain]\nclips_per_class = 0\n",
        )
        .unwrap();
        cfg.seed = Some(seed);
        cfg.output_dir = Some(scratch(&format!("confusable_{seed}")));
        cfg.splits.labeled_fractions = fractions.to_vec();
        let report = run_pipeline(&cfg, Stage::All).unwrap().unwrap();
        for (k, s) in report.splits.iter().enumerate() {
            gnn[k] += s.gnn.accuracy / n;
            gap[k] += (s.gnn.accuracy - s.baseline.accuracy) / n;
        }
    }
    let gaps_ok = gap.iter().all(|&d| d >= 0.0);
    let monotone = gnn.windows(2).all(|w| w[1] - w[0] >= -0.02);
    let fmt = |v: &[f64; 3]| v.map(|x| format!("{x:+.3}")).join(" / ");
    verdict(
        6,
        gaps_ok && monotone,
        &format!(
            "mean gnn-nn at 30/50/100%: {}; mean gnn accuracy {}",
            fmt(&gap),
            gnn.map(|x| format!("{x:.3}")).join(" / ")
        ),
    );
}

#[test]
fn c7_band_localization() {
    let _g = serial();
    let run = separable_run();
    let cfg = &run.config;
    let layout = Layout::new(&run.dir);
    let record: SplitRecord =
        serde_json::from_slice(&std::fs::read(layout.split_json()).unwrap()).unwrap();
    let class = record
        .class_names
        .iter()
        .position(|c| c == "band_noise")
        .unwrap();
    let specs = melgraph::io::read_tensor(&layout.spectrograms()).unwrap();
    let siamese = SiameseModel::load(cfg.backbone.clone(), &layout.siamese(1.0)).unwrap();
    let embeddings = melgraph::io::read_tensor(&layout.embeddings(1.0)).unwrap();
    let graph = EmbeddingGraph::from_split(
        embeddings,
        &record.labels,
        &record.masks(1.0).unwrap(),
        record.n_classes(),
    )
    .unwrap();
    let gnn = GnnModel::load(
        graph.feature_dim(),
        &cfg.gnn.hidden,
        graph.n_classes,
        &layout.gnn(1.0),
    )
    .unwrap();

    // 20 unseen band_noise clips join the graph as unlabeled test nodes
    let analyzer = MelAnalyzer::new(&cfg.spectrogram).unwrap();
    let spec = &separable_suite()[class];
    let mut data = specs.data().to_vec();
    let mut fresh = Vec::new();
    for i in 0..20 {
        let clip = synth_clip(
            spec,
            cfg.dataset.duration_s,
            cfg.spectrogram.sample_rate,
            derive_seed(42, &[99, i]),
        )
        .unwrap();
        let s = fixed_size_crop(
            &analyzer.spectrogram(&clip).unwrap(),
            cfg.backbone.input_cols,
        );
        fresh.extend_from_slice(s.values.data());
    }
    let n_old = graph.len();
    let (rows, cols) = (specs.shape()[1], specs.shape()[2]);
    let fresh = Tensor::new(vec![20, rows, cols], fresh).unwrap();
    let graph = extend_graph(&graph, &embed_all(&siamese.backbone, &fresh).unwrap()).unwrap();
    data.extend_from_slice(fresh.data());
    let all_specs = Tensor::new(vec![n_old + 20, rows, cols], data).unwrap();

    let explainer = Explainer {
        backbone: &siamese.backbone,
        gnn: &gnn,
        graph: &graph,
        specs: &all_specs,
        tap: cfg.explain.tap,
    };
    let band = analyzer.filterbank().rows_in_band(4000.0, 8000.0);
    let (mut mass, mut non_negative) = (0.0, true);
    for i in n_old..n_old + 20 {
        let heat = explainer.explain(i, class).unwrap();
        non_negative &= heat
            .values
            .data()
            .iter()
            .chain(heat.coarse.data())
            .all(|&v| v >= 0.0);
        mass += heat.row_mass_fraction(&band) / 20.0;
    }
    verdict(
        7,
        mass >= 0.6 && non_negative,
        &format!(
            "mean heatmap mass in 4-8 kHz rows ({} of {rows}) {mass:.3} over 20 clips, non-negative: {non_negative}",
            band.len()
        ),
    );
}

#[test]
fn c8_identical_runs_identical_metrics() {
    let _g = serial();
    let mut bytes = Vec::new();
    for name in ["determinism_a", "determinism_b"] {
        let mut cfg = ExperimentConfig::from_toml(
            "seed = 8\n[dataset]\nclips_per_class = 12\n[siamese]\nepochs = 2\n\
             [gnn]\nepochs = 100\n[explain]\nclips_per_class = 1\n",
        )
        .unwrap();
        let dir = scratch(name);
        cfg.output_dir = Some(dir.clone());
        run_pipeline(&cfg, Stage::All).unwrap();
        bytes.push(std::fs::read(Layout::new(&dir).metrics_json()).unwrap());
    }
    verdict(
        8,
        bytes[0] == bytes[1],
        &format!(
            "metrics.json {} and {} bytes, identical: {}",
            bytes[0].len(),
            bytes[1].len(),
            bytes[0] == bytes[1]
        ),
    );
}

#[test]
fn c9_gtzan_trend() {
    let _g = serial();
    let Some(root) = std::env::var_os("GTZAN_DIR") else {
        std::io::stderr()
            .write_all(b"criterion 9: SKIP set GTZAN_DIR to a genres/<genre>/*.wav tree\n")
            .unwrap();
        return;
    };
    let (mut above_chance, mut gnn_wins) = (true, 0);
    for seed in 1..=5u64 {
        let mut cfg = ExperimentConfig::from_toml(
            "[dataset]\nsource = \"gtzan\"\nmax_files_per_class = 30\n[explain]\nclips_per_class = 0\n",
        )
        .unwrap();
        cfg.dataset.gtzan_dir = Some(PathBuf::from(&root));
        cfg.seed = Some(seed);
        cfg.output_dir = Some(scratch(&format!("gtzan_{seed}")));
        let report = run_pipeline(&cfg, Stage::All).unwrap().unwrap();
        let chance = 1.0 / report.class_names.len() as f64;
        for s in &report.splits {
            above_chance &= s.gnn.accuracy > chance && s.baseline.accuracy > chance;
        }
        let low = &report.splits[0];
        if low.gnn.accuracy >= low.baseline.accuracy {
            gnn_wins += 1;
        }
    }
    verdict(
        9,
        above_chance && gnn_wins >= 3,
        &format!("above chance everywhere: {above_chance}; gnn >= nn at the lowest fraction on {gnn_wins}/5 seeds"),
    );
}
