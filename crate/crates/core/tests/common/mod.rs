//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use melgraph::autodiff::gradcheck::{
    check_gradients, relative_error, Coords, GradCheckReport, DEFAULT_EPS,
};
use melgraph::autodiff::{Graph, NodeId, Padding};
use melgraph::gradcam::Explainer;
use melgraph::graph::{EmbeddingGraph, GnnModel};
use melgraph::siamese::{embed_all, Backbone, BackboneConfig, SiameseModel, TapLayer};
use melgraph::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type LossFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub f: LossFn,
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "square",
    "scale",
    "relu",
    "sigmoid",
    "add_bias",
    "matmul",
    "linear",
    "conv2d_same",
    "conv2d_valid_stride2",
    "conv2d_unbatched",
    "max_pool2d",
    "global_avg_pool",
    "concat",
    "reshape",
    "gather_rows",
    "sum",
    "mean",
    "softmax",
    "cross_entropy",
    "binary_cross_entropy",
    "element",
    "edge_mean_relu",
];

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output coordinate carries
/// a distinct weight into the scalar.
fn project(g: &mut Graph, y: NodeId, r: &Tensor) -> Result<NodeId> {
    let rid = g.constant(r.clone());
    let p = g.mul(y, rid)?;
    g.sum(p)
}

fn projected(
    out_shape: &[usize],
    inputs: Vec<Tensor>,
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) -> OpCase {
    let r = randn(out_shape, rng);
    OpCase {
        inputs,
        f: Box::new(move |g, x| {
            let y = op(g, x)?;
            project(g, y, &r)
        }),
    }
}

/// Randomized scalar test function exercising one op.
pub fn op_case(name: &str, rng: &mut ChaCha8Rng) -> OpCase {
    let (a, b) = (randn(&[3, 4], rng), randn(&[3, 4], rng));
    match name {
        "add" => projected(&[3, 4], vec![a, b], rng, |g, x| g.add(x[0], x[1])),
        "sub" => projected(&[3, 4], vec![a, b], rng, |g, x| g.sub(x[0], x[1])),
        "mul" => projected(&[3, 4], vec![a, b], rng, |g, x| g.mul(x[0], x[1])),
        "square" => projected(&[3, 4], vec![a], rng, |g, x| g.square(x[0])),
        "scale" => projected(&[3, 4], vec![a], rng, |g, x| g.scale(x[0], -1.7)),
        "relu" => projected(&[3, 4], vec![a], rng, |g, x| g.relu(x[0])),
        "sigmoid" => projected(&[3, 4], vec![a], rng, |g, x| g.sigmoid(x[0])),
        "add_bias" => projected(&[3, 4], vec![a, randn(&[4], rng)], rng, |g, x| {
            g.add_bias(x[0], x[1])
        }),
        "matmul" => projected(&[3, 5], vec![a, randn(&[4, 5], rng)], rng, |g, x| {
            g.matmul(x[0], x[1])
        }),
        "linear" => projected(
            &[3, 5],
            vec![a, randn(&[4, 5], rng), randn(&[5], rng)],
            rng,
            |g, x| g.linear(x[0], x[1], x[2]),
        ),
        "conv2d_same" => projected(
            &[2, 3, 5, 6],
            vec![
                randn(&[2, 2, 5, 6], rng),
                randn(&[3, 2, 3, 3], rng),
                randn(&[3], rng),
            ],
            rng,
            |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, Padding::Same),
        ),
        "conv2d_valid_stride2" => projected(
            &[1, 2, 3, 3],
            vec![randn(&[1, 2, 7, 8], rng), randn(&[2, 2, 3, 3], rng)],
            rng,
            |g, x| g.conv2d(x[0], x[1], None, 2, Padding::Valid),
        ),
        "conv2d_unbatched" => projected(
            &[2, 4, 4],
            vec![
                randn(&[1, 4, 4], rng),
                randn(&[2, 1, 3, 3], rng),
                randn(&[2], rng),
            ],
            rng,
            |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, Padding::Same),
        ),
        "max_pool2d" => projected(
            &[2, 3, 2, 3],
            vec![randn(&[2, 3, 5, 6], rng)],
            rng,
            |g, x| g.max_pool2d(x[0], 2),
        ),
        "global_avg_pool" => projected(&[2, 3], vec![randn(&[2, 3, 4, 5], rng)], rng, |g, x| {
            g.global_avg_pool(x[0])
        }),
        "concat" => projected(&[3, 7], vec![a, randn(&[3, 3], rng)], rng, |g, x| {
            g.concat(&[x[0], x[1]], 1)
        }),
        "reshape" => projected(&[2, 6], vec![a], rng, |g, x| g.reshape(x[0], &[2, 6])),
        "gather_rows" => projected(&[4, 4], vec![a], rng, |g, x| {
            g.gather_rows(x[0], &[2, 0, 2, 1])
        }),
        "sum" => OpCase {
            inputs: vec![a],
            f: Box::new(|g, x| {
                let s = g.square(x[0])?;
                g.sum(s)
            }),
        },
        "mean" => OpCase {
            inputs: vec![a],
            f: Box::new(|g, x| {
                let s = g.square(x[0])?;
                g.mean(s)
            }),
        },
        "softmax" => projected(&[3, 4], vec![a], rng, |g, x| g.softmax(x[0], 1)),
        "cross_entropy" => {
            let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            let mask = vec![true, rng.random_bool(0.5), true];
            OpCase {
                inputs: vec![a],
                f: Box::new(move |g, x| g.cross_entropy(x[0], &targets, &mask)),
            }
        }
        "binary_cross_entropy" => {
            let targets: Vec<f64> = (0..12).map(|_| rng.random_range(0..2) as f64).collect();
            OpCase {
                inputs: vec![a],
                f: Box::new(move |g, x| {
                    let p = g.sigmoid(x[0])?;
                    g.binary_cross_entropy(p, &targets)
                }),
            }
        }
        "element" => {
            let k = rng.random_range(0..12);
            OpCase {
                inputs: vec![a],
                f: Box::new(move |g, x| {
                    let s = g.sigmoid(x[0])?;
                    g.element(s, k)
                }),
            }
        }
        "edge_mean_relu" => projected(
            &[5, 3],
            vec![randn(&[5, 3], rng), randn(&[3], rng)],
            rng,
            |g, x| g.edge_mean_relu(x[0], x[1]),
        ),
        other => panic!("no gradient case for {other}"),
    }
}

/// Gradient check of one randomized trial. Inputs are redrawn (from the same
/// stream) while a kink sits within `100·eps` of the evaluation point, where
/// central differences straddle a non-differentiable point.
pub fn check_op_trial(name: &str, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let case = op_case(name, &mut rng);
        let report = check_gradients(&case.f, &case.inputs, DEFAULT_EPS, Coords::All).unwrap();
        if report.kink_margin > 100.0 * DEFAULT_EPS {
            return report;
        }
    }
    panic!("{name}: no kink-free draw in 50 attempts");
}

/// Power fraction of a signal between `lo` and `hi` Hz, by direct DFT of
/// non-overlapping 2048-sample blocks. Independent of the crate's FFT path.
pub fn band_energy_fraction(samples: &[f64], sr: f64, lo: f64, hi: f64) -> f64 {
    let n = 2048;
    let twiddle: Vec<(f64, f64)> = (0..n)
        .map(|t| (-2.0 * std::f64::consts::PI * t as f64 / n as f64).sin_cos())
        .collect();
    let (mut inside, mut total) = (0.0, 0.0);
    for block in samples.chunks_exact(n).step_by(4) {
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in block.iter().enumerate() {
                let (s, c) = twiddle[(k * t) % n];
                re += x * c;
                im += x * s;
            }
            let p = re * re + im * im;
            let hz = k as f64 * sr / n as f64;
            total += p;
            if hz >= lo && hz <= hi {
                inside += p;
            }
        }
    }
    inside / total
}

/// Two-block backbone on 8×12 inputs, small enough for exhaustive probing.
pub fn small_backbone_config() -> BackboneConfig {
    BackboneConfig {
        widths: vec![3, 4],
        kernel: 3,
        input_rows: 8,
        input_cols: 12,
    }
}

/// Siamese pair loss on a 2-pair micro-batch of three clips, checked over
/// every parameter tensor and the input. `None` when a probe crosses a kink.
pub fn siamese_loss_trial(seed: u64, eps: f64) -> Option<GradCheckReport> {
    let cfg = small_backbone_config();
    let mut model = SiameseModel::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51a);
    // random biases keep relu inputs away from exact zero; a full-scale
    // output layer keeps head gradients above finite-difference noise
    for i in [1, 3] {
        let b = model.backbone.params.get_mut(i);
        *b = Tensor::randn(b.shape(), 0.3, &mut rng);
    }
    for (i, std) in [(1, 0.5), (2, 0.5), (3, 0.5)] {
        let p = model.head.params.get_mut(i);
        *p = Tensor::randn(p.shape(), std, &mut rng);
    }
    let input = Tensor::uniform(&[3, 1, 8, 12], 0.0, 1.0, &mut rng);
    let pairs = [(0, 1), (2, 0)];
    let nb = model.backbone.params.len();
    let bind = |model: &SiameseModel, g: &mut Graph| -> Vec<NodeId> {
        let mut ids = vec![g.variable(input.clone())];
        ids.extend(
            model
                .backbone
                .params
                .values()
                .iter()
                .map(|t| g.variable(t.clone())),
        );
        ids.extend(
            model
                .head
                .params
                .values()
                .iter()
                .map(|t| g.variable(t.clone())),
        );
        ids
    };
    // the loss reads ln(1 - p) from the probability, which loses most of its
    // digits once a logit passes ~10; the output layer is linear in its
    // weight and bias, so one rescale brings every logit within ±2
    let mut g = Graph::new();
    let ids = bind(&model, &mut g);
    let (_, s) = model
        .pair_loss(
            &mut g,
            &ids[1..1 + nb],
            &ids[1 + nb..],
            ids[0],
            &pairs,
            &[1.0, 0.0],
        )
        .unwrap();
    let max_logit = g
        .value(s)
        .data()
        .iter()
        .map(|p| (p / (1.0 - p)).ln().abs())
        .fold(0.0, f64::max);
    if max_logit > 2.0 {
        for i in [2, 3] {
            let p = model.head.params.get_mut(i);
            *p = p.map(|v| v * 2.0 / max_logit);
        }
    }
    let mut inputs = vec![input.clone()];
    inputs.extend(model.backbone.params.values().iter().cloned());
    inputs.extend(model.head.params.values().iter().cloned());
    let f = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        let (loss, _) = model.pair_loss(
            g,
            &ids[1..1 + nb],
            &ids[1 + nb..],
            ids[0],
            &pairs,
            &[1.0, 0.0],
        )?;
        Ok(loss)
    };
    let report = check_gradients(f, &inputs, eps, Coords::Sample { count: 40, seed }).unwrap();
    (report.kink_crossings == 0).then_some(report)
}

/// Forward pass and masked cross-entropy of a 4-node graph, checked over the
/// node features and every GNN parameter. `None` when a probe crosses a kink.
pub fn gnn_loss_trial(seed: u64, eps: f64) -> Option<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GnnModel::new(5, &[4, 3], 3, seed).unwrap();
    let mut inputs = vec![Tensor::randn(&[4, 5], 1.0, &mut rng)];
    // non-zero biases keep relu arguments off exact zero
    for t in model.params.values() {
        let mut t = t.clone();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.2..0.2));
        inputs.push(t);
    }
    let targets = [0, 2, 1, 0];
    let mask = [true, true, false, true];
    let f = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        let logits = model.logits_node(g, &ids[1..], ids[0])?;
        g.cross_entropy(logits, &targets, &mask)
    };
    let report = check_gradients(f, &inputs, eps, Coords::All).unwrap();
    (report.kink_crossings == 0).then_some(report)
}

/// Four clips on a three-class graph with a small backbone and GNN.
pub struct CamFixture {
    pub backbone: Backbone,
    pub gnn: GnnModel,
    pub graph: EmbeddingGraph,
    pub specs: Tensor,
}

impl CamFixture {
    /// Positive conv biases keep the tapped maps away from zero, and a
    /// full-scale classifier keeps the logit gradients well above
    /// finite-difference noise.
    pub fn new(seed: u64) -> CamFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Backbone::new(small_backbone_config(), &mut rng).unwrap();
        for i in [1, 3] {
            let b = backbone.params.get_mut(i);
            *b = Tensor::uniform(b.shape(), 0.5, 1.5, &mut rng);
        }
        let specs = Tensor::uniform(&[4, 8, 12], 0.0, 1.0, &mut rng);
        let features = embed_all(&backbone, &specs).unwrap();
        let graph = EmbeddingGraph::new(
            features,
            vec![Some(0), Some(1), Some(2), Some(0)],
            vec![true, true, true, false],
            vec![false, false, false, true],
            3,
        )
        .unwrap();
        let mut gnn = GnnModel::new(4, &[5, 4], 3, seed).unwrap();
        for l in 0..gnn.depth() {
            let mut layer = gnn.layer(l);
            layer.gamma_bias = Tensor::randn(layer.gamma_bias.shape(), 0.3, &mut rng);
            layer.phi_bias = Tensor::randn(layer.phi_bias.shape(), 0.3, &mut rng);
            gnn.set_layer(l, layer).unwrap();
        }
        *gnn.classifier_weight_mut() = Tensor::randn(&[4, 3], 1.0, &mut rng);
        CamFixture {
            backbone,
            gnn,
            graph,
            specs,
        }
    }

    pub fn explainer(&self, tap: TapLayer) -> Explainer<'_> {
        Explainer {
            backbone: &self.backbone,
            gnn: &self.gnn,
            graph: &self.graph,
            specs: &self.specs,
            tap,
        }
    }
}

/// Worst relative error between the explainer's map gradients and central
/// differences of the class logit, over every map coordinate. `None` near a
/// kink.
pub fn cam_tap_error(ex: &Explainer, clip: usize, class: usize, eps: f64) -> Option<f64> {
    if ex.kink_margin(clip, class).unwrap() <= 10.0 * eps {
        return None;
    }
    let fg = ex.class_score_gradients(clip, class).unwrap();
    let mut worst = 0.0f64;
    for k in 0..fg.maps.len() {
        let mut plus = fg.maps.clone();
        plus.data_mut()[k] += eps;
        let mut minus = fg.maps.clone();
        minus.data_mut()[k] -= eps;
        let numeric = (ex.class_logit(clip, class, &plus).unwrap()
            - ex.class_logit(clip, class, &minus).unwrap())
            / (2.0 * eps);
        worst = worst.max(relative_error(fg.grads.data()[k], numeric));
    }
    Some(worst)
}
