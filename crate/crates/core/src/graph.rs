//! Transductive node classification on a complete graph of embeddings.
//!
//! Each layer sends `m_ij = relu(W_γ (x_i - x_j) + b_γ)` along every directed
//! edge, averages incoming messages, and updates
//! `x_i' = relu(W_φ [x_i, mean_j m_ij] + b_φ)`. The training path uses the
//! fused [`Graph::edge_mean_relu`]; [`edge_message`] and [`node_update`]
//! compute the same thing one edge at a time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::adam::{AdamState, DEFAULT_LR};
use crate::autodiff::params::ParamStore;
use crate::autodiff::{Graph, NodeId};
use crate::datagen::{rng_for, SplitMasks};
use crate::error::{Error, Result};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::tensor::Tensor;

/// Largest graph accepted; messages grow as `n²`.
pub const MAX_NODES: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    Train,
    Test,
    Unlabeled,
}

impl NodeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Train => "train",
            NodeRole::Test => "test",
            NodeRole::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGraph {
    /// `[n, d]`.
    pub features: Tensor,
    /// Ground truth where known. Only `train_mask` labels reach the loss.
    pub labels: Vec<Option<usize>>,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    pub n_classes: usize,
}

impl EmbeddingGraph {
    pub fn new(
        features: Tensor,
        labels: Vec<Option<usize>>,
        train_mask: Vec<bool>,
        test_mask: Vec<bool>,
        n_classes: usize,
    ) -> Result<Self> {
        let g = EmbeddingGraph {
            features,
            labels,
            train_mask,
            test_mask,
            n_classes,
        };
        g.validate()?;
        Ok(g)
    }

    /// Graph over every clip of a split: labeled nodes train, test nodes are
    /// scored, the rest only pass messages.
    pub fn from_split(
        features: Tensor,
        labels: &[usize],
        masks: &SplitMasks,
        n_classes: usize,
    ) -> Result<Self> {
        EmbeddingGraph::new(
            features,
            labels.iter().map(|&l| Some(l)).collect(),
            masks.labeled.clone(),
            masks.test.clone(),
            n_classes,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.features.rank() != 2 {
            return Err(Error::shape(
                "embedding_graph",
                format!("features {:?}", self.features.shape()),
            ));
        }
        if n < 2 {
            return Err(Error::Config(format!(
                "graph needs at least 2 nodes, got {n}"
            )));
        }
        if n > MAX_NODES {
            return Err(Error::Config(format!(
                "graph has {n} nodes, limit is {MAX_NODES}"
            )));
        }
        if self.labels.len() != n || self.train_mask.len() != n || self.test_mask.len() != n {
            return Err(Error::shape(
                "embedding_graph",
                format!(
                    "{n} nodes, {} labels, {} train, {} test",
                    self.labels.len(),
                    self.train_mask.len(),
                    self.test_mask.len()
                ),
            ));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite {
                op: "embedding_graph features".into(),
            });
        }
        for i in 0..n {
            if self.train_mask[i] && self.test_mask[i] {
                return Err(Error::Config(format!(
                    "node {i} is in both train and test masks"
                )));
            }
            match self.labels[i] {
                Some(c) if c >= self.n_classes => {
                    return Err(Error::Index(format!(
                        "node {i} label {c} of {} classes",
                        self.n_classes
                    )))
                }
                None if self.train_mask[i] => {
                    return Err(Error::Config(format!("training node {i} has no label")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn role(&self, i: usize) -> NodeRole {
        if self.train_mask[i] {
            NodeRole::Train
        } else if self.test_mask[i] {
            NodeRole::Test
        } else {
            NodeRole::Unlabeled
        }
    }

    /// Training targets with non-training labels replaced by 0; they are
    /// masked out of the loss.
    fn train_targets(&self) -> Vec<usize> {
        self.labels
            .iter()
            .zip(&self.train_mask)
            .map(|(l, &m)| if m { l.expect("validated") } else { 0 })
            .collect()
    }

    /// `node, f0..f{d-1}, label, mask` with an empty label when unknown.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let d = self.feature_dim();
        let mut header = vec!["node".to_string()];
        header.extend((0..d).map(|k| format!("f{k}")));
        header.extend(["label".to_string(), "mask".to_string()]);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.features.row(i).iter().map(|v| format!("{v:e}")));
            rec.push(self.labels[i].map(|l| l.to_string()).unwrap_or_default());
            rec.push(self.role(i).as_str().into());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, n_classes: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut r = csv::Reader::from_path(path)?;
        let width = r.headers()?.len();
        if width < 4 {
            return Err(bad(format!("{width} columns")));
        }
        let d = width - 3;
        let (mut feats, mut labels, mut train, mut test) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            for k in 0..d {
                feats.push(
                    rec[k + 1]
                        .parse::<f64>()
                        .map_err(|e| bad(format!("row {row}: {e}")))?,
                );
            }
            let label = &rec[d + 1];
            labels.push(if label.is_empty() {
                None
            } else {
                Some(
                    label
                        .parse::<usize>()
                        .map_err(|e| bad(format!("row {row}: {e}")))?,
                )
            });
            let mask = &rec[d + 2];
            train.push(mask == "train");
            test.push(mask == "test");
            if !matches!(mask, "train" | "test" | "unlabeled") {
                return Err(bad(format!("row {row}: unknown mask {mask}")));
            }
        }
        let n = labels.len();
        EmbeddingGraph::new(
            Tensor::new(vec![n, d], feats)?,
            labels,
            train,
            test,
            n_classes,
        )
    }
}

/// Appends `new_features` `[m, d]` as unlabeled test nodes.
pub fn extend_graph(graph: &EmbeddingGraph, new_features: &Tensor) -> Result<EmbeddingGraph> {
    let d = graph.feature_dim();
    if new_features.rank() != 2 || new_features.shape()[1] != d {
        return Err(Error::shape(
            "extend_graph",
            format!("new features {:?}, graph dim {d}", new_features.shape()),
        ));
    }
    let m = new_features.shape()[0];
    let mut data = graph.features.data().to_vec();
    data.extend_from_slice(new_features.data());
    let mut out = graph.clone();
    out.features = Tensor::new(vec![graph.len() + m, d], data)?;
    out.labels.extend(std::iter::repeat_n(None, m));
    out.train_mask.extend(std::iter::repeat_n(false, m));
    out.test_mask.extend(std::iter::repeat_n(true, m));
    out.validate()?;
    Ok(out)
}

/// Parameters of one message-passing layer, weights stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGcnLayer {
    pub gamma_weight: Tensor,
    pub gamma_bias: Tensor,
    pub phi_weight: Tensor,
    pub phi_bias: Tensor,
}

impl EdgeGcnLayer {
    pub fn d_in(&self) -> usize {
        self.gamma_weight.shape()[0]
    }

    pub fn d_msg(&self) -> usize {
        self.gamma_weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.phi_weight.shape()[1]
    }
}

/// `relu(b + v W)` for a vector `v` and `[in, out]` weight.
fn dense_relu(v: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out = w.shape()[1];
    let mut acc = b.data().to_vec();
    for (k, &x) in v.iter().enumerate() {
        for (a, wv) in acc.iter_mut().zip(&w.data()[k * out..(k + 1) * out]) {
            *a += x * wv;
        }
    }
    acc.iter_mut().for_each(|a| *a = a.max(0.0));
    acc
}

/// Message from node `j` to node `i`: `relu(W_γ (x_i - x_j) + b_γ)`.
pub fn edge_message(x_i: &[f64], x_j: &[f64], layer: &EdgeGcnLayer) -> Result<Vec<f64>> {
    if x_i.len() != layer.d_in() || x_j.len() != layer.d_in() {
        return Err(Error::shape(
            "edge_message",
            format!(
                "inputs {} and {}, layer expects {}",
                x_i.len(),
                x_j.len(),
                layer.d_in()
            ),
        ));
    }
    let diff: Vec<f64> = x_i.iter().zip(x_j).map(|(a, b)| a - b).collect();
    Ok(dense_relu(&diff, &layer.gamma_weight, &layer.gamma_bias))
}

/// Mean of incoming messages concatenated after the node's own features,
/// then `relu(W_φ · + b_φ)`.
pub fn node_update(x_i: &[f64], messages: &[Vec<f64>], layer: &EdgeGcnLayer) -> Result<Vec<f64>> {
    if messages.is_empty() {
        return Err(Error::Empty { op: "node_update" });
    }
    if x_i.len() != layer.d_in() || messages.iter().any(|m| m.len() != layer.d_msg()) {
        return Err(Error::shape(
            "node_update",
            "feature or message width mismatch",
        ));
    }
    let mut input = x_i.to_vec();
    input.extend(aggregate_mean(messages));
    Ok(dense_relu(&input, &layer.phi_weight, &layer.phi_bias))
}

pub fn aggregate_mean(messages: &[Vec<f64>]) -> Vec<f64> {
    let mut agg = vec![0.0; messages[0].len()];
    for m in messages {
        agg.iter_mut().zip(m).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / messages.len() as f64;
    agg.iter_mut().for_each(|a| *a *= inv);
    agg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Output width of each message-passing layer.
    pub hidden: Vec<usize>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            epochs: 1000,
            lr: DEFAULT_LR,
            hidden: vec![64, 32],
            seed: 0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("gnn epochs and lr must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "gnn needs at least one layer of positive width".into(),
            ));
        }
        Ok(())
    }
}

const OUTPUT_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    /// Per layer: γ weight, γ bias, φ weight, φ bias; then classifier
    /// weight and bias.
    pub params: ParamStore,
}

impl GnnModel {
    pub fn new(input_dim: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) || n_classes < 2 {
            return Err(Error::Config(format!(
                "gnn dims {input_dim} -> {hidden:?} -> {n_classes} are invalid"
            )));
        }
        let mut rng = rng_for(seed, &[0x6a11]);
        let mut params = ParamStore::new();
        let mut d = input_dim;
        for (l, &d_out) in hidden.iter().enumerate() {
            let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
            params.push(
                format!("layer{l}.gamma.weight"),
                Tensor::randn(&[d, d], he(d), &mut rng),
            );
            params.push(format!("layer{l}.gamma.bias"), Tensor::zeros(&[d]));
            params.push(
                format!("layer{l}.phi.weight"),
                Tensor::randn(&[2 * d, d_out], he(2 * d), &mut rng),
            );
            params.push(format!("layer{l}.phi.bias"), Tensor::zeros(&[d_out]));
            d = d_out;
        }
        params.push(
            "classifier.weight",
            Tensor::randn(&[d, n_classes], OUTPUT_INIT_STD, &mut rng),
        );
        params.push("classifier.bias", Tensor::zeros(&[n_classes]));
        Ok(GnnModel {
            input_dim,
            hidden: hidden.to_vec(),
            n_classes,
            params,
        })
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn layer(&self, l: usize) -> EdgeGcnLayer {
        let p = |k: usize| self.params.get(4 * l + k).clone();
        EdgeGcnLayer {
            gamma_weight: p(0),
            gamma_bias: p(1),
            phi_weight: p(2),
            phi_bias: p(3),
        }
    }

    pub fn set_layer(&mut self, l: usize, layer: EdgeGcnLayer) -> Result<()> {
        let parts = [
            layer.gamma_weight,
            layer.gamma_bias,
            layer.phi_weight,
            layer.phi_bias,
        ];
        for (k, t) in parts.into_iter().enumerate() {
            let slot = self.params.get_mut(4 * l + k);
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "set_layer",
                    format!("{:?} into {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(())
    }

    /// `(weight [d, C], bias [C])`.
    pub fn classifier(&self) -> (&Tensor, &Tensor) {
        let k = 4 * self.depth();
        (self.params.get(k), self.params.get(k + 1))
    }

    pub fn classifier_weight_mut(&mut self) -> &mut Tensor {
        let k = 4 * self.depth();
        self.params.get_mut(k)
    }

    /// Logits `[n, C]` for node features `x` `[n, d]` on the tape.
    pub fn logits_node(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.input_dim {
            return Err(Error::shape(
                "gnn_forward",
                format!(
                    "features {:?}, model expects width {}",
                    g.shape(x),
                    self.input_dim
                ),
            ));
        }
        let mut h = x;
        for l in 0..self.depth() {
            let q = &p[4 * l..4 * l + 4];
            let u = g.matmul(h, q[0])?;
            let agg = g.edge_mean_relu(u, q[1])?;
            let cat = g.concat(&[h, agg], 1)?;
            let z = g.linear(cat, q[2], q[3])?;
            h = g.relu(z)?;
        }
        let k = 4 * self.depth();
        g.linear(h, p[k], p[k + 1])
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        write_checkpoint(stem, &self.params.entries())
    }

    pub fn load(input_dim: usize, hidden: &[usize], n_classes: usize, stem: &Path) -> Result<Self> {
        let mut m = GnnModel::new(input_dim, hidden, n_classes, 0)?;
        m.params.load(&read_checkpoint(stem)?)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnOutput {
    /// `[n, C]` pre-softmax scores.
    pub logits: Tensor,
    /// Row-wise softmax of `logits`.
    pub probs: Tensor,
}

/// Forward pass over every node of the graph.
pub fn gnn_forward(graph: &EmbeddingGraph, model: &GnnModel) -> Result<GnnOutput> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let x = g.constant(graph.features.clone());
    let logits = model.logits_node(&mut g, &p, x)?;
    let probs = g.softmax(logits, 1)?;
    Ok(GnnOutput {
        logits: g.value(logits).clone(),
        probs: g.value(probs).clone(),
    })
}

/// Logits computed edge by edge through [`edge_message`] and [`node_update`].
pub fn gnn_forward_reference(features: &Tensor, model: &GnnModel) -> Result<Tensor> {
    let n = features.shape()[0];
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| features.row(i).to_vec()).collect();
    for l in 0..model.depth() {
        let layer = model.layer(l);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let msgs = (0..n)
                .filter(|&j| j != i)
                .map(|j| edge_message(&h[i], &h[j], &layer))
                .collect::<Result<Vec<_>>>()?;
            next.push(node_update(&h[i], &msgs, &layer)?);
        }
        h = next;
    }
    let (w, b) = model.classifier();
    let c = model.n_classes;
    let mut out = Vec::with_capacity(n * c);
    for row in &h {
        let mut z = b.data().to_vec();
        for (k, &x) in row.iter().enumerate() {
            for (zc, wv) in z.iter_mut().zip(&w.data()[k * c..(k + 1) * c]) {
                *zc += x * wv;
            }
        }
        out.extend(z);
    }
    Tensor::new(vec![n, c], out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
}

impl TrainTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "train_accuracy"])?;
        for (e, (l, a)) in self.loss.iter().zip(&self.train_accuracy).enumerate() {
            w.write_record([e.to_string(), format!("{l:e}"), format!("{a}")])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn masked_accuracy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for i in (0..targets.len()).filter(|&i| mask[i]) {
        total += 1;
        if argmax(logits.row(i)) == targets[i] {
            hit += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

fn check_trainable(labels: &[Option<usize>], mask: &[bool]) -> Result<()> {
    let mut classes: Vec<usize> = labels
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .filter_map(|(l, _)| *l)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "training mask covers {} class(es); need at least 2",
            classes.len()
        )));
    }
    Ok(())
}

/// Full-batch Adam on the cross-entropy of training nodes; every node takes
/// part in message passing.
pub fn train_gnn(
    model: &mut GnnModel,
    graph: &EmbeddingGraph,
    config: &GnnConfig,
) -> Result<TrainTrace> {
    config.validate()?;
    graph.validate()?;
    check_trainable(&graph.labels, &graph.train_mask)?;
    let targets = graph.train_targets();
    let mut adam = AdamState::new(model.params.values());
    let mut trace = TrainTrace::default();
    for epoch in 0..config.epochs {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.constant(graph.features.clone());
        let logits = model
            .logits_node(&mut g, &p, x)
            .map_err(|e| diverged(e, "gnn", epoch))?;
        let loss = g
            .cross_entropy(logits, &targets, &graph.train_mask)
            .map_err(|e| diverged(e, "gnn", epoch))?;
        trace.loss.push(g.value(loss).item());
        trace.train_accuracy.push(masked_accuracy(
            g.value(logits),
            &targets,
            &graph.train_mask,
        ));
        let grads = g.backward(loss).map_err(|e| diverged(e, "gnn", epoch))?;
        let grads = model.params.collect_grads(&grads, &p);
        adam.step(model.params.values_mut(), &grads, config.lr)?;
    }
    Ok(trace)
}

fn diverged(e: Error, what: &str, epoch: usize) -> Error {
    match e {
        Error::NonFinite { op } => {
            Error::Diverged(format!("{what} epoch {epoch}: non-finite value in {op}"))
        }
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Predicted class for every node.
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// `confusion[true][predicted]` over scored test nodes.
    pub confusion: Vec<Vec<usize>>,
}

impl Score {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.confusion.len())
            .map(|c| self.confusion[c][c])
            .sum()
    }

    pub fn write_confusion_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header)?;
        for (c, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![class_names.get(c).cloned().unwrap_or_else(|| c.to_string())];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Row-normalized confusion image, true class on the vertical axis.
    pub fn confusion_image(&self) -> Tensor {
        let k = self.confusion.len();
        let mut data = Vec::with_capacity(k * k);
        // top row of the image is the first class
        for row in self.confusion.iter().rev() {
            let total: usize = row.iter().sum();
            data.extend(row.iter().map(|&v| {
                if total > 0 {
                    v as f64 / total as f64
                } else {
                    0.0
                }
            }));
        }
        Tensor::new(vec![k, k], data).expect("square")
    }
}

/// Argmax predictions (ties to the lowest class) scored on labeled test
/// nodes.
pub fn score_logits(
    logits: &Tensor,
    labels: &[Option<usize>],
    test_mask: &[bool],
    n_classes: usize,
) -> Result<Score> {
    let predictions: Vec<usize> = (0..logits.shape()[0])
        .map(|i| argmax(logits.row(i)))
        .collect();
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for i in 0..predictions.len() {
        if let (true, Some(t)) = (test_mask[i], labels[i]) {
            confusion[t][predictions[i]] += 1;
        }
    }
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Empty {
            op: "score (no labeled test nodes)",
        });
    }
    let hits: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    Ok(Score {
        predictions,
        accuracy: hits as f64 / total as f64,
        confusion,
    })
}

pub fn predict_and_score(model: &GnnModel, graph: &EmbeddingGraph) -> Result<Score> {
    if !graph.test_mask.iter().any(|&m| m) {
        return Err(Error::Empty {
            op: "predict_and_score",
        });
    }
    let out = gnn_forward(graph, model)?;
    score_logits(
        &out.logits,
        &graph.labels,
        &graph.test_mask,
        graph.n_classes,
    )
}

/// Two dense layers (`d → hidden → C`, relu) trained on labeled nodes
/// alone; the graph-free comparison point.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBaseline {
    pub params: ParamStore,
}

pub const BASELINE_HIDDEN: usize = 64;

impl MlpBaseline {
    pub fn new(input_dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0xb45e]);
        let mut params = ParamStore::new();
        params.push(
            "hidden.weight",
            Tensor::randn(
                &[input_dim, BASELINE_HIDDEN],
                (2.0 / input_dim as f64).sqrt(),
                &mut rng,
            ),
        );
        params.push("hidden.bias", Tensor::zeros(&[BASELINE_HIDDEN]));
        params.push(
            "out.weight",
            Tensor::randn(&[BASELINE_HIDDEN, n_classes], OUTPUT_INIT_STD, &mut rng),
        );
        params.push("out.bias", Tensor::zeros(&[n_classes]));
        MlpBaseline { params }
    }

    fn logits_node(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        let h = g.linear(x, p[0], p[1])?;
        let h = g.relu(h)?;
        g.linear(h, p[2], p[3])
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        write_checkpoint(stem, &self.params.entries())
    }

    pub fn load(input_dim: usize, n_classes: usize, stem: &Path) -> Result<Self> {
        let mut m = MlpBaseline::new(input_dim, n_classes, 0);
        m.params.load(&read_checkpoint(stem)?)?;
        Ok(m)
    }

    pub fn score(&self, graph: &EmbeddingGraph) -> Result<Score> {
        let logits = self.logits(&graph.features)?;
        score_logits(&logits, &graph.labels, &graph.test_mask, graph.n_classes)
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(features.clone());
        let z = self.logits_node(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    /// Full-batch Adam over the rows selected by `train_mask`.
    pub fn train(
        &mut self,
        features: &Tensor,
        labels: &[Option<usize>],
        train_mask: &[bool],
        config: &GnnConfig,
    ) -> Result<TrainTrace> {
        config.validate()?;
        check_trainable(labels, train_mask)?;
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| train_mask[i]).collect();
        let targets: Vec<usize> = rows.iter().map(|&i| labels[i].expect("checked")).collect();
        let all = vec![true; rows.len()];
        let mut train_x = Vec::with_capacity(rows.len() * features.shape()[1]);
        for &r in &rows {
            train_x.extend_from_slice(features.row(r));
        }
        let train_x = Tensor::new(vec![rows.len(), features.shape()[1]], train_x)?;
        let mut adam = AdamState::new(self.params.values());
        let mut trace = TrainTrace::default();
        for epoch in 0..config.epochs {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let x = g.constant(train_x.clone());
            let z = self
                .logits_node(&mut g, &p, x)
                .map_err(|e| diverged(e, "baseline", epoch))?;
            let loss = g
                .cross_entropy(z, &targets, &all)
                .map_err(|e| diverged(e, "baseline", epoch))?;
            trace.loss.push(g.value(loss).item());
            trace
                .train_accuracy
                .push(masked_accuracy(g.value(z), &targets, &all));
            let grads = g.backward(loss)?;
            let grads = self.params.collect_grads(&grads, &p);
            adam.step(self.params.values_mut(), &grads, config.lr)?;
        }
        Ok(trace)
    }
}

/// Trains the baseline on the labeled nodes of `graph`.
pub fn train_baseline(
    graph: &EmbeddingGraph,
    config: &GnnConfig,
) -> Result<(MlpBaseline, TrainTrace)> {
    let mut mlp = MlpBaseline::new(graph.feature_dim(), graph.n_classes, config.seed);
    let trace = mlp.train(&graph.features, &graph.labels, &graph.train_mask, config)?;
    Ok((mlp, trace))
}

/// Trains the baseline on the labeled nodes of `graph` and scores it on the
/// test nodes.
pub fn run_baseline_nn(graph: &EmbeddingGraph, config: &GnnConfig) -> Result<(Score, TrainTrace)> {
    let (mlp, trace) = train_baseline(graph, config)?;
    Ok((mlp.score(graph)?, trace))
}
