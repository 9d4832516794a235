//! Twin-branch similarity learning: a small CNN backbone producing GAP
//! embeddings, the combination of two embeddings, the conjoining similarity
//! head, balanced pair sampling and the training loop.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::adam::{AdamState, DEFAULT_LR};
use crate::autodiff::params::ParamStore;
use crate::autodiff::{Graph, NodeId, Padding};
use crate::datagen::rng_for;
use crate::error::{Error, Result};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::mel::MelSpectrogram;
use crate::tensor::Tensor;

pub const EMBEDDING_DIM: usize = 128;
pub const COMBINED_DIM: usize = 4 * EMBEDDING_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of each conv → relu → maxpool block.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub input_rows: usize,
    pub input_cols: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![16, 32, 64, 128],
            kernel: 3,
            input_rows: 128,
            input_cols: 216,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let shrink = 1usize << self.widths.len();
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(
                "backbone needs at least one block of positive width".into(),
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.input_rows < shrink || self.input_cols < shrink {
            return Err(Error::Config(format!(
                "input {}x{} too small for {} pooling stages",
                self.input_rows,
                self.input_cols,
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// `[C, h, w]` of the maps exposed at `tap` for one clip.
    pub fn tap_shape(&self, tap: TapLayer) -> [usize; 3] {
        let blocks = self.widths.len();
        let (mut h, mut w) = (self.input_rows, self.input_cols);
        for _ in 0..blocks - 1 {
            h /= 2;
            w /= 2;
        }
        if tap == TapLayer::Pooled {
            h /= 2;
            w /= 2;
        }
        [self.embedding_dim(), h, w]
    }
}

/// Which feature maps of the last block are exposed for explanation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapLayer {
    /// Last conv block after relu, before pooling.
    LastConv,
    /// Last conv block after pooling (the maps that are averaged).
    Pooled,
}

impl TapLayer {
    pub fn tag(self) -> &'static str {
        match self {
            TapLayer::LastConv => "lastconv",
            TapLayer::Pooled => "pooled",
        }
    }
}

/// Nodes produced by one backbone pass over a batch `[N, 1, H, W]`.
pub struct BackboneNodes {
    pub last_conv: NodeId,
    pub pooled: NodeId,
    /// `[N, C]`.
    pub embedding: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut c_in = 1;
        for (b, &c_out) in config.widths.iter().enumerate() {
            let fan_in = c_in * config.kernel * config.kernel;
            params.push(
                format!("block{b}.weight"),
                Tensor::randn(
                    &[c_out, c_in, config.kernel, config.kernel],
                    (2.0 / fan_in as f64).sqrt(),
                    rng,
                ),
            );
            params.push(format!("block{b}.bias"), Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        Ok(Backbone { config, params })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Runs the conv stack on `input` `[N, 1, H, W]` with parameters bound at
    /// `p` (from [`ParamStore::bind`] or `bind_frozen`).
    pub fn forward(&self, g: &mut Graph, p: &[NodeId], input: NodeId) -> Result<BackboneNodes> {
        let want = [self.config.input_rows, self.config.input_cols];
        let s = g.shape(input);
        if s.len() != 4 || s[1] != 1 || s[2..] != want {
            return Err(Error::shape(
                "backbone",
                format!("input {s:?}, expected [N, 1, {}, {}]", want[0], want[1]),
            ));
        }
        let mut x = input;
        let mut last_conv = input;
        for b in 0..self.config.widths.len() {
            let c = g.conv2d(x, p[2 * b], Some(p[2 * b + 1]), 1, Padding::Same)?;
            last_conv = g.relu(c)?;
            x = g.max_pool2d(last_conv, 2)?;
        }
        let embedding = g.global_avg_pool(x)?;
        Ok(BackboneNodes {
            last_conv,
            pooled: x,
            embedding,
        })
    }

    /// Continues from maps at `tap` to the embedding (the layers above the
    /// tap carry no parameters).
    pub fn forward_from_tap(&self, g: &mut Graph, maps: NodeId, tap: TapLayer) -> Result<NodeId> {
        let pooled = match tap {
            TapLayer::LastConv => g.max_pool2d(maps, 2)?,
            TapLayer::Pooled => maps,
        };
        g.global_avg_pool(pooled)
    }

    fn batch_input(&self, specs: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let (h, w) = (self.config.input_rows, self.config.input_cols);
        if specs.rank() != 3 || specs.shape()[1..] != [h, w] {
            return Err(Error::shape(
                "backbone",
                format!("spectrograms {:?}, expected [n, {h}, {w}]", specs.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * h * w);
        for &r in rows {
            if r >= specs.shape()[0] {
                return Err(Error::Index(format!("clip {r} of {}", specs.shape()[0])));
            }
            data.extend_from_slice(specs.slab(r));
        }
        Tensor::new(vec![rows.len(), 1, h, w], data)
    }

    /// Feature maps at `tap` for one clip, `[C, h, w]`.
    pub fn tap_maps(&self, specs: &Tensor, clip: usize, tap: TapLayer) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(self.batch_input(specs, &[clip])?);
        let out = self.forward(&mut g, &p, x)?;
        let node = match tap {
            TapLayer::LastConv => out.last_conv,
            TapLayer::Pooled => out.pooled,
        };
        let v = g.value(node);
        v.clone().reshape(&v.shape()[1..])
    }
}

/// Concatenates `[f_i, f_j, (f_i - f_j)², f_i ⊙ f_j]`. Both inputs must have
/// length [`EMBEDDING_DIM`].
pub fn combine_features(f_i: &[f64], f_j: &[f64]) -> Result<Vec<f64>> {
    if f_i.len() != EMBEDDING_DIM || f_j.len() != EMBEDDING_DIM {
        return Err(Error::shape(
            "combine_features",
            format!(
                "lengths {} and {}, expected {EMBEDDING_DIM}",
                f_i.len(),
                f_j.len()
            ),
        ));
    }
    if f_i.iter().chain(f_j).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "combine_features".into(),
        });
    }
    let mut x = Vec::with_capacity(COMBINED_DIM);
    x.extend_from_slice(f_i);
    x.extend_from_slice(f_j);
    x.extend(f_i.iter().zip(f_j).map(|(a, b)| (a - b) * (a - b)));
    x.extend(f_i.iter().zip(f_j).map(|(a, b)| a * b));
    Ok(x)
}

/// Row-wise [`combine_features`] on the tape: `[P, d]`, `[P, d]` → `[P, 4d]`.
pub fn combine_nodes(g: &mut Graph, f_i: NodeId, f_j: NodeId) -> Result<NodeId> {
    let d = g.sub(f_i, f_j)?;
    let sq = g.square(d)?;
    let prod = g.mul(f_i, f_j)?;
    g.concat(&[f_i, f_j, sq, prod], 1)
}

/// Dense `4d → 128 → 1` with relu then sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityHead {
    pub params: ParamStore,
}

pub const HEAD_HIDDEN: usize = 128;

impl SimilarityHead {
    pub fn new(embedding_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let d_in = 4 * embedding_dim;
        let mut params = ParamStore::new();
        params.push(
            "hidden.weight",
            Tensor::randn(&[d_in, HEAD_HIDDEN], (2.0 / d_in as f64).sqrt(), rng),
        );
        params.push("hidden.bias", Tensor::zeros(&[HEAD_HIDDEN]));
        // small output weights keep the untrained score near 0.5
        params.push("out.weight", Tensor::randn(&[HEAD_HIDDEN, 1], 0.01, rng));
        params.push("out.bias", Tensor::zeros(&[1]));
        SimilarityHead { params }
    }

    /// `[P, 4d]` → similarity `[P, 1]` in (0, 1).
    pub fn forward(&self, g: &mut Graph, p: &[NodeId], combined: NodeId) -> Result<NodeId> {
        let h = g.linear(combined, p[0], p[1])?;
        let h = g.relu(h)?;
        let z = g.linear(h, p[2], p[3])?;
        g.sigmoid(z)
    }

    /// Scores `pairs` over rows of a fixed embedding matrix `[n, d]`.
    pub fn score(&self, embeddings: &Tensor, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let e = g.constant(embeddings.clone());
        let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let fi = g.gather_rows(e, &left)?;
        let fj = g.gather_rows(e, &right)?;
        let x = combine_nodes(&mut g, fi, fj)?;
        let s = self.forward(&mut g, &p, x)?;
        Ok(g.value(s).data().to_vec())
    }
}

/// Backbone shared by both branches plus the conjoining head.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseModel {
    pub backbone: Backbone,
    pub head: SimilarityHead,
}

impl SiameseModel {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[0x51a3]);
        let backbone = Backbone::new(config, &mut rng)?;
        let head = SimilarityHead::new(backbone.embedding_dim(), &mut rng);
        Ok(SiameseModel { backbone, head })
    }

    /// Similarity of two spectrograms through the shared backbone.
    pub fn similarity(&self, a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
        if a.values.shape() != b.values.shape() {
            return Err(Error::shape(
                "similarity",
                format!("{:?} vs {:?}", a.values.shape(), b.values.shape()),
            ));
        }
        let specs = Tensor::stack(&[&a.values, &b.values])?;
        let emb = embed_all(&self.backbone, &specs)?;
        Ok(self.head.score(&emb, &[(0, 1)])?[0])
    }

    /// Mean BCE of the pair scores built from clips `specs[clips]`; `pairs`
    /// index into `clips`. Returns `(loss, scores)` nodes.
    pub fn pair_loss(
        &self,
        g: &mut Graph,
        backbone_p: &[NodeId],
        head_p: &[NodeId],
        input: NodeId,
        pairs: &[(usize, usize)],
        targets: &[f64],
    ) -> Result<(NodeId, NodeId)> {
        let out = self.backbone.forward(g, backbone_p, input)?;
        let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let fi = g.gather_rows(out.embedding, &left)?;
        let fj = g.gather_rows(out.embedding, &right)?;
        let x = combine_nodes(g, fi, fj)?;
        let s = self.head.forward(g, head_p, x)?;
        let loss = g.binary_cross_entropy(s, targets)?;
        Ok((loss, s))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for (prefix, store) in [
            ("backbone", &self.backbone.params),
            ("head", &self.head.params),
        ] {
            entries.extend(
                store
                    .iter()
                    .map(|(n, t)| (format!("{prefix}.{n}"), t.clone())),
            );
        }
        write_checkpoint(stem, &entries)
    }

    /// Loads weights saved by [`SiameseModel::save`] into a model built with
    /// the same backbone configuration.
    pub fn load(config: BackboneConfig, stem: &Path) -> Result<Self> {
        let mut model = SiameseModel::new(config, 0)?;
        let entries = read_checkpoint(stem)?;
        let nb = model.backbone.params.len();
        if entries.len() != nb + model.head.params.len() {
            return Err(Error::Config(format!(
                "siamese checkpoint has {} tensors, expected {}",
                entries.len(),
                nb + model.head.params.len()
            )));
        }
        let strip = |entries: &[(String, Tensor)], prefix: &str| -> Vec<(String, Tensor)> {
            entries
                .iter()
                .map(|(n, t)| (n.strip_prefix(prefix).unwrap_or(n).to_string(), t.clone()))
                .collect()
        };
        model
            .backbone
            .params
            .load(&strip(&entries[..nb], "backbone."))?;
        model.head.params.load(&strip(&entries[nb..], "head."))?;
        Ok(model)
    }
}

/// Embeddings `[n, d]` for spectrograms `[n, H, W]`, evaluated in chunks.
pub fn embed_all(backbone: &Backbone, specs: &Tensor) -> Result<Tensor> {
    Ok(embed_with_maps(backbone, specs, None)?.0)
}

const EMBED_CHUNK: usize = 16;

/// As [`embed_all`], optionally also returning the maps at `tap` for every
/// clip, `[n, C, h, w]`.
pub fn embed_with_maps(
    backbone: &Backbone,
    specs: &Tensor,
    tap: Option<TapLayer>,
) -> Result<(Tensor, Option<Tensor>)> {
    let n = specs.shape().first().copied().unwrap_or(0);
    let d = backbone.embedding_dim();
    let mut emb = Vec::with_capacity(n * d);
    let mut maps = Vec::new();
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EMBED_CHUNK) {
        let mut g = Graph::new();
        let p = backbone.params.bind_frozen(&mut g);
        let x = g.constant(backbone.batch_input(specs, chunk)?);
        let out = backbone.forward(&mut g, &p, x)?;
        emb.extend_from_slice(g.value(out.embedding).data());
        match tap {
            Some(TapLayer::LastConv) => maps.extend_from_slice(g.value(out.last_conv).data()),
            Some(TapLayer::Pooled) => maps.extend_from_slice(g.value(out.pooled).data()),
            None => {}
        }
    }
    let maps = match tap {
        Some(t) => {
            let [c, h, w] = backbone.config.tap_shape(t);
            Some(Tensor::new(vec![n, c, h, w], maps)?)
        }
        None => None,
    };
    Ok((Tensor::new(vec![n, d], emb)?, maps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSet {
    /// Sorted by `(i, j)` with `i < j`.
    pub pairs: Vec<Pair>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Same-class unordered pairs available before balancing.
    pub candidate_pos: usize,
    /// Cross-class unordered pairs available before balancing.
    pub candidate_neg: usize,
    /// Classes present in the mask with fewer than two members.
    pub thin_classes: Vec<usize>,
}

impl PairSet {
    pub fn ratio(&self) -> f64 {
        self.n_pos as f64 / self.n_neg as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j", "label"])?;
        for p in &self.pairs {
            w.write_record([
                p.i.to_string(),
                p.j.to_string(),
                if p.same { "same" } else { "different" }.into(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// All same-class and cross-class unordered pairs among masked nodes, then
/// the larger side down-sampled uniformly so `n_pos / n_neg ≈ target_ratio`.
pub fn sample_pairs(
    labels: &[usize],
    mask: &[bool],
    target_ratio: f64,
    seed: u64,
) -> Result<PairSet> {
    if labels.len() != mask.len() {
        return Err(Error::shape(
            "sample_pairs",
            format!("{} labels, {} mask entries", labels.len(), mask.len()),
        ));
    }
    if !(target_ratio > 0.0 && target_ratio.is_finite()) {
        return Err(Error::Config(format!(
            "target_ratio must be positive, got {target_ratio}"
        )));
    }
    let members: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
    let mut counts = std::collections::BTreeMap::new();
    for &i in &members {
        *counts.entry(labels[i]).or_insert(0usize) += 1;
    }
    let thin_classes: Vec<usize> = counts
        .iter()
        .filter(|(_, &c)| c < 2)
        .map(|(&k, _)| k)
        .collect();
    for k in &thin_classes {
        log::warn!(
            "class {k} has fewer than two training samples and contributes no positive pairs"
        );
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            if labels[i] == labels[j] {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::NoPairs(format!(
            "{} positive and {} negative candidates among {} masked nodes",
            pos.len(),
            neg.len(),
            members.len()
        )));
    }
    let (cp, cn) = (pos.len(), neg.len());
    let (keep_pos, keep_neg) = if cp as f64 > target_ratio * cn as f64 {
        (
            ((target_ratio * cn as f64).round() as usize).clamp(1, cp),
            cn,
        )
    } else {
        (
            cp,
            ((cp as f64 / target_ratio).round() as usize).clamp(1, cn),
        )
    };
    let mut rng = rng_for(seed, &[0x9a1e]);
    let mut pick = |all: &[(usize, usize)], k: usize, same: bool| -> Vec<Pair> {
        sample(&mut rng, all.len(), k)
            .into_iter()
            .map(|x| Pair {
                i: all[x].0,
                j: all[x].1,
                same,
            })
            .collect()
    };
    let mut pairs = pick(&pos, keep_pos, true);
    pairs.extend(pick(&neg, keep_neg, false));
    pairs.sort_by_key(|p| (p.i, p.j));
    Ok(PairSet {
        pairs,
        n_pos: keep_pos,
        n_neg: keep_neg,
        candidate_pos: cp,
        candidate_neg: cn,
        thin_classes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiameseConfig {
    pub epochs: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    /// Clips drawn per step; the step's pairs are formed among them so each
    /// clip is embedded once per step.
    pub clips_per_batch: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig {
            epochs: 20,
            batch_size: 64,
            lr: DEFAULT_LR,
            clips_per_batch: 24,
            seed: 0,
        }
    }
}

impl SiameseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || self.clips_per_batch < 2 {
            return Err(Error::Config(
                "siamese epochs must be positive, batch_size and clips_per_batch at least 2".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "siamese lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiameseTrace {
    /// Mean pair loss per epoch.
    pub loss: Vec<f64>,
    /// Fraction of training pairs with `score > 0.5` matching the label.
    pub accuracy: Vec<f64>,
    pub steps: usize,
}

/// Training clips ordered class-interleaved after a per-class shuffle, so a
/// contiguous chunk holds every class in near-equal numbers.
fn interleaved_order(labels: &[usize], members: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in members {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let mut queues: Vec<Vec<usize>> = by_class.into_values().collect();
    for q in queues.iter_mut() {
        q.shuffle(rng);
    }
    queues.shuffle(rng);
    let mut order = Vec::with_capacity(members.len());
    let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..longest {
        for q in &queues {
            if let Some(&i) = q.get(r) {
                order.push(i);
            }
        }
    }
    order
}

/// Trains `model` in place on balanced pairs drawn among `train_mask` clips
/// of `specs` `[n, H, W]`. Every epoch re-draws batches from `seed + epoch`.
pub fn train_siamese(
    model: &mut SiameseModel,
    specs: &Tensor,
    labels: &[usize],
    train_mask: &[bool],
    config: &SiameseConfig,
) -> Result<SiameseTrace> {
    config.validate()?;
    if labels.len() != specs.shape()[0] || train_mask.len() != labels.len() {
        return Err(Error::shape(
            "train_siamese",
            format!(
                "{} clips, {} labels, {} mask",
                specs.shape()[0],
                labels.len(),
                train_mask.len()
            ),
        ));
    }
    // fail early when no pairs exist at all
    sample_pairs(labels, train_mask, 1.0, config.seed)?;

    let members: Vec<usize> = (0..labels.len()).filter(|&i| train_mask[i]).collect();
    let half = config.batch_size / 2;
    let mut adam = AdamState::new(
        model
            .backbone
            .params
            .values()
            .iter()
            .chain(model.head.params.values()),
    );
    let mut trace = SiameseTrace::default();
    for epoch in 0..config.epochs {
        let mut rng = rng_for(config.seed, &[0xe90c, epoch as u64]);
        let order = interleaved_order(labels, &members, &mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(config.clips_per_batch).enumerate() {
            let mut chunk_mask = vec![false; labels.len()];
            chunk.iter().for_each(|&i| chunk_mask[i] = true);
            let set = match sample_pairs(labels, &chunk_mask, 1.0, rng.random()) {
                Ok(s) => s,
                Err(Error::NoPairs(_)) => continue,
                Err(e) => return Err(e),
            };
            let (mut pos, mut neg): (Vec<Pair>, Vec<Pair>) =
                set.pairs.into_iter().partition(|p| p.same);
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let k = half.min(pos.len()).min(neg.len()).max(1);
            let mut chosen: Vec<Pair> = pos
                .into_iter()
                .take(k)
                .chain(neg.into_iter().take(k))
                .collect();
            chosen.shuffle(&mut rng);

            let mut clips: Vec<usize> = chosen.iter().flat_map(|p| [p.i, p.j]).collect();
            clips.sort_unstable();
            clips.dedup();
            let local = |i: usize| clips.binary_search(&i).expect("collected above");
            let pairs: Vec<(usize, usize)> = chosen
                .iter()
                .map(|p| {
                    // randomize branch order so the head sees both orientations
                    if rng.random::<bool>() {
                        (local(p.i), local(p.j))
                    } else {
                        (local(p.j), local(p.i))
                    }
                })
                .collect();
            let targets: Vec<f64> = chosen
                .iter()
                .map(|p| if p.same { 1.0 } else { 0.0 })
                .collect();

            let mut g = Graph::new();
            let bp = model.backbone.params.bind(&mut g);
            let hp = model.head.params.bind(&mut g);
            let x = g.constant(model.backbone.batch_input(specs, &clips)?);
            let (loss, scores) = model
                .pair_loss(&mut g, &bp, &hp, x, &pairs, &targets)
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged(format!(
                        "siamese epoch {epoch} batch {b}: non-finite value in {op}"
                    )),
                    other => other,
                })?;
            let l = g.value(loss).item();
            for (s, t) in g.value(scores).data().iter().zip(&targets) {
                if (*s > 0.5) == (*t > 0.5) {
                    correct += 1;
                }
            }
            seen += targets.len();
            loss_sum += l * targets.len() as f64;
            let grads = g.backward(loss)?;
            let mut all = model.backbone.params.collect_grads(&grads, &bp);
            all.extend(model.head.params.collect_grads(&grads, &hp));
            if all.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged(format!(
                    "siamese epoch {epoch} batch {b}: non-finite gradient"
                )));
            }
            let params = model
                .backbone
                .params
                .values_mut()
                .chain(model.head.params.values_mut());
            adam.step(params, &all, config.lr)?;
            trace.steps += 1;
        }
        if seen == 0 {
            return Err(Error::NoPairs(format!("epoch {epoch} produced no batches")));
        }
        let mean = loss_sum / seen as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged(format!(
                "siamese epoch {epoch}: loss {mean}"
            )));
        }
        log::info!(
            "siamese epoch {epoch}: loss {mean:.4} acc {:.3}",
            correct as f64 / seen as f64
        );
        trace.loss.push(mean);
        trace.accuracy.push(correct as f64 / seen as f64);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub accuracy: f64,
    pub mean_same: f64,
    pub mean_different: f64,
    pub n_pairs: usize,
}

/// Scores balanced pairs among `mask` nodes from fixed embeddings.
pub fn evaluate_pairs(
    head: &SimilarityHead,
    embeddings: &Tensor,
    labels: &[usize],
    mask: &[bool],
    seed: u64,
) -> Result<PairEvaluation> {
    let set = sample_pairs(labels, mask, 1.0, seed)?;
    let idx: Vec<(usize, usize)> = set.pairs.iter().map(|p| (p.i, p.j)).collect();
    let scores = head.score(embeddings, &idx)?;
    let (mut same, mut diff, mut correct) = (0.0, 0.0, 0usize);
    for (p, s) in set.pairs.iter().zip(&scores) {
        if p.same {
            same += s;
        } else {
            diff += s;
        }
        if (*s > 0.5) == p.same {
            correct += 1;
        }
    }
    Ok(PairEvaluation {
        accuracy: correct as f64 / scores.len() as f64,
        mean_same: same / set.n_pos as f64,
        mean_different: diff / set.n_neg as f64,
        n_pairs: scores.len(),
    })
}
