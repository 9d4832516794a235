//! Class-activation heatmaps: gradients of a node's class logit with respect
//! to the backbone feature maps of that node's clip, pooled into per-channel
//! weights and combined into a spatial importance map.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::graph::{EmbeddingGraph, GnnModel};
use crate::io::{heat_color, write_pgm, write_ppm};
use crate::mel::MelSpectrogram;
use crate::siamese::{Backbone, TapLayer};
use crate::tensor::Tensor;

/// Everything needed to explain a node's prediction.
pub struct Explainer<'a> {
    pub backbone: &'a Backbone,
    pub gnn: &'a GnnModel,
    pub graph: &'a EmbeddingGraph,
    /// Backbone inputs `[n, H, W]`, row `i` belonging to node `i`.
    pub specs: &'a Tensor,
    pub tap: TapLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGradients {
    /// `A^k`, `[C, h, w]`.
    pub maps: Tensor,
    /// `∂Y^c/∂A^k`, same shape.
    pub grads: Tensor,
    /// `Y^c`, the pre-softmax score.
    pub logit: f64,
}

impl Explainer<'_> {
    fn check(&self, clip: usize, class: usize) -> Result<()> {
        let n = self.graph.len();
        if clip >= n || self.specs.shape()[0] != n {
            return Err(Error::Index(format!(
                "clip {clip} of {n} graph nodes ({} spectrograms)",
                self.specs.shape()[0]
            )));
        }
        if class >= self.gnn.n_classes {
            return Err(Error::Index(format!(
                "class {class} of {}",
                self.gnn.n_classes
            )));
        }
        Ok(())
    }

    /// Builds `Y^c` on `g` from feature maps bound at `maps` `[1, C, h, w]`:
    /// maps → embedding → node row `clip` of the graph → GNN logits.
    fn logit_node(&self, g: &mut Graph, maps: NodeId, clip: usize, class: usize) -> Result<NodeId> {
        let emb = self.backbone.forward_from_tap(g, maps, self.tap)?;
        let n = self.graph.len();
        let d = self.graph.feature_dim();
        let rows = |range: std::ops::Range<usize>| -> Result<Tensor> {
            Tensor::new(
                vec![range.len(), d],
                self.graph.features.data()[range.start * d..range.end * d].to_vec(),
            )
        };
        let mut parts = Vec::with_capacity(3);
        if clip > 0 {
            parts.push(g.constant(rows(0..clip)?));
        }
        parts.push(emb);
        if clip + 1 < n {
            parts.push(g.constant(rows(clip + 1..n)?));
        }
        let x = g.concat(&parts, 0)?;
        let p = self.gnn.params.bind_frozen(g);
        let logits = self.gnn.logits_node(g, &p, x)?;
        g.element(logits, clip * self.gnn.n_classes + class)
    }

    /// `Y^c` at node `clip` when its feature maps are replaced by `maps`
    /// `[C, h, w]`.
    pub fn class_logit(&self, clip: usize, class: usize, maps: &Tensor) -> Result<f64> {
        self.check(clip, class)?;
        let mut g = Graph::new();
        let m = g.constant(maps.clone().reshape(&with_batch(maps.shape()))?);
        let y = self.logit_node(&mut g, m, clip, class)?;
        Ok(g.value(y).item())
    }

    /// Distance of `Y^c` at the clip's own maps from the nearest relu or
    /// pooling kink; finite differences with a smaller step are smooth.
    pub fn kink_margin(&self, clip: usize, class: usize) -> Result<f64> {
        self.check(clip, class)?;
        let maps = self.backbone.tap_maps(self.specs, clip, self.tap)?;
        let mut g = Graph::new();
        let m = g.constant(maps.clone().reshape(&with_batch(maps.shape()))?);
        self.logit_node(&mut g, m, clip, class)?;
        Ok(g.kink_margin())
    }

    pub fn class_score_gradients(&self, clip: usize, class: usize) -> Result<FeatureGradients> {
        self.check(clip, class)?;
        let maps = self.backbone.tap_maps(self.specs, clip, self.tap)?;
        let mut g = Graph::new();
        let m = g.variable(maps.clone().reshape(&with_batch(maps.shape()))?);
        let y = self.logit_node(&mut g, m, clip, class)?;
        let logit = g.value(y).item();
        let mut grads = g.backward(y)?;
        let grads = match grads.take(m) {
            Some(t) => t.reshape(maps.shape())?,
            None => Tensor::zeros(maps.shape()),
        };
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                op: "class_score_gradients".into(),
            });
        }
        Ok(FeatureGradients { maps, grads, logit })
    }

    /// Heatmap for `class` at node `clip`, upsampled to the spectrogram
    /// size.
    pub fn explain(&self, clip: usize, class: usize) -> Result<Heatmap> {
        let fg = self.class_score_gradients(clip, class)?;
        let s = self.specs.shape();
        let mut h = heatmap(&cam_weights(&fg.grads)?, &fg.maps, s[1], s[2])?;
        h.class_index = class;
        h.layer = self.tap;
        Ok(h)
    }
}

fn with_batch(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// `w_k = Σ_ij relu(g_kij) / (h·w)`.
pub fn cam_weights(grads: &Tensor) -> Result<Vec<f64>> {
    if grads.rank() != 3 {
        return Err(Error::shape(
            "cam_weights",
            format!("{:?}, expected [C, h, w]", grads.shape()),
        ));
    }
    let area = grads.shape()[1] * grads.shape()[2];
    if area == 0 {
        return Err(Error::Empty { op: "cam_weights" });
    }
    Ok(grads
        .data()
        .chunks(area)
        .map(|ch| ch.iter().map(|&g| g.max(0.0)).sum::<f64>() / area as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `relu(Σ_k w_k A^k)` at feature-map resolution.
    pub coarse: Tensor,
    /// `coarse` bilinearly upsampled, rescaled so its mean equals the
    /// coarse mean.
    pub values: Tensor,
    pub class_index: usize,
    pub layer: TapLayer,
}

impl Heatmap {
    /// Scaled to a maximum of 1 (all zeros stay zero).
    pub fn normalized_max(&self) -> Tensor {
        let max = self.values.data().iter().fold(0.0f64, |m, &v| m.max(v));
        if max > 0.0 {
            self.values.map(|v| v / max)
        } else {
            self.values.clone()
        }
    }

    /// Scaled to sum 1 (all zeros stay zero).
    pub fn normalized_mass(&self) -> Tensor {
        let total = self.values.sum();
        if total > 0.0 {
            self.values.map(|v| v / total)
        } else {
            self.values.clone()
        }
    }

    /// Share of total heat inside the given rows (0 for an all-zero map).
    pub fn row_mass_fraction(&self, rows: &[usize]) -> f64 {
        let total = self.values.sum();
        if total <= 0.0 {
            return 0.0;
        }
        rows.iter()
            .filter(|&&r| r < self.values.shape()[0])
            .map(|&r| self.values.row(r).iter().sum::<f64>())
            .sum::<f64>()
            / total
    }
}

/// Combines maps `[C, h, w]` with per-channel `weights` and upsamples to
/// `[rows, cols]`.
pub fn heatmap(weights: &[f64], maps: &Tensor, rows: usize, cols: usize) -> Result<Heatmap> {
    if maps.rank() != 3 || maps.shape()[0] != weights.len() {
        return Err(Error::shape(
            "heatmap",
            format!("{} weights for maps {:?}", weights.len(), maps.shape()),
        ));
    }
    let (h, w) = (maps.shape()[1], maps.shape()[2]);
    let mut coarse = vec![0.0; h * w];
    for (k, &wk) in weights.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        for (c, &a) in coarse
            .iter_mut()
            .zip(&maps.data()[k * h * w..(k + 1) * h * w])
        {
            *c += wk * a;
        }
    }
    coarse.iter_mut().for_each(|v| *v = v.max(0.0));
    let coarse = Tensor::new(vec![h, w], coarse)?;
    let values = upsample_bilinear(&coarse, rows, cols)?;
    Ok(Heatmap {
        coarse,
        values,
        class_index: 0,
        layer: TapLayer::LastConv,
    })
}

/// Half-pixel-centred bilinear resize of `[h, w]` to `[rows, cols]`,
/// rescaled so the output mean equals the input mean.
pub fn upsample_bilinear(m: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if m.rank() != 2 || m.is_empty() || rows == 0 || cols == 0 {
        return Err(Error::shape(
            "upsample_bilinear",
            format!("{:?} to [{rows}, {cols}]", m.shape()),
        ));
    }
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let coord = |dst: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f64)
    };
    let xs: Vec<(usize, usize, f64)> = (0..cols).map(|c| coord(c, cols, w)).collect();
    let d = m.data();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (r0, r1, fy) = coord(r, rows, h);
        for &(c0, c1, fx) in &xs {
            let top = d[r0 * w + c0] * (1.0 - fx) + d[r0 * w + c1] * fx;
            let bottom = d[r1 * w + c0] * (1.0 - fx) + d[r1 * w + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    let mean_in = m.sum() / (h * w) as f64;
    let mean_out = out.iter().sum::<f64>() / (rows * cols) as f64;
    if mean_out > 0.0 {
        let k = mean_in / mean_out;
        out.iter_mut().for_each(|v| *v *= k);
    }
    Tensor::new(vec![rows, cols], out)
}

/// Spectrogram with every pixel whose max-normalized heat is below
/// `threshold` set to zero.
pub fn overlay(heat: &Heatmap, spec: &MelSpectrogram, threshold: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "overlay threshold must be in [0, 1], got {threshold}"
        )));
    }
    if heat.values.shape() != spec.values.shape() {
        return Err(Error::shape(
            "overlay",
            format!(
                "heatmap {:?}, spectrogram {:?}",
                heat.values.shape(),
                spec.values.shape()
            ),
        ));
    }
    let norm = heat.normalized_max();
    let data = norm
        .data()
        .iter()
        .zip(spec.values.data())
        .map(|(&h, &s)| if h >= threshold { s } else { 0.0 })
        .collect();
    Tensor::new(spec.values.shape().to_vec(), data)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplanationFiles {
    pub spectrogram: PathBuf,
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
    pub values_csv: PathBuf,
}

/// Writes the spectrogram, the heatmap and the heat-coloured overlay next to
/// each other, plus the heatmap values as CSV.
pub fn write_explanation(
    dir: &Path,
    clip_id: usize,
    heat: &Heatmap,
    spec: &MelSpectrogram,
    threshold: f64,
) -> Result<ExplanationFiles> {
    let stem = format!(
        "clip{clip_id:04}_class{}_{}",
        heat.class_index,
        heat.layer.tag()
    );
    let files = ExplanationFiles {
        spectrogram: dir.join(format!("{stem}_spectrogram.pgm")),
        heatmap: dir.join(format!("{stem}_heatmap.pgm")),
        overlay: dir.join(format!("{stem}_overlay.ppm")),
        values_csv: dir.join(format!("{stem}_heatmap.csv")),
    };
    let masked = overlay(heat, spec, threshold)?;
    let norm = heat.normalized_max();
    write_pgm(&files.spectrogram, &spec.values)?;
    write_pgm(&files.heatmap, &norm)?;
    let rgb: Vec<[f64; 3]> = norm
        .data()
        .iter()
        .zip(masked.data())
        .map(|(&h, &s)| {
            let c = heat_color(h);
            [c[0] * s, c[1] * s, c[2] * s]
        })
        .collect();
    write_ppm(&files.overlay, spec.n_mels(), spec.n_frames(), &rgb)?;
    let mut w = csv::Writer::from_path(&files.values_csv)?;
    for r in 0..heat.values.shape()[0] {
        w.write_record(heat.values.row(r).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|e| Error::io(&files.values_csv, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_gradients_give_zero_weights() {
        let g = Tensor::full(&[3, 2, 2], -1.0);
        assert_eq!(cam_weights(&g).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn unit_gradients_give_unit_weights() {
        let g = Tensor::ones(&[4, 3, 5]);
        for w in cam_weights(&g).unwrap() {
            assert!((w - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_positive_entry() {
        let mut g = Tensor::full(&[2, 2, 3], -0.5);
        g.data_mut()[7] = 1.2;
        let w = cam_weights(&g).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 1.2 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_zero_heatmap() {
        let maps = Tensor::ones(&[2, 3, 3]);
        let h = heatmap(&[0.0, 0.0], &maps, 6, 6).unwrap();
        assert!(h.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsampling_keeps_constant_maps_constant() {
        let m = Tensor::full(&[4, 5], 0.3);
        let up = upsample_bilinear(&m, 32, 40).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn overlay_rejects_bad_threshold() {
        let h = heatmap(&[1.0], &Tensor::ones(&[1, 2, 2]), 2, 2).unwrap();
        let spec = MelSpectrogram {
            values: Tensor::ones(&[2, 2]),
            config: Default::default(),
        };
        assert!(overlay(&h, &spec, 1.5).is_err());
        assert!(overlay(&h, &spec, -0.1).is_err());
    }
}
