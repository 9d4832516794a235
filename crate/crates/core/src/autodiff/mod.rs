//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value,
//! and [`Graph::backward`] walks the tape in reverse accumulating gradients.
//! Build a fresh graph per forward pass.
//!
//! Shape table (`N` batch, `C` channels, `d` features):
//!
//! | op                     | operands                       | output                    |
//! |------------------------|--------------------------------|---------------------------|
//! | `add` `sub` `mul`      | equal shapes                   | same                      |
//! | `square` `relu` `sigmoid` `scale` | any                 | same                      |
//! | `add_bias`             | `[.., d]`, `[d]`               | `[.., d]`                 |
//! | `matmul`               | `[m, k]`, `[k, n]`             | `[m, n]`                  |
//! | `conv2d`               | `[C, H, W]` or `[N, C, H, W]`, weight `[O, C, kh, kw]`, bias `[O]` | `[O, H', W']` / `[N, O, H', W']` |
//! | `max_pool2d(s)`        | `[.., H, W]`                   | `[.., H/s, W/s]` (floor)  |
//! | `global_avg_pool`      | `[C, H, W]` / `[N, C, H, W]`   | `[C]` / `[N, C]`          |
//! | `concat(axis)`         | equal except `axis`            | summed along `axis`       |
//! | `gather_rows`          | `[n, ..]`, indices             | `[len, ..]`               |
//! | `sum` `mean`           | any                            | scalar `[]`               |
//! | `softmax(axis)`        | any, `axis` non-empty          | same                      |
//! | `cross_entropy`        | logits `[n, c]`, targets, mask | scalar                    |
//! | `binary_cross_entropy` | probabilities, targets         | scalar                    |
//! | `element(i)`           | any                            | scalar                    |
//! | `edge_mean_relu`       | `[n, d]`, `[d]`, `n ≥ 2`       | `[n, d]`                  |
//!
//! Conventions: the derivative of `relu` at exactly zero is zero, and
//! `max_pool2d` routes the gradient to the first maximum of a window.
//! Every forward value and every gradient is checked for NaN/Inf.

pub mod adam;
pub mod gradcheck;
mod kernels;
pub mod params;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};
use kernels::ConvGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size `ceil(input / stride)`.
    Same,
    /// No padding; output `(input - kernel) / stride + 1`.
    Valid,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool {
        input: NodeId,
        size: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: NodeId,
        spatial: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Reshape(NodeId),
    GatherRows {
        input: NodeId,
        rows: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Softmax {
        input: NodeId,
        axis: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    BinaryCrossEntropy {
        probs: NodeId,
        targets: Vec<f64>,
    },
    Element {
        input: NodeId,
        index: usize,
    },
    EdgeMeanRelu {
        u: NodeId,
        bias: NodeId,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | MatMul(a, b) => vec![*a, *b],
            Square(a) | Scale(a, _) | Relu(a) | Sigmoid(a) | Reshape(a) | Sum(a) | Mean(a) => {
                vec![*a]
            }
            Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut p = vec![*input, *weight];
                p.extend(bias.iter().copied());
                p
            }
            MaxPool { input, .. }
            | GlobalAvgPool { input, .. }
            | GatherRows { input, .. }
            | Softmax { input, .. }
            | Element { input, .. } => vec![*input],
            Concat { inputs, .. } => inputs.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            BinaryCrossEntropy { probs, .. } => vec![*probs],
            EdgeMeanRelu { u, bias } => vec![*u, *bias],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by a backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const PROB_FLOOR: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("operands share a shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), "square")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    /// Adds a `[d]` bias to every trailing `d`-slice of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(d.max(1)) {
            chunk.iter_mut().zip(&b).for_each(|(x, b)| *x += b);
        }
        self.push(v, Op::AddBias(x, bias), "add_bias")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let v = Tensor::new(vec![m, n], out)?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// Dense layer `x · w + b` for `x: [n, d_in]`, `w: [d_in, d_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let (batch, c, h, w) = match si.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(Error::shape("conv2d", format!("input rank {}", si.len()))),
        };
        if sw.len() != 4 || sw[1] != c || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?}, weight {sw:?}, stride {stride}"),
            ));
        }
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::shape(
                        "conv2d",
                        format!("{h}x{w} smaller than kernel"),
                    ));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            out_channels: o,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_forward(
            &geom,
            batch,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = if si.len() == 3 {
            vec![o, out_h, out_w]
        } else {
            vec![batch, o, out_h, out_w]
        };
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
            },
            "conv2d",
        )
    }

    /// Non-overlapping `size × size` max pooling over the last two axes.
    pub fn max_pool2d(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 || size == 0 || s[s.len() - 2] < size || s[s.len() - 1] < size {
            return Err(Error::shape(
                "max_pool2d",
                format!("{s:?} with window {size}"),
            ));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        let (out, argmax) = kernels::max_pool_forward(self.value(input).data(), planes, h, w, size);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([h / size, w / size]);
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::MaxPool {
                input,
                size,
                argmax,
            },
            "max_pool2d",
        )
    }

    /// Spatial mean per channel.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 && s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("rank {}", s.len())));
        }
        let spatial = s[s.len() - 2] * s[s.len() - 1];
        if spatial == 0 {
            return Err(Error::Empty {
                op: "global_avg_pool",
            });
        }
        let data = self
            .value(input)
            .data()
            .chunks(spatial)
            .map(|p| p.iter().sum::<f64>() / spatial as f64)
            .collect();
        let v = Tensor::new(s[..s.len() - 2].to_vec(), data)?;
        self.push(v, Op::GlobalAvgPool { input, spatial }, "global_avg_pool")
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs.first().ok_or(Error::Empty { op: "concat" })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let len = self.shape(id)[axis] * inner;
                data.extend_from_slice(&self.value(id).data()[o * len..(o + 1) * len]);
            }
        }
        let v = Tensor::new(shape, data)?;
        self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(input).clone().reshape(shape)?;
        self.push(v, Op::Reshape(input), "reshape")
    }

    /// Selects slices along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, input: NodeId, rows: &[usize]) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Index(format!("row {r} of {}", s[0])));
            }
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut shape = s.clone();
        shape[0] = rows.len();
        let v = Tensor::new(shape, data)?;
        self.push(
            v,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty { op: "mean" });
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), "mean")
    }

    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {s:?}")));
        }
        if s[axis] == 0 {
            return Err(Error::Empty { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let v = Tensor::new(s, out)?;
        self.push(v, Op::Softmax { input, axis }, "softmax")
    }

    /// Mean softmax cross-entropy over the rows of `logits` selected by
    /// `mask`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {s:?}, {} targets, {} mask",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let classes = s[1];
        if classes == 0 {
            return Err(Error::Empty {
                op: "cross_entropy",
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty {
                op: "cross_entropy",
            });
        }
        let x = self.value(logits);
        let mut total = 0.0;
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= classes {
                return Err(Error::Index(format!("target class {t} of {classes}")));
            }
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Tensor::scalar(total / count as f64);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy of probabilities against targets in `[0, 1]`.
    pub fn binary_cross_entropy(&mut self, probs: NodeId, targets: &[f64]) -> Result<NodeId> {
        let p = self.value(probs);
        if p.len() != targets.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} probabilities, {} targets", p.len(), targets.len()),
            ));
        }
        if p.is_empty() {
            return Err(Error::Empty {
                op: "binary_cross_entropy",
            });
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let v = Tensor::scalar(total / targets.len() as f64);
        self.push(
            v,
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            "binary_cross_entropy",
        )
    }

    /// Scalar view of one entry (flat row-major index).
    pub fn element(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(input);
        if index >= t.len() {
            return Err(Error::Index(format!("element {index} of {:?}", t.shape())));
        }
        let v = Tensor::scalar(t.data()[index]);
        self.push(v, Op::Element { input, index }, "element")
    }

    /// Complete-graph edge messages aggregated by mean:
    /// `out[i] = mean_{j≠i} relu(u[i] - u[j] + bias)`.
    ///
    /// With `u = x·W` this equals averaging `relu(W(x_i - x_j) + b)` over all
    /// neighbours, in `O(n²d)` time and `O(nd)` memory.
    pub fn edge_mean_relu(&mut self, u: NodeId, bias: NodeId) -> Result<NodeId> {
        let s = self.shape(u).to_vec();
        if s.len() != 2 || self.shape(bias) != [s[1]] {
            return Err(Error::shape(
                "edge_mean_relu",
                format!("{s:?} with bias {:?}", self.shape(bias)),
            ));
        }
        let (n, d) = (s[0], s[1]);
        if n < 2 {
            return Err(Error::Empty {
                op: "edge_mean_relu",
            });
        }
        let uv = self.value(u).data();
        let b = self.value(bias).data();
        let inv = 1.0 / (n - 1) as f64;
        let mut out = vec![0.0; n * d];
        out.par_chunks_mut(d).enumerate().for_each(|(i, acc)| {
            let ui = &uv[i * d..(i + 1) * d];
            for j in (0..n).filter(|&j| j != i) {
                let uj = &uv[j * d..(j + 1) * d];
                for (((a, x), y), c) in acc.iter_mut().zip(ui).zip(uj).zip(b) {
                    *a += (x - y + c).max(0.0);
                }
            }
            acc.iter_mut().for_each(|v| *v *= inv);
        });
        let v = Tensor::new(s, out)?;
        self.push(v, Op::EdgeMeanRelu { u, bias }, "edge_mean_relu")
    }

    /// Smallest distance of any recorded non-differentiable point (relu
    /// input at zero, pooling tie) from its kink. Finite-difference probes
    /// with a step below this margin see only smooth behaviour.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.value(*a).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool { input, size, .. } => {
                    let s = self.shape(*input);
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let planes = s[..s.len() - 2].iter().product();
                    margin = margin.min(kernels::max_pool_margin(
                        self.value(*input).data(),
                        planes,
                        h,
                        w,
                        *size,
                        matches!(self.nodes[input.0].op, Op::Relu(_)),
                    ));
                }
                Op::EdgeMeanRelu { u, bias } => {
                    let s = self.shape(*u);
                    let (n, d) = (s[0], s[1]);
                    let (uv, b) = (self.value(*u).data(), self.value(*bias).data());
                    for i in 0..n {
                        for j in (0..n).filter(|&j| j != i) {
                            for k in 0..d {
                                margin = margin.min((uv[i * d + k] - uv[j * d + k] + b[k]).abs());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Which side of every kink the forward pass took: relu signs, max-pool
    /// winners and edge-relu signs, in tape order. Two evaluations with equal
    /// patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    pattern.extend(self.value(*a).data().iter().map(|&v| (v > 0.0) as usize))
                }
                Op::MaxPool { argmax, .. } => pattern.extend_from_slice(argmax),
                Op::EdgeMeanRelu { u, bias } => {
                    let s = self.shape(*u);
                    let (n, d) = (s[0], s[1]);
                    let (uv, b) = (self.value(*u).data(), self.value(*bias).data());
                    for i in 0..n {
                        for j in (0..n).filter(|&j| j != i) {
                            for k in 0..d {
                                pattern.push((uv[i * d + k] - uv[j * d + k] + b[k] > 0.0) as usize);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        pattern
    }

    /// Backpropagates from a scalar `loss` and marks the tape consumed; a
    /// second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let grads = self.backward_retain(loss)?;
        self.consumed = true;
        Ok(grads)
    }

    /// Backpropagates without consuming the tape, so further scalars of the
    /// same forward pass can be differentiated.
    pub fn backward_retain(&self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient at node {idx}"),
                });
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let shaped = |shape: &[usize], data: Vec<f64>| Tensor::new(shape.to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        accumulate(grads, p, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, shaped(va.shape(), d)?);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, shaped(vb.shape(), d)?);
                }
            }
            Op::Square(a) => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(g, x)| 2.0 * g * x)
                    .collect();
                accumulate(grads, *a, shaped(va.shape(), d)?);
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let d = self.shape(*b)[0];
                    let mut db = vec![0.0; d];
                    for chunk in g.data().chunks(d.max(1)) {
                        db.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                    }
                    accumulate(grads, *b, shaped(&[d], db)?);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut da);
                    accumulate(grads, *a, shaped(&[m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut db);
                    accumulate(grads, *b, shaped(&[k, n], db)?);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, shaped(va.shape(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, shaped(node.value.shape(), d)?);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
            } => {
                let cg = kernels::conv2d_backward(
                    geom,
                    *batch,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    self.wants(*input),
                );
                if let Some(dx) = cg.input {
                    accumulate(grads, *input, shaped(self.shape(*input), dx)?);
                }
                if self.wants(*weight) {
                    accumulate(grads, *weight, shaped(self.shape(*weight), cg.weight)?);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        accumulate(grads, *b, shaped(self.shape(*b), cg.bias)?);
                    }
                }
            }
            Op::MaxPool { input, argmax, .. } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (gv, &src) in g.data().iter().zip(argmax) {
                    dx[src] += gv;
                }
                accumulate(grads, *input, shaped(self.shape(*input), dx)?);
            }
            Op::GlobalAvgPool { input, spatial } => {
                let inv = 1.0 / *spatial as f64;
                let dx = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, *spatial))
                    .collect();
                accumulate(grads, *input, shaped(self.shape(*input), dx)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let len = self.shape(id)[*axis] * inner;
                    if self.wants(id) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g.data()[start..start + len]);
                        }
                        accumulate(grads, id, shaped(self.shape(id), d)?);
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.clone().reshape(self.shape(*a))?);
            }
            Op::GatherRows { input, rows } => {
                let s = self.shape(*input);
                let inner: usize = s[1..].iter().product();
                let mut dx = vec![0.0; self.value(*input).len()];
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g.data()[k * inner..(k + 1) * inner];
                    dx[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, v)| *a += v);
                }
                accumulate(grads, *input, shaped(s, dx)?);
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Tensor::full(self.shape(*a), g.item()));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                accumulate(grads, *a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let gd = g.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| y[at(k)] * gd[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *input, shaped(node.value.shape(), dx)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                let x = self.value(*logits);
                let c = x.shape()[1];
                let scale = g.item() / *count as f64;
                let mut dx = vec![0.0; x.len()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = x.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for k in 0..c {
                        let p = (row[k] - max).exp() / z;
                        dx[r * c + k] = scale * (p - if k == t { 1.0 } else { 0.0 });
                    }
                }
                accumulate(grads, *logits, shaped(x.shape(), dx)?);
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                let p = self.value(*probs);
                let scale = g.item() / targets.len() as f64;
                let dx = p
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                        scale * (p - t) / (p * (1.0 - p))
                    })
                    .collect();
                accumulate(grads, *probs, shaped(p.shape(), dx)?);
            }
            Op::Element { input, index } => {
                let mut dx = Tensor::zeros(self.shape(*input));
                dx.data_mut()[*index] = g.item();
                accumulate(grads, *input, dx);
            }
            Op::EdgeMeanRelu { u, bias } => {
                let s = self.shape(*u);
                let (n, d) = (s[0], s[1]);
                let (uv, b) = (self.value(*u).data(), self.value(*bias).data());
                let inv = 1.0 / (n - 1) as f64;
                let gs: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
                // du_i = Σ_j [z_ij > 0] s_i - Σ_j [z_ji > 0] s_j,  db = Σ_i Σ_j [z_ij > 0] s_i
                let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let ui = &uv[i * d..(i + 1) * d];
                        let si = &gs[i * d..(i + 1) * d];
                        // active[k] counts j with z_ij > 0; inbound sums s_j over z_ji > 0
                        let mut active = vec![0.0; d];
                        let mut inbound = vec![0.0; d];
                        for j in (0..n).filter(|&j| j != i) {
                            let uj = &uv[j * d..(j + 1) * d];
                            let sj = &gs[j * d..(j + 1) * d];
                            for k in 0..d {
                                let diff = ui[k] - uj[k];
                                active[k] += if diff + b[k] > 0.0 { 1.0 } else { 0.0 };
                                inbound[k] += if b[k] - diff > 0.0 { sj[k] } else { 0.0 };
                            }
                        }
                        let db: Vec<f64> = active.iter().zip(si).map(|(c, s)| c * s).collect();
                        let du = db.iter().zip(&inbound).map(|(a, v)| a - v).collect();
                        (du, db)
                    })
                    .collect();
                let mut du_all = Vec::with_capacity(n * d);
                let mut db_all = vec![0.0; d];
                for (du, db) in rows {
                    du_all.extend_from_slice(&du);
                    db_all.iter_mut().zip(&db).for_each(|(a, v)| *a += v);
                }
                if self.wants(*u) {
                    accumulate(grads, *u, shaped(&[n, d], du_all)?);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, shaped(&[d], db_all)?);
                }
            }
        }
        Ok(())
    }
}
