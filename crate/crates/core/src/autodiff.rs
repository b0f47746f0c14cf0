//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The generation/probing pipelines are rebuilt as a fresh graph each
//! optimization step (define-by-run). Values are dense f64 arrays; model
//! weights are held inside ops as shared constants so the tape only tracks
//! activations. Scalars are represented as shape-`[1]` arrays.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Fused resize + per-channel normalization, precomputed as sparse taps.
///
/// Maps a flat `(C,H,W)` image to a flat `(C,OH,OW)` tensor:
/// `out[c,p] = (sum_k in[c, tap_idx] * tap_w - mean[c]) / std[c]`.
#[derive(Debug, Clone)]
pub struct PreprocessPlan {
    pub in_shape: (usize, usize, usize),
    pub out_shape: (usize, usize, usize),
    /// Per output spatial pixel: up to four (input spatial index, weight) taps.
    pub taps: Vec<[(usize, f64); 4]>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl PreprocessPlan {
    /// Bilinear resize (half-pixel centers) from `(c, h, w)` to `(c, oh, ow)`
    /// followed by `(x - mean) / std` per channel.
    pub fn bilinear(
        in_shape: (usize, usize, usize),
        out_hw: (usize, usize),
        channel_mean: Vec<f64>,
        channel_std: Vec<f64>,
    ) -> Self {
        let (c, h, w) = in_shape;
        assert_eq!(channel_mean.len(), c);
        assert_eq!(channel_std.len(), c);
        let (oh, ow) = out_hw;
        let sy = h as f64 / oh as f64;
        let sx = w as f64 / ow as f64;
        let mut taps = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..ow {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                taps.push([
                    (y0 * w + x0, (1.0 - wy) * (1.0 - wx)),
                    (y0 * w + x1, (1.0 - wy) * wx),
                    (y1 * w + x0, wy * (1.0 - wx)),
                    (y1 * w + x1, wy * wx),
                ]);
            }
        }
        PreprocessPlan {
            in_shape,
            out_shape: (c, oh, ow),
            taps,
            channel_mean,
            channel_std,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_shape.0 * self.in_shape.1 * self.in_shape.2
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.0 * self.out_shape.1 * self.out_shape.2
    }

    /// Forward application on a flat image.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let (c, h, w) = self.in_shape;
        let (_, oh, ow) = self.out_shape;
        let in_hw = h * w;
        let out_hw = oh * ow;
        let mut out = vec![0.0; c * out_hw];
        for ch in 0..c {
            let base = ch * in_hw;
            let obase = ch * out_hw;
            let mean = self.channel_mean[ch];
            let std = self.channel_std[ch];
            for (p, tap) in self.taps.iter().enumerate() {
                let mut v = 0.0;
                for (idx, wgt) in tap {
                    v += input[base + idx] * wgt;
                }
                out[obase + p] = (v - mean) / std;
            }
        }
        out
    }
}

enum Op {
    Leaf { requires_grad: bool },
    /// Assemble an `N x d` matrix: frozen rows from a constant matrix, each
    /// parent vector written at `positions[i]`.
    AssembleRows { positions: Vec<usize> },
    /// `(N, d) -> (d,)`, mean over rows.
    MeanRows,
    /// `x -> W x + b`.
    Linear { w: Arc<Array2<f64>> },
    /// Elementwise `a + s * b`.
    Axpy { s: f64 },
    AddConst,
    MulConst { c: Arc<ArrayD<f64>> },
    Scale { s: f64 },
    Tanh,
    Relu,
    /// 1-D softmax.
    Softmax,
    /// 1-D log-softmax.
    LogSoftmax,
    /// `(P,) -> (pixels,)`: weighted blend of fixed template images.
    Blend { templates: Arc<Array2<f64>> },
    Preprocess { plan: Arc<PreprocessPlan> },
    /// `(n,) -> scalar`, select one coordinate.
    PickIndex { index: usize },
    /// Any shape -> scalar mean.
    MeanAll,
    /// k scalar parents -> scalar mean.
    AverageScalars,
    /// Straight-through embedding lookup: forward returns the table row at
    /// `argmax(weights)` (ties to the lowest index); backward treats the
    /// output as `table^T . weights`.
    HardEmbed { table: Arc<Array2<f64>> },
}

struct Node {
    value: ArrayD<f64>,
    parents: Vec<NodeId>,
    op: Op,
}

/// A define-by-run tape. One graph per optimization step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[1]), vec![v]).unwrap()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<NodeId>, op: Op) -> NodeId {
        self.nodes.push(Node { value, parents, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0]]
    }

    pub fn vector_value(&self, id: NodeId) -> Array1<f64> {
        let v = &self.nodes[id.0].value;
        Array1::from_iter(v.iter().copied())
    }

    // ---- node constructors ------------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, vec![], Op::Leaf { requires_grad: true })
    }

    pub fn leaf_vec(&mut self, value: Array1<f64>) -> NodeId {
        self.leaf(value.into_dyn())
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, vec![], Op::Leaf { requires_grad: false })
    }

    pub fn constant_vec(&mut self, value: Array1<f64>) -> NodeId {
        self.constant(value.into_dyn())
    }

    pub fn constant_matrix(&mut self, value: Array2<f64>) -> NodeId {
        self.constant(value.into_dyn())
    }

    pub fn assemble_rows(
        &mut self,
        frozen: Arc<Array2<f64>>,
        positions: Vec<usize>,
        rows: &[NodeId],
    ) -> NodeId {
        assert_eq!(positions.len(), rows.len());
        let mut out = (*frozen).clone();
        for (pos, row) in positions.iter().zip(rows) {
            let v = self.vector_value(*row);
            out.row_mut(*pos).assign(&v);
        }
        self.push(out.into_dyn(), rows.to_vec(), Op::AssembleRows { positions })
    }

    pub fn mean_rows(&mut self, m: NodeId) -> NodeId {
        let v = &self.nodes[m.0].value;
        let shape = v.shape();
        assert_eq!(shape.len(), 2);
        let (n, d) = (shape[0], shape[1]);
        let mut out = Array1::<f64>::zeros(d);
        for i in 0..n {
            for j in 0..d {
                out[j] += v[[i, j]];
            }
        }
        out.mapv_inplace(|x| x / n as f64);
        self.push(out.into_dyn(), vec![m], Op::MeanRows)
    }

    pub fn linear(&mut self, w: Arc<Array2<f64>>, b: Option<Arc<Array1<f64>>>, x: NodeId) -> NodeId {
        let xv = self.vector_value(x);
        assert_eq!(w.ncols(), xv.len(), "linear: weight/input dim mismatch");
        let mut out = w.dot(&xv);
        if let Some(bias) = &b {
            out += &**bias;
        }
        self.push(out.into_dyn(), vec![x], Op::Linear { w })
    }

    pub fn axpy(&mut self, a: NodeId, b: NodeId, s: f64) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "axpy: shape mismatch");
        let out = av + &(bv * s);
        self.push(out, vec![a, b], Op::Axpy { s })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.axpy(a, b, 1.0)
    }

    pub fn add_const(&mut self, x: NodeId, c: Arc<ArrayD<f64>>) -> NodeId {
        let out = &self.nodes[x.0].value + &*c;
        self.push(out, vec![x], Op::AddConst)
    }

    pub fn mul_const(&mut self, x: NodeId, c: Arc<ArrayD<f64>>) -> NodeId {
        let out = &self.nodes[x.0].value * &*c;
        self.push(out, vec![x], Op::MulConst { c })
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = &self.nodes[x.0].value * s;
        self.push(out, vec![x], Op::Scale { s })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(f64::tanh);
        self.push(out, vec![x], Op::Tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(out, vec![x], Op::Relu)
    }

    /// Soft clip to `(-limit, limit)`: `limit * tanh(x / limit)`.
    pub fn soft_clip(&mut self, x: NodeId, limit: f64) -> NodeId {
        let inner = self.scale(x, 1.0 / limit);
        let t = self.tanh(inner);
        self.scale(t, limit)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.vector_value(x);
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = xv.mapv(|v| (v - max).exp());
        let sum: f64 = exps.sum();
        let out = exps / sum;
        self.push(out.into_dyn(), vec![x], Op::Softmax)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.vector_value(x);
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = xv.mapv(|v| (v - max).exp()).sum().ln() + max;
        let out = xv.mapv(|v| v - log_sum);
        self.push(out.into_dyn(), vec![x], Op::LogSoftmax)
    }

    pub fn blend(&mut self, templates: Arc<Array2<f64>>, weights: NodeId) -> NodeId {
        let wv = self.vector_value(weights);
        assert_eq!(templates.nrows(), wv.len(), "blend: weight count mismatch");
        let out = templates.t().dot(&wv);
        self.push(out.into_dyn(), vec![weights], Op::Blend { templates })
    }

    pub fn preprocess(&mut self, plan: Arc<PreprocessPlan>, image: NodeId) -> NodeId {
        let img = &self.nodes[image.0].value;
        assert_eq!(img.len(), plan.in_len(), "preprocess: input length mismatch");
        let flat: Vec<f64> = img.iter().copied().collect();
        let out = Array1::from_vec(plan.apply(&flat));
        self.push(out.into_dyn(), vec![image], Op::Preprocess { plan })
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(index < xv.len(), "pick: index out of range");
        let out = scalar(xv.iter().nth(index).copied().unwrap());
        self.push(out, vec![x], Op::PickIndex { index })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = scalar(xv.sum() / xv.len() as f64);
        self.push(out, vec![x], Op::MeanAll)
    }

    pub fn average_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let sum: f64 = parts.iter().map(|p| self.scalar_value(*p)).sum();
        self.push(scalar(sum / parts.len() as f64), parts.to_vec(), Op::AverageScalars)
    }

    /// Straight-through hard embedding: see [`Op::HardEmbed`].
    pub fn hard_embed(&mut self, table: Arc<Array2<f64>>, weights: NodeId) -> NodeId {
        let wv = self.vector_value(weights);
        assert_eq!(table.nrows(), wv.len(), "hard_embed: weight count mismatch");
        let idx = argmax(wv.as_slice().unwrap());
        let out = table.row(idx).to_owned();
        self.push(out.into_dyn(), vec![weights], Op::HardEmbed { table })
    }

    /// Checks a node's value for NaN/inf; `step`/`context` flow into the error.
    pub fn ensure_finite(&self, id: NodeId, step: usize, context: &str) -> Result<()> {
        if self.nodes[id.0].value.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { step, context: context.to_string() })
        }
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar node. Returns per-node gradients; only
    /// leaves with `requires_grad` and interior nodes on the path are filled.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            let parent_grads = self.op_backward(node, &g);
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if matches!(self.nodes[pid.0].op, Op::Leaf { requires_grad: false }) {
                    continue;
                }
                match &mut grads[pid.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Re-store the node's own gradient for inspection.
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn op_backward(&self, node: &Node, g: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::AssembleRows { positions, .. } => {
                let gm = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                positions
                    .iter()
                    .map(|pos| gm.row(*pos).to_owned().into_dyn())
                    .collect()
            }
            Op::MeanRows => {
                let parent = &self.nodes[node.parents[0].0].value;
                let shape = parent.shape();
                let (n, d) = (shape[0], shape[1]);
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut out = Array2::<f64>::zeros((n, d));
                for i in 0..n {
                    for j in 0..d {
                        out[[i, j]] = gv[j] / n as f64;
                    }
                }
                vec![out.into_dyn()]
            }
            Op::Linear { w, .. } => {
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                vec![w.t().dot(&gv).into_dyn()]
            }
            Op::Axpy { s } => vec![g.clone(), g * *s],
            Op::AddConst => vec![g.clone()],
            Op::MulConst { c } => vec![g * &**c],
            Op::Scale { s } => vec![g * *s],
            Op::Tanh => {
                let y = &node.value;
                vec![g * &y.mapv(|v| 1.0 - v * v)]
            }
            Op::Relu => {
                let x = &self.nodes[node.parents[0].0].value;
                vec![g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })]
            }
            Op::Softmax => {
                let y = node.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let dot: f64 = y.iter().zip(gv.iter()).map(|(a, b)| a * b).sum();
                let out = Array1::from_iter(y.iter().zip(gv.iter()).map(|(yi, gi)| yi * (gi - dot)));
                vec![out.into_dyn()]
            }
            Op::LogSoftmax => {
                let x = &self.nodes[node.parents[0].0].value;
                let xv = x.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps = xv.mapv(|v| (v - max).exp());
                let sum: f64 = exps.sum();
                let soft = exps / sum;
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let gsum: f64 = gv.sum();
                let out = Array1::from_iter(gv.iter().zip(soft.iter()).map(|(gi, si)| gi - si * gsum));
                vec![out.into_dyn()]
            }
            Op::Blend { templates } => {
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                vec![templates.dot(&gv).into_dyn()]
            }
            Op::Preprocess { plan } => {
                let (c, h, w) = plan.in_shape;
                let (_, oh, ow) = plan.out_shape;
                let in_hw = h * w;
                let out_hw = oh * ow;
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut out = vec![0.0; c * in_hw];
                for ch in 0..c {
                    let base = ch * in_hw;
                    let obase = ch * out_hw;
                    let std = plan.channel_std[ch];
                    for (p, tap) in plan.taps.iter().enumerate() {
                        let go = gv[obase + p] / std;
                        for (idx, wgt) in tap {
                            out[base + idx] += go * wgt;
                        }
                    }
                }
                vec![Array1::from_vec(out).into_dyn()]
            }
            Op::PickIndex { index } => {
                let parent = &self.nodes[node.parents[0].0].value;
                let mut out = ArrayD::<f64>::zeros(parent.raw_dim());
                out.as_slice_mut().unwrap()[*index] = g[[0]];
                vec![out]
            }
            Op::MeanAll => {
                let parent = &self.nodes[node.parents[0].0].value;
                let n = parent.len() as f64;
                let mut out = ArrayD::<f64>::zeros(parent.raw_dim());
                out.fill(g[[0]] / n);
                vec![out]
            }
            Op::AverageScalars => {
                let k = node.parents.len() as f64;
                node.parents.iter().map(|_| scalar(g[[0]] / k)).collect()
            }
            Op::HardEmbed { table } => {
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                vec![table.dot(&gv).into_dyn()]
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn vector(&self, id: NodeId) -> Array1<f64> {
        match self.get(id) {
            Some(g) => Array1::from_iter(g.iter().copied()),
            None => Array1::zeros(0),
        }
    }
}

/// Index of the maximum value, ties broken by the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
