//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the indices of its parents. [`Graph::backward`] walks the tape in
//! reverse from a scalar node. Nodes that do not depend on any
//! gradient-requiring leaf are never differentiated through, which is how
//! frozen parameters cost nothing in the reverse pass.

use std::cell::RefCell;

use crate::boxes::{BBox, BoxCoder};
use crate::detector::roi_align::{roi_align, roi_align_backward, Roi, RoiAlignSpec};
use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::tensor::{gemm, Tensor4};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    DeformConv2d {
        x: Var,
        off: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        arg: Vec<usize>,
    },
    ConcatChannels(Vec<Var>),
    ConcatBatch(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxChannels(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    L2NormalizeRows {
        x: Var,
        eps: f64,
    },
    RoiAlign {
        levels: Vec<Var>,
        strides: Vec<f64>,
        rois: Vec<Roi>,
        spec: RoiAlignSpec,
    },
    Gather {
        x: Var,
        picks: Vec<[usize; 4]>,
    },
    DecodeBoxes {
        deltas: Var,
        anchors: Vec<BBox>,
        coder: BoxCoder,
    },
    IouLoss {
        pred: Var,
        gts: Vec<BBox>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        support: Vec<bool>,
    },
    MeanAbs {
        x: Var,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    BceWithLogits {
        x: Var,
        rows: Vec<usize>,
        targets: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        rows: Vec<usize>,
        targets: Vec<[f64; 4]>,
        beta: f64,
    },
    SumSquares(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    DotConst {
        x: Var,
        w: Tensor4,
    },
}

struct Node {
    value: Tensor4,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Values read out of the graph without a gradient path, in read order.
/// A graph in replay mode returns recorded values instead of fresh ones, so
/// the discrete choices built on them stay fixed under perturbation.
#[derive(Clone, Debug, Default)]
pub struct HeldValues {
    pub values: Vec<Vec<f64>>,
}

#[derive(Default)]
struct HoldTape {
    record: Vec<Vec<f64>>,
    replay: Option<Vec<Vec<f64>>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    held: RefCell<HoldTape>,
}

fn broadcast_shape(op: &'static str, a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    const DIMS: [&str; 4] = ["batch", "channels", "height", "width"];
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(Error::Shape {
                    op,
                    dim: DIMS[d],
                    expected: x,
                    got: y,
                })
            }
        };
    }
    Ok(out)
}

/// Flat source index inside a (possibly broadcast) tensor of `shape` for the
/// output coordinate `(b, c, y, x)`.
#[inline]
fn bcast_index(shape: [usize; 4], b: usize, c: usize, y: usize, x: usize) -> usize {
    let b = if shape[0] == 1 { 0 } else { b };
    let c = if shape[1] == 1 { 0 } else { c };
    let y = if shape[2] == 1 { 0 } else { y };
    let x = if shape[3] == 1 { 0 } else { x };
    ((b * shape[1] + c) * shape[2] + y) * shape[3] + x
}

fn binary_map(a: &Tensor4, b: &Tensor4, out_shape: [usize; 4], f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor4::new(out_shape, data).expect("same-shape binary op");
    }
    let (sa, sb) = (a.shape(), b.shape());
    Tensor4::from_fn(out_shape, |n, c, y, x| {
        f(a.data()[bcast_index(sa, n, c, y, x)], b.data()[bcast_index(sb, n, c, y, x)])
    })
}

/// Sums `g` (output-shaped) down to `shape` along broadcast dimensions.
fn reduce_to(g: &Tensor4, shape: [usize; 4]) -> Tensor4 {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor4::zeros(shape);
    let [n, c, h, w] = g.shape();
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[bcast_index(shape, b, ch, y, x)] += g.data()[i];
                    i += 1;
                }
            }
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_view(t: &Tensor4) -> (usize, usize) {
    (t.batch(), t.item_len())
}

/// `(inter, union, iou)` plus the gradient of `1 − IoU` w.r.t. the
/// predicted corners, or `None` for a degenerate prediction.
fn iou_loss_parts(p: [f64; 4], g: &BBox) -> (f64, [f64; 4]) {
    let [px1, py1, px2, py2] = p;
    let pw = px2 - px1;
    let ph = py2 - py1;
    if !(pw > 0.0 && ph > 0.0) || !p.iter().all(|v| v.is_finite()) {
        return (1.0, [0.0; 4]);
    }
    let ix1 = px1.max(g.x1);
    let iy1 = py1.max(g.y1);
    let ix2 = px2.min(g.x2);
    let iy2 = py2.min(g.y2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let area_p = pw * ph;
    let union = area_p + g.area() - inter;
    let iou = inter / union;
    // dL/dI = -(U + I)/U^2, dL/dAp = I/U^2
    let d_inter = -(union + inter) / (union * union);
    let d_area = inter / (union * union);
    let mut grad = [d_area * -ph, d_area * -pw, d_area * ph, d_area * pw];
    if overlap {
        if px1 > g.x1 {
            grad[0] += d_inter * -ih;
        }
        if py1 > g.y1 {
            grad[1] += d_inter * -iw;
        }
        if px2 < g.x2 {
            grad[2] += d_inter * ih;
        }
        if py2 < g.y2 {
            grad[3] += d_inter * iw;
        }
    }
    (1.0 - iou, grad)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Replays `held` for every subsequent [`Graph::hold`].
    pub fn replay(&mut self, held: HeldValues) {
        self.held.get_mut().replay = Some(held.values);
    }

    /// Values produced by [`Graph::hold`] so far.
    pub fn held(&self) -> HeldValues {
        HeldValues {
            values: self.held.borrow().record.clone(),
        }
    }

    /// Stop-gradient read: computes `f`, or in replay mode returns the value
    /// recorded at the same position.
    pub fn hold(&self, f: impl FnOnce() -> Vec<f64>) -> Vec<f64> {
        let mut tape = self.held.borrow_mut();
        let pos = tape.record.len();
        let v = match tape.replay.as_ref().and_then(|r| r.get(pos)) {
            Some(v) => v.clone(),
            None => f(),
        };
        tape.record.push(v.clone());
        v
    }

    /// [`Graph::hold`] for a list of boxes.
    pub fn hold_boxes(&self, f: impl FnOnce() -> Vec<BBox>) -> Vec<BBox> {
        self.hold(|| f().iter().flat_map(|b| [b.x1, b.y1, b.x2, b.y2]).collect())
            .chunks_exact(4)
            .map(|c| BBox::raw(c[0], c[1], c[2], c[3]))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor4) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- convolution family -------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = nn::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, &parents))
    }

    pub fn deform_conv2d(&mut self, x: Var, off: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = nn::deformable_conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            self.value(off),
            &spec,
        )?;
        let mut parents = vec![x, off, w];
        parents.extend(b);
        Ok(self.push(out, Op::DeformConv2d { x, off, w, b, spec }, &parents))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = nn::bilinear_upsample(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = nn::global_avg_pool(self.value(x));
        self.push(out, Op::GlobalAvgPool(x), &[x])
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (out, arg) = nn::global_max_pool_with_argmax(self.value(x));
        self.push(out, Op::GlobalMaxPool { x, arg }, &[x])
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let out = nn::channel_mean(self.value(x));
        self.push(out, Op::ChannelMean(x), &[x])
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let (out, arg) = nn::channel_max_with_argmax(self.value(x));
        self.push(out, Op::ChannelMax { x, arg }, &[x])
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape();
        let mut c_total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::invalid("concat_channels", format!("{s:?} incompatible with {first:?}")));
            }
            c_total += s[1];
        }
        let [n, _, h, w] = first;
        let mut out = Tensor4::zeros([n, c_total, h, w]);
        let plane = h * w;
        for b in 0..n {
            let mut c0 = 0;
            for &v in xs {
                let t = self.value(v);
                let len = t.channels() * plane;
                let dst = out.offset(b, c0, 0, 0);
                out.data_mut()[dst..dst + len].copy_from_slice(t.item(b));
                c0 += t.channels();
            }
        }
        Ok(self.push(out, Op::ConcatChannels(xs.to_vec()), xs))
    }

    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape();
        let mut n_total = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            let s = t.shape();
            if s[1..] != first[1..] {
                return Err(Error::invalid("concat_batch", format!("{s:?} incompatible with {first:?}")));
            }
            n_total += s[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor4::new([n_total, first[1], first[2], first[3]], data)?;
        Ok(self.push(out, Op::ConcatBatch(xs.to_vec()), xs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        if len == 0 || start + len > c {
            return Err(Error::invalid("slice_channels", format!("[{start}, {}) out of {c}", start + len)));
        }
        let mut out = Tensor4::zeros([n, len, h, w]);
        let plane = h * w;
        for b in 0..n {
            let src = t.offset(b, start, 0, 0);
            let dst = out.offset(b, 0, 0, 0);
            out.data_mut()[dst..dst + len * plane].copy_from_slice(&t.data()[src..src + len * plane]);
        }
        Ok(self.push(out, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Picks `(batch, channel_start, y, x)` locations, each yielding a row of
    /// `width` consecutive channels: output `(picks.len(), width, 1, 1)`.
    pub fn gather(&mut self, x: Var, picks: &[(usize, usize, usize, usize)], width: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        if picks.is_empty() {
            return Err(Error::invalid("gather", "empty pick list"));
        }
        let mut data = Vec::with_capacity(picks.len() * width);
        let mut flat = Vec::with_capacity(picks.len());
        for &(b, c0, y, xx) in picks {
            if b >= n || c0 + width > c || y >= h || xx >= w {
                return Err(Error::invalid("gather", format!("pick ({b}, {c0}, {y}, {xx}) out of {:?}", t.shape())));
            }
            for j in 0..width {
                data.push(t.at(b, c0 + j, y, xx));
            }
            flat.push([b, c0, y, xx]);
        }
        let out = Tensor4::new([picks.len(), width, 1, 1], data)?;
        Ok(self.push(out, Op::Gather { x, picks: flat }, &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let out = binary_map(self.value(a), self.value(b), shape, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("sub", self.value(a).shape(), self.value(b).shape())?;
        let out = binary_map(self.value(a), self.value(b), shape, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let out = binary_map(self.value(a), self.value(b), shape, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scaled(c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Softmax across the channel axis independently at every `(b, y, x)`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let plane = h * w;
        let mut out = t.clone();
        for b in 0..n {
            let item = out.item_mut(b);
            for p in 0..plane {
                let m = (0..c).map(|ch| item[ch * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (item[ch * plane + p] - m).exp();
                    item[ch * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    item[ch * plane + p] /= z;
                }
            }
        }
        self.push(out, Op::SoftmaxChannels(x), &[x])
    }

    // ---- dense ----------------------------------------------------------

    /// `y = x · wᵀ + b` with `x: (n, i, ..)` flattened per row and
    /// `w: (o, i, ..)`; output `(n, o, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, i) = row_view(xt);
        let (o, wi) = row_view(wt);
        if wi != i {
            return Err(Error::Shape {
                op: "linear",
                dim: "input features",
                expected: wi,
                got: i,
            });
        }
        let mut out = Tensor4::zeros([n, o, 1, 1]);
        gemm(n, i, o, 1.0, xt.data(), (i as isize, 1), wt.data(), (1, i as isize), 0.0, out.data_mut());
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != o {
                return Err(Error::Shape {
                    op: "linear",
                    dim: "bias length",
                    expected: o,
                    got: bt.len(),
                });
            }
            for r in 0..n {
                for (v, bv) in out.data_mut()[r * o..(r + 1) * o].iter_mut().zip(bt.data()) {
                    *v += bv;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (n, d) = row_view(t);
        let mut out = t.clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.push(out, Op::L2NormalizeRows { x, eps }, &[x])
    }

    pub fn roi_align(&mut self, levels: &[Var], strides: &[f64], rois: Vec<Roi>, spec: RoiAlignSpec) -> Result<Var> {
        let maps: Vec<&Tensor4> = levels.iter().map(|&v| self.value(v)).collect();
        let out = roi_align(&maps, strides, &rois, &spec)?;
        Ok(self.push(
            out,
            Op::RoiAlign {
                levels: levels.to_vec(),
                strides: strides.to_vec(),
                rois,
                spec,
            },
            levels,
        ))
    }

    // ---- boxes ----------------------------------------------------------

    /// Decodes `(k, 4)` deltas against fixed anchors into unclipped
    /// `(k, 4)` corner boxes.
    pub fn decode_boxes(&mut self, deltas: Var, anchors: Vec<BBox>, coder: BoxCoder) -> Result<Var> {
        let t = self.value(deltas);
        if t.batch() != anchors.len() || t.item_len() != 4 {
            return Err(Error::Shape {
                op: "decode_boxes",
                dim: "rows",
                expected: anchors.len(),
                got: t.batch(),
            });
        }
        let mut data = Vec::with_capacity(anchors.len() * 4);
        for (k, a) in anchors.iter().enumerate() {
            let d = t.row(k);
            data.extend(coder.decode(a, &[d[0], d[1], d[2], d[3]]).to_array());
        }
        let out = Tensor4::new([anchors.len(), 4, 1, 1], data)?;
        Ok(self.push(out, Op::DecodeBoxes { deltas, anchors, coder }, &[deltas]))
    }

    /// Mean of `1 − IoU(pred_k, gt_k)` over rows of a `(k, 4)` box tensor.
    pub fn iou_loss(&mut self, pred: Var, gts: Vec<BBox>) -> Result<Var> {
        let t = self.value(pred);
        if t.batch() != gts.len() || t.item_len() != 4 {
            return Err(Error::Shape {
                op: "iou_loss",
                dim: "rows",
                expected: gts.len(),
                got: t.batch(),
            });
        }
        let total: f64 = gts
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let r = t.row(k);
                iou_loss_parts([r[0], r[1], r[2], r[3]], g).0
            })
            .sum();
        let out = Tensor4::scalar(total / gts.len() as f64);
        Ok(self.push(out, Op::IouLoss { pred, gts }, &[pred]))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean over `rows` of `−log softmax(logits[row] | support)[target]`.
    /// Columns outside `support` are excluded from the normalizer and get
    /// no gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        support: Vec<bool>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (n, j) = row_view(t);
        if support.len() != j {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                dim: "support mask",
                expected: j,
                got: support.len(),
            });
        }
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(Error::invalid("softmax_cross_entropy", "rows/targets must be equal-length and non-empty"));
        }
        let mut total = 0.0;
        for (&r, &tgt) in rows.iter().zip(&targets) {
            if r >= n || tgt >= j || !support[tgt] {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("row {r} target {tgt} outside the active support"),
                ));
            }
            let row = t.row(r);
            let m = row.iter().zip(&support).filter(|(_, &s)| s).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().zip(&support).filter(|(_, &s)| s).map(|(v, _)| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[tgt];
        }
        let out = Tensor4::scalar(total / rows.len() as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                rows,
                targets,
                support,
            },
            &[logits],
        ))
    }

    /// Mean of `|x[row, col]|` over the selected rows × cols.
    pub fn mean_abs(&mut self, x: Var, rows: Vec<usize>, cols: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (n, j) = row_view(t);
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::invalid("mean_abs", "empty selection"));
        }
        if rows.iter().any(|&r| r >= n) || cols.iter().any(|&c| c >= j) {
            return Err(Error::invalid("mean_abs", "selection out of range"));
        }
        let mut total = 0.0;
        for &r in &rows {
            let row = t.row(r);
            total += cols.iter().map(|&c| row[c].abs()).sum::<f64>();
        }
        let out = Tensor4::scalar(total / (rows.len() * cols.len()) as f64);
        Ok(self.push(out, Op::MeanAbs { x, rows, cols }, &[x]))
    }

    /// Mean binary cross-entropy of single-column logits at `rows`.
    pub fn bce_with_logits(&mut self, x: Var, rows: Vec<usize>, targets: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if rows.is_empty() || rows.len() != targets.len() {
            return Err(Error::invalid("bce_with_logits", "rows/targets must be equal-length and non-empty"));
        }
        if t.item_len() != 1 || rows.iter().any(|&r| r >= t.batch()) {
            return Err(Error::invalid("bce_with_logits", "expects (k, 1) logits and in-range rows"));
        }
        let total: f64 = rows
            .iter()
            .zip(&targets)
            .map(|(&r, &y)| {
                let z = t.data()[r];
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let out = Tensor4::scalar(total / rows.len() as f64);
        Ok(self.push(out, Op::BceWithLogits { x, rows, targets }, &[x]))
    }

    /// Mean over `rows` of the smooth-L1 distance (summed over 4 coords).
    pub fn smooth_l1(&mut self, x: Var, rows: Vec<usize>, targets: Vec<[f64; 4]>, beta: f64) -> Result<Var> {
        let t = self.value(x);
        if rows.is_empty() || rows.len() != targets.len() || t.item_len() != 4 {
            return Err(Error::invalid("smooth_l1", "expects (k, 4) input and equal-length rows/targets"));
        }
        let mut total = 0.0;
        for (&r, tg) in rows.iter().zip(&targets) {
            for (v, g) in t.row(r).iter().zip(tg) {
                let d = (v - g).abs();
                total += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
            }
        }
        let out = Tensor4::scalar(total / rows.len() as f64);
        Ok(self.push(out, Op::SmoothL1 { x, rows, targets, beta }, &[x]))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum_squares());
        self.push(out, Op::SumSquares(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// `Σ cᵢ · xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, c)| c * self.scalar(v)).sum();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor4::scalar(total), Op::WeightedSum(terms.to_vec()), &parents)
    }

    /// `⟨x, w⟩` for a constant `w` of the same shape.
    pub fn dot_const(&mut self, x: Var, w: Tensor4) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != w.shape() {
            return Err(Error::invalid("dot_const", format!("{:?} vs {:?}", t.shape(), w.shape())));
        }
        let v = t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor4::scalar(v), Op::DotConst { x, w }, &[x]))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor4::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4>], v: Var, g: Tensor4) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor4, grads: &mut [Option<Tensor4>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let cg = nn::conv2d_backward(self.value(*x), self.value(*w), spec, g, want);
                if let Some(t) = cg.input {
                    self.accumulate(grads, *x, t);
                }
                if let Some(t) = cg.weight {
                    self.accumulate(grads, *w, t);
                }
                if let (Some(b), Some(t)) = (b, cg.bias) {
                    let shape = self.value(*b).shape();
                    self.accumulate(grads, *b, t.reshape(shape).expect("bias shape"));
                }
            }
            Op::DeformConv2d { x, off, w, b, spec } => {
                let want = (
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                    self.wants(*off),
                );
                let (cg, goff) =
                    nn::deformable_conv2d_backward(self.value(*x), self.value(*w), self.value(*off), spec, g, want);
                if let Some(t) = cg.input {
                    self.accumulate(grads, *x, t);
                }
                if let Some(t) = cg.weight {
                    self.accumulate(grads, *w, t);
                }
                if let (Some(b), Some(t)) = (b, cg.bias) {
                    let shape = self.value(*b).shape();
                    self.accumulate(grads, *b, t.reshape(shape).expect("bias shape"));
                }
                if let Some(t) = goff {
                    self.accumulate(grads, *off, t);
                }
            }
            Op::Upsample { x, factor } => {
                let gi = nn::bilinear_upsample_backward(self.value(*x).shape(), *factor, g);
                self.accumulate(grads, *x, gi);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let hw = (xs[2] * xs[3]) as f64;
                let gi = Tensor4::from_fn(xs, |b, c, _, _| g.at(b, c, 0, 0) / hw);
                self.accumulate(grads, *x, gi);
            }
            Op::GlobalMaxPool { x, arg } => {
                let xs = self.value(*x).shape();
                let mut gi = Tensor4::zeros(xs);
                let plane = xs[2] * xs[3];
                for (k, &a) in arg.iter().enumerate() {
                    gi.data_mut()[k * plane + a] += g.data()[k];
                }
                self.accumulate(grads, *x, gi);
            }
            Op::ChannelMean(x) => {
                let xs = self.value(*x).shape();
                let c = xs[1] as f64;
                let gi = Tensor4::from_fn(xs, |b, _, y, xx| g.at(b, 0, y, xx) / c);
                self.accumulate(grads, *x, gi);
            }
            Op::ChannelMax { x, arg } => {
                let xs = self.value(*x).shape();
                let [n, _, h, w] = xs;
                let mut gi = Tensor4::zeros(xs);
                for b in 0..n {
                    for p in 0..h * w {
                        let k = b * h * w + p;
                        let i = gi.offset(b, arg[k], 0, 0) + p;
                        gi.data_mut()[i] += g.data()[k];
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::ConcatChannels(xs) => {
                let [n, _, h, w] = g.shape();
                let plane = h * w;
                let mut c0 = 0;
                for &v in xs {
                    let c = self.value(v).channels();
                    if self.wants(v) {
                        let mut gi = Tensor4::zeros([n, c, h, w]);
                        for b in 0..n {
                            let src = g.offset(b, c0, 0, 0);
                            gi.item_mut(b).copy_from_slice(&g.data()[src..src + c * plane]);
                        }
                        self.accumulate(grads, v, gi);
                    }
                    c0 += c;
                }
            }
            Op::ConcatBatch(xs) => {
                let mut start = 0;
                for &v in xs {
                    let s = self.value(v).shape();
                    let len: usize = s.iter().product();
                    if self.wants(v) {
                        let gi = Tensor4::new(s, g.data()[start..start + len].to_vec()).expect("concat slice");
                        self.accumulate(grads, v, gi);
                    }
                    start += len;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = self.value(*x).shape();
                let [n, len, h, w] = g.shape();
                let mut gi = Tensor4::zeros(xs);
                for b in 0..n {
                    let dst = gi.offset(b, *start, 0, 0);
                    gi.data_mut()[dst..dst + len * h * w].copy_from_slice(g.item(b));
                }
                self.accumulate(grads, *x, gi);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, self.value(*a).shape()));
                self.accumulate(grads, *b, reduce_to(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, self.value(*a).shape()));
                self.accumulate(grads, *b, reduce_to(&g.scaled(-1.0), self.value(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = binary_map(g, bv, g.shape(), |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(&ga, av.shape()));
                }
                if self.wants(*b) {
                    let gb = binary_map(g, av, g.shape(), |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(&gb, bv.shape()));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scaled(*c)),
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gi = binary_map(g, y, g.shape(), |gv, s| gv * s * (1.0 - s));
                self.accumulate(grads, *x, gi);
            }
            Op::Relu(x) => {
                let gi = binary_map(g, self.value(*x), g.shape(), |gv, v| if v > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, gi);
            }
            Op::SoftmaxChannels(x) => {
                let y = &node.value;
                let [n, c, h, w] = y.shape();
                let plane = h * w;
                let mut gi = Tensor4::zeros(y.shape());
                for b in 0..n {
                    let (yi, gg) = (y.item(b), g.item(b));
                    let dst = gi.item_mut(b);
                    for p in 0..plane {
                        let dot: f64 = (0..c).map(|ch| yi[ch * plane + p] * gg[ch * plane + p]).sum();
                        for ch in 0..c {
                            let k = ch * plane + p;
                            dst[k] = yi[k] * (gg[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, i) = row_view(xt);
                let o = wt.batch();
                if self.wants(*x) {
                    let mut gx = Tensor4::zeros(xt.shape());
                    gemm(n, o, i, 1.0, g.data(), (o as isize, 1), wt.data(), (i as isize, 1), 0.0, gx.data_mut());
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = Tensor4::zeros(wt.shape());
                    gemm(o, n, i, 1.0, g.data(), (1, o as isize), xt.data(), (i as isize, 1), 0.0, gw.data_mut());
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = Tensor4::zeros(self.value(*b).shape());
                        for r in 0..n {
                            for (d, s) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *d += s;
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Reshape(x) => {
                let gi = g.clone().reshape(self.value(*x).shape()).expect("reshape grad");
                self.accumulate(grads, *x, gi);
            }
            Op::L2NormalizeRows { x, eps } => {
                let xt = self.value(*x);
                let y = &node.value;
                let (n, d) = row_view(xt);
                let mut gi = Tensor4::zeros(xt.shape());
                for r in 0..n {
                    let xr = xt.row(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dst = &mut gi.data_mut()[r * d..(r + 1) * d];
                    if norm > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            dst[k] = (gr[k] - yr[k] * dot) / norm;
                        }
                    } else {
                        for k in 0..d {
                            dst[k] = gr[k] / eps;
                        }
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::RoiAlign {
                levels,
                strides,
                rois,
                spec,
            } => {
                let shapes: Vec<[usize; 4]> = levels.iter().map(|&v| self.value(v).shape()).collect();
                let gs = roi_align_backward(&shapes, strides, rois, spec, g);
                for (&v, gl) in levels.iter().zip(gs) {
                    self.accumulate(grads, v, gl);
                }
            }
            Op::Gather { x, picks } => {
                let mut gi = Tensor4::zeros(self.value(*x).shape());
                let width = g.item_len();
                for (k, &[b, c0, y, xx]) in picks.iter().enumerate() {
                    for j in 0..width {
                        let i = gi.offset(b, c0 + j, y, xx);
                        gi.data_mut()[i] += g.data()[k * width + j];
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::DecodeBoxes { deltas, anchors, coder } => {
                let dt = self.value(*deltas);
                let out = &node.value;
                let mut gi = Tensor4::zeros(dt.shape());
                let [wx, wy, ww, wh] = coder.weights;
                for (k, a) in anchors.iter().enumerate() {
                    let d = dt.row(k);
                    let o = out.row(k);
                    let go = g.row(k);
                    let (bw, bh) = (o[2] - o[0], o[3] - o[1]);
                    let dst = &mut gi.data_mut()[k * 4..k * 4 + 4];
                    // x1 = cx - w/2, x2 = cx + w/2
                    dst[0] = (go[0] + go[2]) * a.width() / wx;
                    dst[1] = (go[1] + go[3]) * a.height() / wy;
                    if d[2] / ww < coder.max_log_scale {
                        dst[2] = (go[2] - go[0]) * 0.5 * bw / ww;
                    }
                    if d[3] / wh < coder.max_log_scale {
                        dst[3] = (go[3] - go[1]) * 0.5 * bh / wh;
                    }
                }
                self.accumulate(grads, *deltas, gi);
            }
            Op::IouLoss { pred, gts } => {
                let pt = self.value(*pred);
                let scale = g.data()[0] / gts.len() as f64;
                let mut gi = Tensor4::zeros(pt.shape());
                for (k, gt) in gts.iter().enumerate() {
                    let r = pt.row(k);
                    let (_, gr) = iou_loss_parts([r[0], r[1], r[2], r[3]], gt);
                    for j in 0..4 {
                        gi.data_mut()[k * 4 + j] = scale * gr[j];
                    }
                }
                self.accumulate(grads, *pred, gi);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                rows,
                targets,
                support,
            } => {
                let lt = self.value(*logits);
                let (_, j) = row_view(lt);
                let scale = g.data()[0] / rows.len() as f64;
                let mut gi = Tensor4::zeros(lt.shape());
                for (&r, &tgt) in rows.iter().zip(targets) {
                    let row = lt.row(r);
                    let m = row.iter().zip(support).filter(|(_, &s)| s).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().zip(support).filter(|(_, &s)| s).map(|(v, _)| (v - m).exp()).sum();
                    let dst = &mut gi.data_mut()[r * j..(r + 1) * j];
                    for c in 0..j {
                        if support[c] {
                            let p = (row[c] - m).exp() / z;
                            dst[c] += scale * (p - if c == tgt { 1.0 } else { 0.0 });
                        }
                    }
                }
                self.accumulate(grads, *logits, gi);
            }
            Op::MeanAbs { x, rows, cols } => {
                let xt = self.value(*x);
                let (_, j) = row_view(xt);
                let scale = g.data()[0] / (rows.len() * cols.len()) as f64;
                let mut gi = Tensor4::zeros(xt.shape());
                for &r in rows {
                    for &c in cols {
                        let v = xt.data()[r * j + c];
                        let s = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gi.data_mut()[r * j + c] += scale * s;
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::BceWithLogits { x, rows, targets } => {
                let xt = self.value(*x);
                let scale = g.data()[0] / rows.len() as f64;
                let mut gi = Tensor4::zeros(xt.shape());
                for (&r, &y) in rows.iter().zip(targets) {
                    gi.data_mut()[r] += scale * (sigmoid(xt.data()[r]) - y);
                }
                self.accumulate(grads, *x, gi);
            }
            Op::SmoothL1 { x, rows, targets, beta } => {
                let xt = self.value(*x);
                let scale = g.data()[0] / rows.len() as f64;
                let mut gi = Tensor4::zeros(xt.shape());
                for (&r, tg) in rows.iter().zip(targets) {
                    for c in 0..4 {
                        let d = xt.data()[r * 4 + c] - tg[c];
                        let s = if d.abs() < *beta { d / beta } else { d.signum() };
                        gi.data_mut()[r * 4 + c] += scale * s;
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::SumSquares(x) => {
                let gi = self.value(*x).scaled(2.0 * g.data()[0]);
                self.accumulate(grads, *x, gi);
            }
            Op::Sum(x) => {
                let gi = Tensor4::full(self.value(*x).shape(), g.data()[0]);
                self.accumulate(grads, *x, gi);
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, Tensor4::scalar(c * g.data()[0]));
                }
            }
            Op::DotConst { x, w } => {
                let gi = w.scaled(g.data()[0]);
                self.accumulate(grads, *x, gi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::random_tensor;

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor4::full([1, 1, 2, 2], 2.0));
        let b = g.param(Tensor4::full([1, 1, 2, 2], 3.0));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param(random_tensor([2, 3, 4, 4], 1));
        let m = g.param(random_tensor([2, 3, 1, 1], 2));
        let y = g.mul(x, m).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s);
        let gm = grads.get(m).unwrap();
        assert_eq!(gm.shape(), [2, 3, 1, 1]);
        let xv = g.value(x);
        let expected: f64 = xv.plane(1, 2).iter().sum();
        assert!((gm.at(1, 2, 0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn softmax_channels_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(random_tensor([2, 3, 5, 4], 9).scaled(10.0));
        let y = g.softmax_channels(x);
        let t = g.value(y);
        for b in 0..2 {
            for yy in 0..5 {
                for xx in 0..4 {
                    let s: f64 = (0..3).map(|c| t.at(b, c, yy, xx)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn iou_loss_hand_value() {
        let mut g = Graph::new();
        let p = g.param(Tensor4::new([1, 4, 1, 1], vec![0.0, 0.0, 2.0, 2.0]).unwrap());
        let l = g.iou_loss(p, vec![BBox::raw(1.0, 0.0, 3.0, 2.0)]).unwrap();
        assert!((g.scalar(l) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_prediction_has_unit_loss_and_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor4::new([1, 4, 1, 1], vec![1.0, 1.0, 1.0, 3.0]).unwrap());
        let l = g.iou_loss(p, vec![BBox::raw(0.0, 0.0, 2.0, 2.0)]).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let grads = g.backward(l);
        assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_columns_receive_no_cross_entropy_gradient() {
        let mut g = Graph::new();
        let l = g.param(random_tensor([3, 4, 1, 1], 4));
        let ce = g
            .softmax_cross_entropy(l, vec![0, 1, 2], vec![0, 1, 0], vec![true, true, false, false])
            .unwrap();
        let grads = g.backward(ce);
        let gl = grads.get(l).unwrap();
        for r in 0..3 {
            assert_eq!(gl.row(r)[2], 0.0);
            assert_eq!(gl.row(r)[3], 0.0);
        }
    }

    #[test]
    fn cross_entropy_rejects_target_outside_support() {
        let mut g = Graph::new();
        let l = g.param(Tensor4::zeros([1, 3, 1, 1]));
        assert!(g.softmax_cross_entropy(l, vec![0], vec![2], vec![true, true, false]).is_err());
    }
}
