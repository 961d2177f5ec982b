//! Multi-stage region proposal head.
//!
//! Every pyramid level runs the same weights. Stages `1..N−1` apply a
//! dilated 3×3 convolution (ReLU) and a 1×1 delta head; the final stage
//! applies a deformable 3×3 convolution whose offsets come from a
//! zero-initialised 3×3 convolution, followed by sibling 1×1 delta and
//! objectness heads. A box reads its deltas at the feature cell containing
//! its centre, in the channel block of its anchor slot, and each stage
//! decodes relative to the previous stage's (detached, clipped) boxes.
//!
//! The training objective is `λ · Σ_τ α^τ · L_reg^τ + L_cls` with
//! `L_reg^τ = mean(1 − IoU)` over the stage's positives and `L_cls` the
//! objectness cross-entropy of the final stage.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, BoxCoder};
use crate::cfpan::Pyramid;
use crate::error::{Error, Result};
use crate::evaluation::nms;
use crate::graph::{Graph, Var};
use crate::nn::{init, ConvSpec};
use crate::params::{Binding, Group, ParamId, ParamStore};
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Feature stride of each level, finest first.
    pub strides: Vec<f64>,
    /// Anchor side lengths (pixels) per level.
    pub scales: Vec<Vec<f64>>,
    /// Aspect ratios `h / w`; every ratio preserves the scale's area.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            strides: vec![4.0, 8.0, 16.0, 32.0],
            scales: vec![vec![12.0], vec![24.0], vec![48.0], vec![96.0]],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    /// Anchors per feature cell (identical on every level).
    pub fn per_cell(&self) -> usize {
        self.scales.first().map_or(0, Vec::len) * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.len() != 4 || self.scales.len() != 4 {
            return Err(Error::Config("anchors: exactly four levels of strides and scales required".into()));
        }
        if self.ratios.is_empty() || self.scales.iter().any(Vec::is_empty) {
            return Err(Error::Config("anchors: scales and ratios must be non-empty".into()));
        }
        if self.scales.iter().any(|s| s.len() != self.scales[0].len()) {
            return Err(Error::Config("anchors: every level needs the same number of scales".into()));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.strides.iter().all(positive) || !self.ratios.iter().all(positive) || !self.scales.iter().flatten().all(positive) {
            return Err(Error::Config("anchors: strides, scales and ratios must be positive".into()));
        }
        Ok(())
    }
}

/// Anchors of one level in row-major cell order, scale-major within a cell.
pub fn generate_anchors(cfg: &AnchorConfig, level: usize, feature_hw: (usize, usize)) -> Result<Vec<BBox>> {
    let scales = cfg
        .scales
        .get(level)
        .ok_or_else(|| Error::invalid("generate_anchors", format!("no scales for level index {level}")))?;
    if scales.is_empty() || cfg.ratios.is_empty() {
        return Err(Error::invalid("generate_anchors", "scales and ratios must be non-empty"));
    }
    let stride = cfg.strides[level];
    let (h, w) = feature_hw;
    let mut out = Vec::with_capacity(h * w * scales.len() * cfg.ratios.len());
    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = (stride * (j as f64 + 0.5), stride * (i as f64 + 0.5));
            for &s in scales {
                for &r in &cfg.ratios {
                    out.push(BBox::from_center(cx, cy, s / r.sqrt(), s * r.sqrt()));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MrrpnConfig {
    /// Number of refinement stages `N` (the last one is deformable).
    pub stages: usize,
    /// Dilation rate of each of the first `N − 1` stages.
    pub dilations: Vec<usize>,
    /// Regression weight `α^τ` of each stage.
    pub alphas: Vec<f64>,
    pub lambda: f64,
    /// Positive IoU threshold of each stage; negatives fall below it by
    /// [`NEGATIVE_MARGIN`].
    pub iou_thresholds: Vec<f64>,
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_threshold: f64,
    /// Objectness samples per image and their maximum positive share.
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    pub anchors: AnchorConfig,
}

pub const NEGATIVE_MARGIN: f64 = 0.2;

impl Default for MrrpnConfig {
    fn default() -> Self {
        Self::with_stages(3)
    }
}

impl MrrpnConfig {
    /// Defaults for `n` stages: rate-2 dilations, `α = 7.0`, thresholds
    /// `0.5, 0.6, 0.7, 0.7, …`.
    pub fn with_stages(n: usize) -> Self {
        Self {
            stages: n,
            dilations: vec![2; n.saturating_sub(1)],
            alphas: vec![7.0; n],
            lambda: 1.4,
            iou_thresholds: (0..n).map(|t| (0.5 + 0.1 * t as f64).min(0.7)).collect(),
            pre_nms: 1000,
            post_nms: 100,
            nms_threshold: 0.7,
            batch_per_image: 256,
            positive_fraction: 0.5,
            anchors: AnchorConfig::default(),
        }
    }

    /// Same settings with the stage count changed and the per-stage lists
    /// rebuilt at their defaults.
    pub fn restaged(&self, n: usize) -> Self {
        let d = Self::with_stages(n);
        Self {
            stages: n,
            dilations: d.dilations,
            alphas: vec![self.alphas.first().copied().unwrap_or(7.0); n],
            iou_thresholds: d.iou_thresholds,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages;
        if n == 0 {
            return Err(Error::Config("mrrpn.stages must be at least 1".into()));
        }
        if self.dilations.len() != n - 1 || self.alphas.len() != n || self.iou_thresholds.len() != n {
            return Err(Error::Config(format!(
                "mrrpn: {n} stages need {} dilations and {n} alphas and thresholds",
                n - 1
            )));
        }
        if self.dilations.contains(&0) {
            return Err(Error::Config("mrrpn.dilations must be >= 1".into()));
        }
        if !self.alphas.iter().all(|a| *a > 0.0 && a.is_finite()) || !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("mrrpn: alphas and lambda must be positive".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[1] < w[0])
            || !self.iou_thresholds.iter().all(|t| (0.0..=1.0).contains(t))
        {
            return Err(Error::Config("mrrpn.iou_thresholds must lie in [0, 1] and be nondecreasing".into()));
        }
        if !(0.0..1.0).contains(&self.nms_threshold) || self.nms_threshold == 0.0 {
            return Err(Error::Config("mrrpn.nms_threshold must lie in (0, 1)".into()));
        }
        if self.post_nms == 0 || self.pre_nms == 0 || self.batch_per_image == 0 {
            return Err(Error::Config("mrrpn: proposal and sample counts must be positive".into()));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(Error::Config("mrrpn.positive_fraction must lie in (0, 1]".into()));
        }
        self.anchors.validate()
    }
}

/// `λ · Σ_τ α^τ · L_reg^τ + L_cls`.
pub fn mrrpn_loss(stage_reg_losses: &[f64], cls_loss: f64, cfg: &MrrpnConfig) -> Result<f64> {
    if stage_reg_losses.len() != cfg.alphas.len() {
        return Err(Error::Shape {
            op: "mrrpn_loss",
            dim: "stage count",
            expected: cfg.alphas.len(),
            got: stage_reg_losses.len(),
        });
    }
    let reg: f64 = stage_reg_losses.iter().zip(&cfg.alphas).map(|(l, a)| a * l).sum();
    Ok(cfg.lambda * reg + cls_loss)
}

/// Tape version of [`mrrpn_loss`] over scalar nodes.
pub fn mrrpn_loss_var(g: &mut Graph, stage_reg: &[Var], cls: Var, cfg: &MrrpnConfig) -> Result<Var> {
    if stage_reg.len() != cfg.alphas.len() {
        return Err(Error::Shape {
            op: "mrrpn_loss",
            dim: "stage count",
            expected: cfg.alphas.len(),
            got: stage_reg.len(),
        });
    }
    let mut terms: Vec<(Var, f64)> = stage_reg.iter().zip(&cfg.alphas).map(|(&v, a)| (v, cfg.lambda * a)).collect();
    terms.push((cls, 1.0));
    Ok(g.weighted_sum(&terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    /// Matched ground-truth index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Labels `boxes` against `gts`: positive at IoU ≥ `threshold` or when the
/// box attains a ground truth's best (non-zero) IoU; negative below
/// `threshold − 0.2`; ignore otherwise. Negatives overlapping an `ignore`
/// region by at least that margin become ignore.
pub fn assign_labels(boxes: &[BBox], gts: &[BBox], ignore: &[BBox], threshold: f64) -> Vec<Label> {
    let neg = threshold - NEGATIVE_MARGIN;
    let mut best_for_gt = vec![0.0f64; gts.len()];
    let ious: Vec<Vec<f64>> = boxes
        .iter()
        .map(|b| {
            let row: Vec<f64> = gts.iter().map(|g| b.iou(g)).collect();
            for (j, &v) in row.iter().enumerate() {
                best_for_gt[j] = best_for_gt[j].max(v);
            }
            row
        })
        .collect();
    ious.iter()
        .zip(boxes)
        .map(|(row, b)| {
            let (mut arg, mut max) = (None, 0.0);
            for (j, &v) in row.iter().enumerate() {
                if arg.is_none() || v > max {
                    arg = Some(j);
                    max = v;
                }
            }
            let Some(arg) = arg else {
                return if ignore.iter().any(|r| b.iou(r) >= neg) {
                    Label::Ignore
                } else {
                    Label::Negative
                };
            };
            if max >= threshold {
                return Label::Positive(arg);
            }
            if let Some(j) = (0..gts.len()).find(|&j| best_for_gt[j] > 0.0 && row[j] == best_for_gt[j]) {
                return Label::Positive(j);
            }
            if max < neg && !ignore.iter().any(|r| b.iou(r) >= neg) {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect()
}

/// [`assign_labels`] at the threshold of stage `stage_idx` (1-based).
pub fn assign_targets(boxes: &[BBox], gts: &[BBox], stage_idx: usize, cfg: &MrrpnConfig) -> Result<Vec<Label>> {
    let thr = stage_idx
        .checked_sub(1)
        .and_then(|i| cfg.iou_thresholds.get(i))
        .ok_or_else(|| Error::invalid("assign_targets", format!("stage {stage_idx} outside 1..={}", cfg.stages)))?;
    Ok(assign_labels(boxes, gts, &[], *thr))
}

/// A box tracked through the stages. Its outputs are always read at the
/// anchor's own cell and slot, whatever the current box position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotBox {
    pub image: usize,
    pub slot: usize,
    /// Anchor cell `(y, x)`.
    pub cell: (usize, usize),
    pub bbox: BBox,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub features: Var,
    /// `(N, 4A, H, W)` delta map.
    pub deltas: Var,
    /// `(N, A, H, W)` objectness logits (final stage only).
    pub objectness: Option<Var>,
    /// Refined, clipped boxes (one per input box).
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

/// Ground truth for one image.
#[derive(Clone, Debug, Default)]
pub struct RpnTargets {
    pub gts: Vec<BBox>,
    /// Regions excluded from negative sampling.
    pub ignore: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub level: usize,
    /// Box at the input of every stage, then the final box.
    pub trace: Vec<BBox>,
}

#[derive(Clone, Debug)]
pub struct RpnLoss {
    pub total: Var,
    pub stage_reg: Vec<Var>,
    pub cls: Var,
    pub positives: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub proposals: Vec<Vec<Proposal>>,
    pub loss: Option<RpnLoss>,
}

#[derive(Clone, Debug)]
pub struct Mrrpn {
    pub config: MrrpnConfig,
    width: usize,
    coder: BoxCoder,
    stage_convs: Vec<ConvIds>,
    stage_deltas: Vec<ConvIds>,
    offsets: ConvIds,
    deform: ConvIds,
    final_delta: ConvIds,
    objectness: ConvIds,
}

fn add_conv<R: Rng>(store: &mut ParamStore, name: &str, shape: [usize; 4], std: Option<f64>, rng: &mut R) -> ConvIds {
    let w = match std {
        Some(0.0) => Tensor4::zeros(shape),
        Some(s) => init::normal(shape, s, rng),
        None => init::kaiming(shape, rng),
    };
    ConvIds {
        w: store.add(format!("{name}.weight"), Group::Rpn, w),
        b: store.add(format!("{name}.bias"), Group::Rpn, Tensor4::zeros([1, shape[0], 1, 1])),
    }
}

impl Mrrpn {
    pub fn new<R: Rng>(config: MrrpnConfig, width: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let a = config.anchors.per_cell();
        let d = width;
        let mut stage_convs = Vec::new();
        let mut stage_deltas = Vec::new();
        for t in 1..config.stages {
            stage_convs.push(add_conv(store, &format!("rpn.stage{t}.conv"), [d, d, 3, 3], None, rng));
            stage_deltas.push(add_conv(store, &format!("rpn.stage{t}.delta"), [4 * a, d, 1, 1], Some(0.01), rng));
        }
        let n = config.stages;
        let offsets = add_conv(store, &format!("rpn.stage{n}.offset"), [18, d, 3, 3], Some(0.0), rng);
        let deform = add_conv(store, &format!("rpn.stage{n}.deform"), [d, d, 3, 3], None, rng);
        let final_delta = add_conv(store, &format!("rpn.stage{n}.delta"), [4 * a, d, 1, 1], Some(0.01), rng);
        let objectness = add_conv(store, &format!("rpn.stage{n}.objectness"), [a, d, 1, 1], Some(0.01), rng);
        Ok(Self {
            config,
            width,
            coder: BoxCoder::unit(),
            stage_convs,
            stage_deltas,
            offsets,
            deform,
            final_delta,
            objectness,
        })
    }

    pub fn coder(&self) -> &BoxCoder {
        &self.coder
    }

    /// Parameter ids of the delta heads of stages `1..=N`.
    pub fn delta_head_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.stage_deltas
            .iter()
            .chain(std::iter::once(&self.final_delta))
            .map(|c| (c.w, c.b))
            .collect()
    }

    pub fn objectness_ids(&self) -> (ParamId, ParamId) {
        (self.objectness.w, self.objectness.b)
    }

    pub fn offset_ids(&self) -> (ParamId, ParamId) {
        (self.offsets.w, self.offsets.b)
    }

    fn propagate(&self, g: &Graph, deltas: Var, boxes: &[SlotBox], image_hw: (f64, f64)) -> Vec<BBox> {
        let t = g.value(deltas);
        g.hold_boxes(|| {
            boxes
                .iter()
                .map(|sb| {
                    let (y, x) = sb.cell;
                    let c0 = 4 * sb.slot;
                    let d = [t.at(sb.image, c0, y, x), t.at(sb.image, c0 + 1, y, x), t.at(sb.image, c0 + 2, y, x), t.at(sb.image, c0 + 3, y, x)];
                    self.coder.decode(&sb.bbox, &d).clip(image_hw.1, image_hw.0)
                })
                .collect()
        })
    }

    /// One dilated stage (`1 ≤ stage_idx ≤ N − 1`) on `features` of a level
    /// with the given stride.
    #[allow(clippy::too_many_arguments)]
    pub fn refine_stage(
        &self,
        g: &mut Graph,
        b: &Binding,
        features: Var,
        boxes: &[SlotBox],
        image_hw: (f64, f64),
        stage_idx: usize,
    ) -> Result<StageOutput> {
        if stage_idx == 0 || stage_idx >= self.config.stages {
            return Err(Error::invalid(
                "refine_stage",
                format!("stage {stage_idx} outside 1..={}", self.config.stages - 1),
            ));
        }
        let d = self.width;
        let conv = self.stage_convs[stage_idx - 1];
        let spec = ConvSpec::same(d, d, 3, self.config.dilations[stage_idx - 1]);
        let f = g.conv2d(features, b[conv.w], Some(b[conv.b]), spec)?;
        let f = g.relu(f);
        let head = self.stage_deltas[stage_idx - 1];
        let deltas = g.conv2d(f, b[head.w], Some(b[head.b]), ConvSpec::same(d, 4 * self.config.anchors.per_cell(), 1, 1))?;
        let boxes = self.propagate(g, deltas, boxes, image_hw);
        Ok(StageOutput {
            features: f,
            deltas,
            objectness: None,
            boxes,
        })
    }

    /// The deformable final stage with delta and objectness heads.
    pub fn final_stage(
        &self,
        g: &mut Graph,
        b: &Binding,
        features: Var,
        boxes: &[SlotBox],
        image_hw: (f64, f64),
    ) -> Result<StageOutput> {
        let d = self.width;
        let a = self.config.anchors.per_cell();
        let off = g.conv2d(features, b[self.offsets.w], Some(b[self.offsets.b]), ConvSpec::same(d, 18, 3, 1))?;
        let f = g.deform_conv2d(features, off, b[self.deform.w], Some(b[self.deform.b]), ConvSpec::same(d, d, 3, 1))?;
        let f = g.relu(f);
        let deltas = g.conv2d(f, b[self.final_delta.w], Some(b[self.final_delta.b]), ConvSpec::same(d, 4 * a, 1, 1))?;
        let obj = g.conv2d(f, b[self.objectness.w], Some(b[self.objectness.b]), ConvSpec::same(d, a, 1, 1))?;
        let boxes = self.propagate(g, deltas, boxes, image_hw);
        Ok(StageOutput {
            features: f,
            deltas,
            objectness: Some(obj),
            boxes,
        })
    }

    /// Runs every stage on every level. With `targets`, also builds the
    /// training loss, sampling objectness examples with `rng`.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        b: &Binding,
        pyramid: &Pyramid,
        image_hw: (usize, usize),
        targets: Option<&[RpnTargets]>,
        rng: &mut R,
    ) -> Result<RpnOutput> {
        let cfg = &self.config;
        let n_stages = cfg.stages;
        let batch = g.value(pyramid.levels[0]).batch();
        if let Some(t) = targets {
            if t.len() != batch {
                return Err(Error::Shape {
                    op: "mrrpn_forward",
                    dim: "targets",
                    expected: batch,
                    got: t.len(),
                });
            }
        }
        let img = (image_hw.0 as f64, image_hw.1 as f64);
        let a = cfg.anchors.per_cell();

        // per level: boxes at each stage input + final, and the stage outputs
        struct LevelRun {
            level: usize,
            boxes: Vec<Vec<SlotBox>>,
            deltas: Vec<Var>,
            objectness: Var,
        }
        let mut runs = Vec::with_capacity(4);
        for (li, &p) in pyramid.levels.iter().enumerate() {
            let (h, w) = (g.value(p).height(), g.value(p).width());
            let anchors = generate_anchors(&cfg.anchors, li, (h, w))?;
            let mut current: Vec<SlotBox> = (0..batch)
                .flat_map(|im| {
                    anchors.iter().enumerate().map(move |(k, &bbox)| SlotBox {
                        image: im,
                        slot: k % a,
                        cell: ((k / a) / w, (k / a) % w),
                        bbox,
                    })
                })
                .collect();
            let mut boxes = Vec::with_capacity(n_stages + 1);
            let mut deltas = Vec::with_capacity(n_stages);
            let mut features = p;
            for t in 1..n_stages {
                let out = self.refine_stage(g, b, features, &current, img, t)?;
                features = out.features;
                deltas.push(out.deltas);
                let next: Vec<SlotBox> =
                    current.iter().zip(&out.boxes).map(|(sb, &bbox)| SlotBox { bbox, ..*sb }).collect();
                boxes.push(std::mem::replace(&mut current, next));
            }
            let out = self.final_stage(g, b, features, &current, img)?;
            deltas.push(out.deltas);
            let fin: Vec<SlotBox> = current.iter().zip(&out.boxes).map(|(sb, &bbox)| SlotBox { bbox, ..*sb }).collect();
            boxes.push(current);
            boxes.push(fin);
            runs.push(LevelRun {
                level: li,
                boxes,
                deltas,
                objectness: out.objectness.expect("final stage has objectness"),
            });
        }

        // proposals
        let mut proposals = Vec::with_capacity(batch);
        for im in 0..batch {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (ri, run) in runs.iter().enumerate() {
                let obj = g.value(run.objectness);
                let per_image = run.boxes[0].len() / batch;
                let start = im * per_image;
                for k in start..start + per_image {
                    let sb = &run.boxes[n_stages - 1][k];
                    let (y, x) = sb.cell;
                    let z = obj.at(im, sb.slot, y, x);
                    cands.push((1.0 / (1.0 + (-z).exp()), ri, k));
                }
            }
            cands.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.1, p.2).cmp(&(q.1, q.2))));
            cands.truncate(cfg.pre_nms);
            let bxs: Vec<BBox> = cands.iter().map(|&(_, ri, k)| runs[ri].boxes[n_stages][k].bbox).collect();
            let scores: Vec<f64> = cands.iter().map(|c| c.0).collect();
            let chosen = g.hold(|| {
                nms(&bxs, &scores, cfg.nms_threshold)
                    .into_iter()
                    .take(cfg.post_nms)
                    .flat_map(|i| [cands[i].0, cands[i].1 as f64, cands[i].2 as f64])
                    .collect()
            });
            proposals.push(
                chosen
                    .chunks_exact(3)
                    .map(|c| {
                        let (score, ri, k) = (c[0], c[1] as usize, c[2] as usize);
                        Proposal {
                            bbox: runs[ri].boxes[n_stages][k].bbox,
                            score,
                            level: runs[ri].level + 2,
                            trace: runs[ri].boxes.iter().map(|s| s[k].bbox).collect(),
                        }
                    })
                    .collect(),
            );
        }

        let Some(targets) = targets else {
            return Ok(RpnOutput { proposals, loss: None });
        };

        // regression losses per stage
        let mut stage_reg = Vec::with_capacity(n_stages);
        let mut positives = Vec::with_capacity(n_stages);
        let mut final_labels: Vec<Vec<Label>> = Vec::new();
        for t in 0..n_stages {
            let thr = cfg.iou_thresholds[t];
            let mut rows = Vec::new();
            let mut anchors_in = Vec::new();
            let mut gts = Vec::new();
            for run in &runs {
                let per_image = run.boxes[t].len() / batch;
                let mut picks = Vec::new();
                let mut labels_level = Vec::with_capacity(run.boxes[t].len());
                for (im, tg) in targets.iter().enumerate() {
                    let slice = &run.boxes[t][im * per_image..(im + 1) * per_image];
                    let bxs: Vec<BBox> = slice.iter().map(|s| s.bbox).collect();
                    let labels = assign_labels(&bxs, &tg.gts, &tg.ignore, thr);
                    for (sb, l) in slice.iter().zip(&labels) {
                        if let Label::Positive(j) = l {
                            let (y, x) = sb.cell;
                            picks.push((im, 4 * sb.slot, y, x));
                            anchors_in.push(sb.bbox);
                            gts.push(tg.gts[*j]);
                        }
                    }
                    labels_level.extend(labels);
                }
                if !picks.is_empty() {
                    rows.push(g.gather(run.deltas[t], &picks, 4)?);
                }
                if t == n_stages - 1 {
                    final_labels.push(labels_level);
                }
            }
            positives.push(gts.len());
            let loss = if rows.is_empty() {
                g.constant(Tensor4::scalar(0.0))
            } else {
                let d = if rows.len() == 1 { rows[0] } else { g.concat_batch(&rows)? };
                let pred = g.decode_boxes(d, anchors_in, self.coder)?;
                g.iou_loss(pred, gts)?
            };
            stage_reg.push(loss);
        }

        // objectness on the final stage
        let mut obj_rows = Vec::new();
        let mut obj_targets = Vec::new();
        for im in 0..batch {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (ri, run) in runs.iter().enumerate() {
                let per_image = run.boxes[0].len() / batch;
                for k in im * per_image..(im + 1) * per_image {
                    match final_labels[ri][k] {
                        Label::Positive(_) => pos.push((ri, k)),
                        Label::Negative => neg.push((ri, k)),
                        Label::Ignore => {}
                    }
                }
            }
            let max_pos = ((cfg.batch_per_image as f64 * cfg.positive_fraction) as usize).max(1);
            pos.shuffle(rng);
            pos.truncate(max_pos);
            neg.shuffle(rng);
            neg.truncate(cfg.batch_per_image - pos.len());
            for (list, y) in [(pos, 1.0), (neg, 0.0)] {
                for (ri, k) in list {
                    obj_rows.push((ri, k));
                    obj_targets.push(y);
                }
            }
        }
        let cls = if obj_rows.is_empty() {
            g.constant(Tensor4::scalar(0.0))
        } else {
            let mut per_level: Vec<Vec<(usize, usize, usize, usize)>> = vec![Vec::new(); runs.len()];
            let mut order: Vec<(usize, usize)> = Vec::with_capacity(obj_rows.len());
            for &(ri, k) in &obj_rows {
                let run = &runs[ri];
                let sb = &run.boxes[n_stages - 1][k];
                let (y, x) = sb.cell;
                order.push((ri, per_level[ri].len()));
                per_level[ri].push((sb.image, sb.slot, y, x));
            }
            let mut parts = Vec::new();
            let mut offsets = vec![0usize; runs.len()];
            let mut acc = 0;
            for (ri, picks) in per_level.iter().enumerate() {
                offsets[ri] = acc;
                if !picks.is_empty() {
                    parts.push(g.gather(runs[ri].objectness, picks, 1)?);
                    acc += picks.len();
                }
            }
            let logits = if parts.len() == 1 { parts[0] } else { g.concat_batch(&parts)? };
            let rows: Vec<usize> = order.iter().map(|&(ri, i)| offsets[ri] + i).collect();
            g.bce_with_logits(logits, rows, obj_targets)?
        };
        let total = mrrpn_loss_var(g, &stage_reg, cls, cfg)?;
        Ok(RpnOutput {
            proposals,
            loss: Some(RpnLoss {
                total,
                stage_reg,
                cls,
                positives,
            }),
        })
    }
}

#[derive(Serialize)]
struct ProposalRecord<'a> {
    image_id: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    level: usize,
    stage_trace: Vec<[f64; 4]>,
}

/// Writes proposals as JSON lines (`image_id`, `box`, `score`, `level`,
/// `stage_trace`).
pub fn write_proposals_jsonl<W: Write>(out: &mut W, image_ids: &[String], proposals: &[Vec<Proposal>]) -> Result<()> {
    for (id, props) in image_ids.iter().zip(proposals) {
        for p in props {
            let rec = ProposalRecord {
                image_id: id,
                bbox: p.bbox.to_array(),
                score: p.score,
                level: p.level,
                stage_trace: p.trace.iter().map(|b| b.to_array()).collect(),
            };
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<proposals>", e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_geometry() {
        let cfg = AnchorConfig {
            strides: vec![16.0; 4],
            scales: vec![vec![32.0]; 4],
            ratios: vec![1.0],
        };
        let a = generate_anchors(&cfg, 0, (1, 1)).unwrap();
        assert_eq!(a[0], BBox::raw(-8.0, -8.0, 24.0, 24.0));
        let cfg = AnchorConfig {
            strides: vec![16.0; 4],
            scales: vec![vec![32.0, 64.0]; 4],
            ratios: vec![0.5, 1.0, 2.0],
        };
        assert_eq!(generate_anchors(&cfg, 2, (4, 4)).unwrap().len(), 96);
        let r2 = generate_anchors(&cfg, 0, (1, 1)).unwrap()[2];
        assert!((r2.width() - 32.0 / 2f64.sqrt()).abs() < 1e-9);
        assert!((r2.height() - 32.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((r2.area() - 1024.0).abs() < 1e-6);
    }

    #[test]
    fn empty_ratios_rejected() {
        let cfg = AnchorConfig {
            ratios: vec![],
            ..AnchorConfig::default()
        };
        assert!(generate_anchors(&cfg, 0, (2, 2)).is_err());
    }

    #[test]
    fn loss_constants() {
        let cfg = MrrpnConfig::default();
        let l = mrrpn_loss(&[0.1, 0.1, 0.1], 0.2, &cfg).unwrap();
        assert!((l - 3.14).abs() < 1e-9);
        assert_eq!(mrrpn_loss(&[0.0; 3], 0.2, &cfg).unwrap(), 0.2);
        assert!(mrrpn_loss(&[0.1; 2], 0.2, &cfg).is_err());
    }

    #[test]
    fn threshold_table_walk() {
        let cfg = MrrpnConfig::default();
        let gt = BBox::raw(0.0, 0.0, 10.0, 10.0);
        // IoU(b, gt) = 55 / 100 with b = [0, 0, 10, 5.5]; a second box matches gt exactly
        let b = BBox::raw(0.0, 0.0, 10.0, 5.5);
        let boxes = [b, gt, BBox::raw(50.0, 50.0, 60.0, 60.0)];
        assert!((b.iou(&gt) - 0.55).abs() < 1e-12);
        let l1 = assign_targets(&boxes, &[gt], 1, &cfg).unwrap();
        let l2 = assign_targets(&boxes, &[gt], 2, &cfg).unwrap();
        let l3 = assign_targets(&boxes, &[gt], 3, &cfg).unwrap();
        assert_eq!(l1, vec![Label::Positive(0), Label::Positive(0), Label::Negative]);
        assert_eq!(l2, vec![Label::Ignore, Label::Positive(0), Label::Negative]);
        assert_eq!(l3[0], Label::Ignore);
        assert!(assign_targets(&boxes, &[gt], 4, &cfg).is_err());
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let boxes = [BBox::raw(0.0, 0.0, 4.0, 4.0); 3];
        assert!(assign_labels(&boxes, &[], &[], 0.5).iter().all(|l| *l == Label::Negative));
    }

    #[test]
    fn stage_count_defaults() {
        let c = MrrpnConfig::with_stages(4);
        assert_eq!(c.iou_thresholds, vec![0.5, 0.6, 0.7, 0.7]);
        assert!(c.validate().is_ok());
        assert!(MrrpnConfig::with_stages(1).validate().is_ok());
        assert!(MrrpnConfig::with_stages(0).validate().is_err());
    }
}
