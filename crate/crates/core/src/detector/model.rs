use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::Backbone;
use super::config::DetectorConfig;
use super::roi_align::{assign_level, Roi, RoiAlignSpec};
use crate::boxes::{BBox, BoxCoder};
use crate::cfpan::{Cfpan, Pyramid};
use crate::error::{Error, Result};
use crate::evaluation::nms;
use crate::gcl::{cosine_logits, gcl_base_loss, gcl_finetune_loss, ClassifierLayout, LossBreakdown, LossTerms};
use crate::graph::{Graph, Var};
use crate::mrrpn::{Mrrpn, RpnTargets};
use crate::nn::init;
use crate::params::{Binding, Group, ParamId, ParamStore};
use crate::tensor::Tensor4;

const STRIDES: [f64; 4] = [4.0, 8.0, 16.0, 32.0];

/// Training targets of one image, with classes given as classifier nodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Target {
    pub boxes: Vec<BBox>,
    pub nodes: Vec<usize>,
    pub ignore: Vec<BBox>,
}

/// Which classification loss a training step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPhase {
    Base,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: String,
    pub node: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    /// Classes the caller expects to detect; each must be active.
    pub classes: Option<Vec<String>>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
            classes: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct HeadIds {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    classifier: ParamId,
    delta: (ParamId, ParamId),
}

/// Backbone → neck → region proposals → RoI head with a cosine
/// classifier over background, base classes and placeholders.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    pub layout: ClassifierLayout,
    backbone: Backbone,
    neck: Cfpan,
    rpn: Mrrpn,
    head: HeadIds,
    coder: BoxCoder,
}

struct HeadOut {
    logits: Var,
    deltas: Var,
}

impl Detector {
    pub fn new(config: DetectorConfig, base_classes: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if base_classes.is_empty() {
            return Err(Error::Config("at least one base class is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone.clone(), &mut store, &mut rng);
        let sizes = config.level_sizes();
        let neck = Cfpan::new(
            config.neck.clone(),
            config.backbone.widths,
            [sizes[0], sizes[1], sizes[2]],
            &mut store,
            &mut rng,
        )?;
        let d = config.neck.width;
        let rpn = Mrrpn::new(config.rpn.clone(), d, &mut store, &mut rng)?;
        let layout = ClassifierLayout::new(base_classes, config.gcl.placeholders);
        let r = &config.roi;
        let pooled = d * r.output_size * r.output_size;
        let mut linear = |name: &str, group: Group, o: usize, i: usize, std: Option<f64>| {
            let w = match std {
                Some(s) => init::normal([o, i, 1, 1], s, &mut rng),
                None => init::kaiming([o, i, 1, 1], &mut rng),
            };
            (
                store.add(format!("{name}.weight"), group, w),
                store.add(format!("{name}.bias"), group, Tensor4::zeros([1, o, 1, 1])),
            )
        };
        let fc1 = linear("roi.fc1", Group::RoiHead, r.hidden, pooled, None);
        let fc2 = linear("roi.fc2", Group::RoiHead, r.hidden, r.hidden, None);
        let delta = linear("roi.delta", Group::RoiHead, 4, r.hidden, Some(0.001));
        let classifier = store.add(
            "classifier.weight",
            Group::Classifier,
            init::normal([layout.num_nodes(), r.hidden, 1, 1], 0.01, &mut rng),
        );
        let coder = BoxCoder::with_weights(r.box_coder_weights);
        Ok(Self {
            config,
            store,
            layout,
            backbone,
            neck,
            rpn,
            head: HeadIds {
                fc1,
                fc2,
                classifier,
                delta,
            },
            coder,
        })
    }

    pub fn neck(&self) -> &Cfpan {
        &self.neck
    }

    pub fn rpn(&self) -> &Mrrpn {
        &self.rpn
    }

    pub fn classifier_id(&self) -> ParamId {
        self.head.classifier
    }

    /// Scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.store.count(None)
    }

    /// Stacks equally sized `(1, 3, H, W)` images into a batch.
    pub fn stack(images: &[Tensor4]) -> Result<Tensor4> {
        let first = images.first().ok_or_else(|| Error::invalid("stack", "empty batch"))?;
        let [_, c, h, w] = first.shape();
        let mut data = Vec::with_capacity(images.len() * first.len());
        for t in images {
            if t.shape() != [1, c, h, w] {
                return Err(Error::invalid("stack", format!("image shape {:?} differs from {:?}", t.shape(), first.shape())));
            }
            data.extend_from_slice(t.data());
        }
        Tensor4::new([images.len(), c, h, w], data)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let (h, w) = self.config.image_size;
        if x.channels() != 3 || x.height() != h || x.width() != w {
            return Err(Error::invalid(
                "detector",
                format!("input {:?} does not match the configured 3x{h}x{w}", x.shape()),
            ));
        }
        Ok(())
    }

    fn pyramid(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Pyramid> {
        let c = self.backbone.forward(g, b, x)?;
        self.neck.forward(g, b, c)
    }

    fn rois_for(&self, batch: usize, boxes: &[BBox]) -> Vec<Roi> {
        boxes
            .iter()
            .map(|&bbox| Roi {
                batch,
                level: assign_level(&bbox, self.config.roi.canonical_size, 2, 5) - 2,
                bbox,
            })
            .collect()
    }

    fn head(&self, g: &mut Graph, b: &Binding, pyramid: &Pyramid, rois: Vec<Roi>) -> Result<HeadOut> {
        let r = &self.config.roi;
        let spec = RoiAlignSpec {
            output_size: r.output_size,
            sampling: r.sampling,
        };
        let pooled = g.roi_align(&pyramid.levels, &STRIDES, rois, spec)?;
        let h = g.linear(pooled, b[self.head.fc1.0], Some(b[self.head.fc1.1]))?;
        let h = g.relu(h);
        let h = g.linear(h, b[self.head.fc2.0], Some(b[self.head.fc2.1]))?;
        let h = g.relu(h);
        let logits = cosine_logits(g, h, b[self.head.classifier], self.config.gcl.scale, self.config.gcl.eps)?;
        let deltas = g.linear(h, b[self.head.delta.0], Some(b[self.head.delta.1]))?;
        Ok(HeadOut { logits, deltas })
    }

    /// Samples RoIs from `proposals` plus the ground-truth boxes. Returns
    /// `(box, node, regression target)` with foreground first.
    fn sample_rois<R: Rng>(&self, proposals: &[BBox], t: &Target, rng: &mut R) -> Result<Vec<(BBox, usize, Option<[f64; 4]>)>> {
        let r = &self.config.roi;
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for cand in proposals.iter().chain(&t.boxes) {
            let best = t
                .boxes
                .iter()
                .enumerate()
                .map(|(j, gt)| (cand.iou(gt), j))
                .fold(None, |acc: Option<(f64, usize)>, x| match acc {
                    Some(a) if a.0 >= x.0 => Some(a),
                    _ => Some(x),
                });
            match best {
                Some((iou, j)) if iou >= r.foreground_iou => {
                    let delta = self.coder.encode(cand, &t.boxes[j])?;
                    fg.push((*cand, t.nodes[j], Some(delta)));
                }
                _ => {
                    if t.ignore.iter().any(|ig| cand.iou(ig) >= r.foreground_iou) {
                        continue;
                    }
                    bg.push((*cand, 0, None));
                }
            }
        }
        let max_fg = ((r.rois_per_image as f64 * r.foreground_fraction).round() as usize).max(1);
        fg.shuffle(rng);
        fg.truncate(max_fg);
        bg.shuffle(rng);
        bg.truncate(r.rois_per_image - fg.len().min(r.rois_per_image));
        fg.extend(bg);
        Ok(fg)
    }

    /// Builds the training loss for a batch `(B, 3, H, W)`.
    pub fn training_loss<R: Rng>(
        &self,
        g: &mut Graph,
        b: &Binding,
        batch: &Tensor4,
        targets: &[Target],
        phase: LossPhase,
        rng: &mut R,
    ) -> Result<(Var, LossBreakdown)> {
        self.check_input(batch)?;
        if targets.len() != batch.batch() {
            return Err(Error::Shape {
                op: "training_loss",
                dim: "targets",
                expected: batch.batch(),
                got: targets.len(),
            });
        }
        let x = g.constant(batch.clone());
        let pyramid = self.pyramid(g, b, x)?;
        let rpn_targets: Vec<RpnTargets> = targets
            .iter()
            .map(|t| RpnTargets {
                gts: t.boxes.clone(),
                ignore: t.ignore.clone(),
            })
            .collect();
        let (h, w) = self.config.image_size;
        let out = self.rpn.forward(g, b, &pyramid, (h, w), Some(&rpn_targets), rng)?;
        let rpn_loss = out.loss.expect("targets were given");

        let mut terms = LossTerms::default();
        let cfg = &self.config.rpn;
        for (t, (&v, &a)) in rpn_loss.stage_reg.iter().zip(&cfg.alphas).enumerate() {
            terms.push(format!("rpn_iou_stage{}", t + 1), v, cfg.lambda * a);
        }
        terms.push("rpn_objectness", rpn_loss.cls, 1.0);

        let mut rois = Vec::new();
        let mut labels = Vec::new();
        let mut fg_rows = Vec::new();
        let mut fg_targets = Vec::new();
        for (i, (props, t)) in out.proposals.iter().zip(targets).enumerate() {
            let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
            for (bbox, node, delta) in self.sample_rois(&boxes, t, rng)? {
                if let Some(d) = delta {
                    fg_rows.push(rois.len());
                    fg_targets.push(d);
                }
                rois.extend(self.rois_for(i, &[bbox]));
                labels.push(node);
            }
        }
        let head = self.head(g, b, &pyramid, rois)?;
        let cls_terms = match phase {
            LossPhase::Base => gcl_base_loss(g, head.logits, &labels, &self.layout, &self.config.gcl)?,
            LossPhase::Finetune => {
                gcl_finetune_loss(g, head.logits, &labels, &self.layout, &self.config.gcl, b[self.head.classifier])?
            }
        };
        terms.extend(cls_terms);
        let box_loss = if fg_rows.is_empty() {
            g.constant(Tensor4::scalar(0.0))
        } else {
            g.smooth_l1(head.deltas, fg_rows, fg_targets, self.config.roi.smooth_l1_beta)?
        };
        terms.push("box_smooth_l1", box_loss, self.config.roi.box_loss_weight);
        Ok(terms.finish(g))
    }

    /// Active nodes for scoring: background, base, and bound novel nodes.
    fn active_support(&self) -> Vec<bool> {
        let mut s = vec![false; self.layout.num_nodes()];
        s[0] = true;
        for j in self.layout.base_nodes().chain(self.layout.bound_nodes()) {
            s[j] = true;
        }
        s
    }

    fn inference(&self, image: &Tensor4) -> Result<Option<(Vec<BBox>, Tensor4, Tensor4)>> {
        self.check_input(image)?;
        if image.batch() != 1 {
            return Err(Error::invalid("detect", "expects a single image"));
        }
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, |_| true);
        let x = g.constant(image.clone());
        let pyramid = self.pyramid(&mut g, &b, x)?;
        let (h, w) = self.config.image_size;
        // proposals do not depend on the rng without targets
        let out = self.rpn.forward(&mut g, &b, &pyramid, (h, w), None, &mut ChaCha8Rng::seed_from_u64(0))?;
        let boxes: Vec<BBox> = out.proposals[0]
            .iter()
            .take(self.config.roi.test_proposals)
            .map(|p| p.bbox)
            .collect();
        if boxes.is_empty() {
            return Ok(None);
        }
        let rois = self.rois_for(0, &boxes);
        let head = self.head(&mut g, &b, &pyramid, rois)?;
        Ok(Some((boxes, g.value(head.logits).clone(), g.value(head.deltas).clone())))
    }

    /// Cosine logits `(R, nodes, 1, 1)` of the inference-time RoIs.
    pub fn roi_logits(&self, image: &Tensor4) -> Result<Option<Tensor4>> {
        Ok(self.inference(image)?.map(|(_, l, _)| l))
    }

    /// Detections sorted by descending score.
    pub fn detect(&self, image: &Tensor4, opts: &DetectOptions) -> Result<Vec<Detection>> {
        if let Some(classes) = &opts.classes {
            for c in classes {
                if self.layout.node_of(c).is_none() {
                    return Err(Error::Protocol(format!(
                        "class '{c}' has no active classifier node (bound novel classes: {:?})",
                        self.layout.bound
                    )));
                }
            }
        }
        let Some((boxes, logits, deltas)) = self.inference(image)? else {
            return Ok(Vec::new());
        };
        let support = self.active_support();
        let (h, w) = self.config.image_size;
        let n = boxes.len();
        let mut probs = vec![vec![0.0; support.len()]; n];
        for (i, p) in probs.iter_mut().enumerate() {
            let row = logits.row(i);
            let m = row.iter().zip(&support).filter(|(_, &s)| s).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..support.len() {
                if support[j] {
                    p[j] = (row[j] - m).exp();
                    z += p[j];
                }
            }
            p.iter_mut().for_each(|v| *v /= z);
        }
        let refined: Vec<BBox> = boxes
            .iter()
            .enumerate()
            .map(|(i, bx)| {
                let d = deltas.row(i);
                self.coder.decode(bx, &[d[0], d[1], d[2], d[3]]).clip(w as f64, h as f64)
            })
            .collect();
        let mut dets = Vec::new();
        for node in 1..support.len() {
            if !support[node] {
                continue;
            }
            let idx: Vec<usize> = (0..n)
                .filter(|&i| probs[i][node] > opts.score_threshold && refined[i].is_valid())
                .collect();
            let cb: Vec<BBox> = idx.iter().map(|&i| refined[i]).collect();
            let cs: Vec<f64> = idx.iter().map(|&i| probs[i][node]).collect();
            let class = self.layout.class_of(node).expect("active node has a class").to_string();
            for k in nms(&cb, &cs, opts.nms_threshold) {
                dets.push(Detection {
                    bbox: cb[k],
                    class: class.clone(),
                    node,
                    score: cs[k],
                });
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.node.cmp(&b.node)));
        dets.truncate(opts.max_detections);
        Ok(dets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_breakdown_reconstructs_and_detect_runs() {
        let names = vec!["a".to_string(), "b".to_string()];
        let det = Detector::new(DetectorConfig::micro(), names, 0).unwrap();
        let img = Tensor4::from_fn([1, 3, 64, 64], |_, c, y, x| ((c + y * 3 + x) % 7) as f64 * 0.1);
        let target = Target {
            boxes: vec![BBox::raw(10.0, 12.0, 30.0, 40.0)],
            nodes: vec![2],
            ignore: vec![],
        };
        let mut g = Graph::new();
        let b = det.store.bind(&mut g, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (loss, br) = det.training_loss(&mut g, &b, &img, &[target], LossPhase::Base, &mut rng).unwrap();
        assert!((g.scalar(loss) - br.reconstruct()).abs() < 1e-9);
        assert!(br.get("rpn_iou_stage3").is_some() && br.get("box_smooth_l1").is_some());
        let d1 = det.detect(&img, &DetectOptions::default()).unwrap();
        let d2 = det.detect(&img, &DetectOptions::default()).unwrap();
        assert_eq!(d1, d2);
        let strict = det
            .detect(
                &img,
                &DetectOptions {
                    score_threshold: 0.4,
                    ..DetectOptions::default()
                },
            )
            .unwrap();
        assert!(strict.len() <= d1.len());
        let novel = DetectOptions {
            classes: Some(vec!["zebra".into()]),
            ..DetectOptions::default()
        };
        assert!(matches!(det.detect(&img, &novel), Err(Error::Protocol(_))));
    }
}
