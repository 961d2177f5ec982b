//! The two training phases and checkpoint evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, Phase, RngState};
use super::config::{DetectorConfig, FinetuneSet, PhaseConfig};
use super::model::{DetectOptions, Detector, LossPhase, Target};
use crate::cfpan::simplex_violation;
use crate::datasets::{sample_k_shot, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, ClassRole, EvalReport, ImageResult};
use crate::gcl::{ClassifierLayout, LossBreakdown};
use crate::graph::Graph;
use crate::params::{Group, Param};
use crate::tensor::Tensor4;

/// One optimizer step, as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    /// Largest deviation of any fusion-weight triple from the simplex.
    pub simplex_violation: f64,
    pub loss: LossBreakdown,
}

/// Classifier targets of one image under `layout`. Annotations flagged
/// ignore become ignore regions; a class with no active node is an error.
pub fn image_target(img: &crate::datasets::AnnotatedImage, classes: &[String], layout: &ClassifierLayout) -> Result<Target> {
    let mut t = Target::default();
    for a in &img.annotations {
        if a.ignore {
            t.ignore.push(a.bbox);
            continue;
        }
        let name = &classes[a.class];
        let node = layout.node_of(name).ok_or_else(|| {
            Error::Protocol(format!(
                "image {}: instance of '{name}' has no active classifier node in this phase",
                img.id
            ))
        })?;
        t.boxes.push(a.bbox);
        t.nodes.push(node);
    }
    Ok(t)
}

struct Sgd {
    velocity: Vec<Option<Tensor4>>,
}

fn decays(p: &Param) -> bool {
    p.name.ends_with(".weight")
}

fn run_phase<R: Rng, F: FnMut(&StepRecord, &Detector) -> Result<()>>(
    det: &mut Detector,
    data: &Dataset,
    schedule: &PhaseConfig,
    loss_phase: LossPhase,
    frozen: impl Fn(&Param) -> bool + Copy,
    rng: &mut R,
    on_step: &mut F,
) -> Result<usize> {
    let targets: Vec<Target> = data
        .images
        .iter()
        .map(|img| image_target(img, &data.classes, &det.layout))
        .collect::<Result<_>>()?;
    let n = data.images.len();
    if n == 0 {
        return Err(Error::invalid("train", "empty training set"));
    }
    let bs = schedule.batch_size.min(n);
    let per_epoch = n.div_ceil(bs);
    let total = per_epoch * schedule.epochs;
    let mut opt = Sgd {
        velocity: vec![None; det.store.len()],
    };
    let phase = match loss_phase {
        LossPhase::Base => Phase::Base,
        LossPhase::Finetune => Phase::Finetuned,
    };
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut tg = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = &data.images[i];
                if schedule.flip && rng.random_bool(0.5) {
                    images.push(img.flipped().to_tensor());
                    let w = img.width as f64;
                    let t = &targets[i];
                    let flip = |b: &crate::boxes::BBox| crate::boxes::BBox::raw(w - b.x2, b.y1, w - b.x1, b.y2);
                    tg.push(Target {
                        boxes: t.boxes.iter().map(flip).collect(),
                        nodes: t.nodes.clone(),
                        ignore: t.ignore.iter().map(flip).collect(),
                    });
                } else {
                    images.push(img.to_tensor());
                    tg.push(targets[i].clone());
                }
            }
            let batch = Detector::stack(&images)?;
            let mut g = Graph::new();
            let b = det.store.bind(&mut g, frozen);
            let (loss, breakdown) = det.training_loss(&mut g, &b, &batch, &tg, loss_phase, rng)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::invalid("train", format!("non-finite loss at step {step}: {breakdown:?}")));
            }
            let mut grads = g.backward(loss);
            let mut updates = Vec::new();
            let mut sq = 0.0;
            for (id, p) in det.store.iter() {
                if p.fixed || frozen(p) {
                    continue;
                }
                if let Some(gr) = grads.take(b[id]) {
                    if !gr.is_finite() {
                        return Err(Error::NonFiniteGradient {
                            input: id.index(),
                            index: gr.data().iter().position(|v| !v.is_finite()).unwrap_or(0),
                        });
                    }
                    sq += gr.sum_squares();
                    updates.push((id, gr));
                }
            }
            let grad_norm = sq.sqrt();
            let clip = if schedule.grad_clip > 0.0 && grad_norm > schedule.grad_clip {
                schedule.grad_clip / grad_norm
            } else {
                1.0
            };
            let lr = schedule.lr_at(step, total);
            for (id, mut gr) in updates {
                let p = det.store.param(id);
                if clip != 1.0 {
                    gr = gr.scaled(clip);
                }
                if schedule.weight_decay > 0.0 && decays(p) {
                    gr.axpy(schedule.weight_decay, &p.value);
                }
                let v = opt.velocity[id.index()].get_or_insert_with(|| Tensor4::zeros(gr.shape()));
                *v = v.scaled(schedule.momentum);
                v.add_assign(&gr);
                let v = v.clone();
                det.store.get_mut(id).axpy(-lr, &v);
            }
            let fusion: Vec<&Tensor4> = det
                .neck()
                .fusion_logit_ids()
                .map(|ids| ids.iter().map(|&i| det.store.get(i)).collect())
                .unwrap_or_default();
            let record = StepRecord {
                phase,
                step,
                epoch,
                lr,
                grad_norm,
                simplex_violation: simplex_violation(&fusion),
                loss: breakdown,
            };
            on_step(&record, det)?;
            step += 1;
        }
    }
    Ok(step)
}

/// Trains every parameter on `dataset`, whose non-ignored instances must
/// all belong to base classes of `split`.
pub fn train_base<F: FnMut(&StepRecord, &Detector) -> Result<()>>(
    dataset: &Dataset,
    split: &SplitSpec,
    config: DetectorConfig,
    seed: u64,
    mut on_step: F,
) -> Result<Checkpoint> {
    dataset.validate()?;
    for img in &dataset.images {
        if let Some(a) = img.targets().find(|a| split.is_novel(a.class)) {
            return Err(Error::Protocol(format!(
                "base training set contains novel class '{}' in image {}",
                dataset.classes[a.class], img.id
            )));
        }
    }
    let base = split.base.iter().map(|&c| dataset.classes[c].clone()).collect();
    let mut det = Detector::new(config, base, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let schedule = det.config.base.clone();
    let steps = run_phase(&mut det, dataset, &schedule, LossPhase::Base, |_| false, &mut rng, &mut on_step)?;
    Ok(Checkpoint {
        phase: Phase::Base,
        seed,
        steps,
        rng: RngState::capture(&rng),
        detector: det,
        run_config: None,
    })
}

/// Binds the novel classes of `split` to placeholder nodes and trains all
/// but the backbone on the K-shot set.
pub fn fine_tune<F: FnMut(&StepRecord, &Detector) -> Result<()>>(
    ckpt: &Checkpoint,
    kshot: &Dataset,
    split: &SplitSpec,
    seed: u64,
    mut on_step: F,
) -> Result<Checkpoint> {
    if ckpt.phase != Phase::Base {
        return Err(Error::Protocol(
            "checkpoint is already fine-tuned; fine-tuning runs once from a base checkpoint".into(),
        ));
    }
    kshot.validate()?;
    let novel: Vec<String> = split.novel.iter().map(|&c| kshot.classes[c].clone()).collect();
    let mut det = ckpt.detector.clone();
    det.layout = det.layout.activate(&novel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let schedule = det.config.finetune.clone();
    let frozen = |p: &Param| p.group == Group::Backbone;
    let steps = run_phase(&mut det, kshot, &schedule, LossPhase::Finetune, frozen, &mut rng, &mut on_step)?;
    Ok(Checkpoint {
        phase: Phase::Finetuned,
        seed,
        steps,
        rng: RngState::capture(&rng),
        detector: det,
        run_config: None,
    })
}

/// The fine-tuning set drawn from `pool`: K instances of every class of
/// `split` (balanced) or of its novel classes only, with all other
/// instances turned into ignore regions.
pub fn finetune_set(pool: &Dataset, split: &SplitSpec, set: FinetuneSet, k: usize, seed: u64) -> Result<Dataset> {
    let classes: Vec<usize> = match set {
        FinetuneSet::Balanced => split.base.iter().chain(&split.novel).copied().collect(),
        FinetuneSet::NovelOnly => split.novel.clone(),
    };
    sample_k_shot(pool, &classes, k, seed)
}

/// Detects on every image and scores per class at IoU 0.5; base and novel
/// roles come from `split`.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    split: &SplitSpec,
    shots: Option<usize>,
    seed: u64,
    opts: &DetectOptions,
) -> Result<EvalReport> {
    let det = &ckpt.detector;
    let layout = &det.layout;
    for c in layout.base_classes.iter().chain(&layout.bound) {
        if dataset.class_index(c).is_none() {
            return Err(Error::invalid(
                "evaluate",
                format!("checkpoint class '{c}' is not in the dataset catalogue {:?}", dataset.classes),
            ));
        }
    }
    let mut results = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let dets = det.detect(&img.to_tensor(), opts)?;
        results.push(ImageResult {
            detections: dets
                .into_iter()
                .map(|d| (dataset.class_index(&d.class).expect("checked above"), d.bbox, d.score))
                .collect(),
            ground_truth: img.targets().map(|a| (a.class, a.bbox)).collect(),
        });
    }
    let mut roles = BTreeMap::new();
    for &c in &split.base {
        roles.insert(c, ClassRole::Base);
    }
    for &c in &split.novel {
        roles.insert(c, ClassRole::Novel);
    }
    build_report(&results, &dataset.classes, &roles, &split.id, shots, seed)
}
