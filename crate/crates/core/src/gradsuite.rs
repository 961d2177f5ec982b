//! Registered finite-difference checks over every differentiable op of the
//! detector, from single kernels up to the full training loss.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxes::BBox;
use crate::cfpan::{apply_cbam, fuse_level, CbamVars, Fusion};
use crate::detector::roi_align::{Roi, RoiAlignSpec};
use crate::detector::{Detector, DetectorConfig, LossPhase, Target};
use crate::error::Result;
use crate::gcl::{cosine_logits, gcl_base_loss, gcl_finetune_loss, ClassifierLayout, GclConfig};
use crate::graph::{Graph, Var};
use crate::nn::gradcheck::random_projection;
use crate::nn::init::uniform_seeded;
use crate::nn::{gradcheck, ConvSpec, GradcheckOptions, GradcheckReport};
use crate::tensor::Tensor4;

/// Tolerance for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the composed detector loss.
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub op: String,
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

fn row(op: &str, tolerance: f64, started: Instant, r: Result<GradcheckReport>) -> GradcheckRow {
    let seconds = started.elapsed().as_secs_f64();
    match r {
        Ok(r) => GradcheckRow {
            op: op.to_string(),
            max_rel_error: r.max_rel_error,
            worst_input: r.worst_input,
            worst_index: r.worst_index,
            analytic: r.analytic,
            numeric: r.numeric,
            coords_checked: r.coords_checked,
            tolerance,
            passed: r.max_rel_error < tolerance,
            seconds,
        },
        Err(_) => GradcheckRow {
            op: op.to_string(),
            max_rel_error: f64::INFINITY,
            worst_input: 0,
            worst_index: 0,
            analytic: f64::NAN,
            numeric: f64::NAN,
            coords_checked: 0,
            tolerance,
            passed: false,
            seconds,
        },
    }
}

fn rand(shape: [usize; 4], bound: f64, seed: u64) -> Tensor4 {
    uniform_seeded(shape, bound, seed)
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub const OPS: [&str; 10] = [
    "conv2d_dilated",
    "deform_conv2d",
    "bilinear_upsample",
    "cbam",
    "fuse_level",
    "roi_align",
    "iou_loss",
    "gcl_base_loss",
    "gcl_finetune_loss",
    "detector_loss",
];

/// Runs one registered check by name.
pub fn check(op: &str) -> Option<GradcheckRow> {
    let opts = GradcheckOptions::default();
    let t = Instant::now();
    let r = match op {
        "conv2d_dilated" => {
            let spec = ConvSpec {
                in_channels: 2,
                out_channels: 3,
                kernel_size: 3,
                dilation: 2,
                stride: 1,
                padding: 2,
            };
            gradcheck(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
                    random_projection(g, y, 11)
                },
                &[rand([1, 2, 7, 7], 1.0, 1), rand([3, 2, 3, 3], 1.0, 2), rand([1, 3, 1, 1], 1.0, 3)],
                &opts,
            )
        }
        "deform_conv2d" => gradcheck(
            |g, v| {
                let y = g.deform_conv2d(v[0], v[1], v[2], Some(v[3]), ConvSpec::same(2, 3, 3, 1))?;
                random_projection(g, y, 12)
            },
            &[
                rand([1, 2, 6, 6], 1.0, 4),
                rand([1, 18, 6, 6], 1.3, 5),
                rand([3, 2, 3, 3], 1.0, 6),
                rand([1, 3, 1, 1], 1.0, 7),
            ],
            &opts,
        ),
        "bilinear_upsample" => gradcheck(
            |g, v| {
                let y = g.upsample(v[0], 2)?;
                random_projection(g, y, 13)
            },
            &[rand([1, 2, 3, 4], 1.0, 8)],
            &opts,
        ),
        "cbam" => gradcheck(
            |g, v| {
                let p = CbamVars {
                    mlp_w1: v[1],
                    mlp_b1: v[2],
                    mlp_w2: v[3],
                    mlp_b2: v[4],
                    spatial_w: v[5],
                    spatial_b: v[6],
                };
                let y = apply_cbam(g, v[0], &p)?;
                random_projection(g, y, 14)
            },
            &[
                rand([1, 8, 5, 5], 1.0, 9),
                rand([2, 8, 1, 1], 1.0, 10),
                rand([1, 2, 1, 1], 0.5, 11),
                rand([8, 2, 1, 1], 1.0, 12),
                rand([1, 8, 1, 1], 0.5, 13),
                rand([1, 2, 7, 7], 0.3, 14),
                rand([1, 1, 1, 1], 0.5, 15),
            ],
            &opts,
        ),
        "fuse_level" => gradcheck(
            |g, v| {
                let y = fuse_level(g, v[0], v[1], v[2], Fusion::Logits(v[3]))?;
                random_projection(g, y, 15)
            },
            &[
                rand([1, 4, 3, 3], 1.0, 16),
                rand([1, 4, 3, 3], 1.0, 17),
                rand([1, 4, 6, 6], 1.0, 18),
                rand([1, 3, 6, 6], 1.5, 19),
            ],
            &opts,
        ),
        "roi_align" => {
            let rois = vec![
                Roi {
                    batch: 0,
                    level: 0,
                    bbox: BBox::raw(3.3, 5.1, 20.7, 17.9),
                },
                Roi {
                    batch: 0,
                    level: 1,
                    bbox: BBox::raw(1.2, 0.4, 29.5, 30.1),
                },
            ];
            gradcheck(
                move |g, v| {
                    let spec = RoiAlignSpec {
                        output_size: 3,
                        sampling: 2,
                    };
                    let y = g.roi_align(&[v[0], v[1]], &[4.0, 8.0], rois.clone(), spec)?;
                    random_projection(g, y, 16)
                },
                &[rand([1, 3, 8, 8], 1.0, 20), rand([1, 3, 4, 4], 1.0, 21)],
                &opts,
            )
        }
        "iou_loss" => {
            let pred = Tensor4::new(
                [3, 4, 1, 1],
                vec![1.0, 2.0, 10.0, 12.0, 5.5, 4.0, 9.0, 15.0, 0.0, 0.0, 4.0, 3.0],
            )
            .expect("static shape");
            let gts = vec![BBox::raw(2.0, 1.0, 11.0, 10.0), BBox::raw(4.0, 5.0, 10.0, 13.0), BBox::raw(1.0, 1.0, 5.0, 5.0)];
            gradcheck(move |g, v| g.iou_loss(v[0], gts.clone()), &[pred], &opts)
        }
        "gcl_base_loss" => {
            let layout = ClassifierLayout::new(names(&["a", "b"]), 2);
            gradcheck(
                move |g, v| {
                    let terms = gcl_base_loss(g, v[0], &[0, 1, 2, 1, 0], &layout, &GclConfig::default())?;
                    Ok(terms.finish(g).0)
                },
                &[rand([5, 5, 1, 1], 3.0, 22)],
                &opts,
            )
        }
        "gcl_finetune_loss" => {
            let layout = ClassifierLayout::new(names(&["a", "b"]), 2)
                .activate(&names(&["n"]))
                .expect("one novel class fits two placeholders");
            let cfg = GclConfig {
                lambda_regularization: 0.01,
                ..GclConfig::default()
            };
            gradcheck(
                move |g, v| {
                    let logits = cosine_logits(g, v[0], v[1], cfg.scale, cfg.eps)?;
                    let terms = gcl_finetune_loss(g, logits, &[0, 1, 3, 2, 3], &layout, &cfg, v[1])?;
                    Ok(terms.finish(g).0)
                },
                &[rand([5, 6, 1, 1], 1.0, 23), rand([5, 6, 1, 1], 1.0, 24)],
                &opts,
            )
        }
        "detector_loss" => detector_loss_check(),
        _ => return None,
    };
    let tol = if op == "detector_loss" {
        COMPOSED_TOLERANCE
    } else {
        OP_TOLERANCE
    };
    Some(row(op, tol, t, r))
}

/// The full base-phase training loss of a micro detector, checked with
/// respect to a sample of coordinates in parameters from every module.
/// Stop-gradient reads (refined boxes, proposal choice) are replayed from an
/// unperturbed pass.
fn detector_loss_check() -> Result<GradcheckReport> {
    let det = Detector::new(DetectorConfig::micro(), names(&["a", "b"]), 3)?;
    let image = Tensor4::from_fn([1, 3, 64, 64], |_, c, y, x| {
        let inside = (14..38).contains(&x) && (10..30).contains(&y);
        if inside {
            0.8 - 0.3 * c as f64
        } else {
            ((x * 7 + y * 3 + c * 5) % 11) as f64 * 0.05 - 0.25
        }
    });
    let target = Target {
        boxes: vec![BBox::raw(14.0, 10.0, 38.0, 30.0)],
        nodes: vec![1],
        ignore: vec![],
    };
    let picks = [
        "backbone.c3.conv.weight",
        "neck.lateral4.weight",
        "neck.cbam.spatial.weight",
        "neck.fusion2.logits",
        "rpn.stage1.conv.weight",
        "rpn.stage3.deform.weight",
        "rpn.stage3.objectness.weight",
        "roi.fc2.weight",
        "roi.delta.weight",
        "classifier.weight",
    ];
    let ids: Vec<_> = picks.iter().map(|n| det.store.id(n).expect("registered parameter")).collect();
    let inputs: Vec<Tensor4> = ids.iter().map(|&id| det.store.get(id).clone()).collect();
    let opts = GradcheckOptions {
        max_coords: Some(12),
        seed: 5,
        ..GradcheckOptions::default()
    };
    let loss = |g: &mut Graph, v: &[Var]| {
        let mut b = det.store.bind(g, |_| true);
        for (&id, &var) in ids.iter().zip(v) {
            b.replace(id, var);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (loss, _) = det.training_loss(g, &b, &image, std::slice::from_ref(&target), LossPhase::Base, &mut rng)?;
        Ok(loss)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    loss(&mut g, &vars)?;
    let held = g.held();
    gradcheck(
        |g: &mut Graph, v: &[Var]| {
            g.replay(held.clone());
            loss(g, v)
        },
        &inputs,
        &opts,
    )
}

/// Every registered check, in registration order.
pub fn run_all() -> Vec<GradcheckRow> {
    OPS.iter().filter_map(|op| check(op)).collect()
}

/// Fixed-width table of check results.
pub fn format_table(rows: &[GradcheckRow]) -> String {
    let mut s = format!(
        "{:<20} {:>12} {:>10} {:>14} {:>14} {:>9} {:>7}  result\n",
        "op", "max_rel_err", "worst", "analytic", "numeric", "tol", "secs"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:>12.3e} {:>10} {:>14.6e} {:>14.6e} {:>9.0e} {:>7.2}  {}\n",
            r.op,
            r.max_rel_error,
            format!("{}[{}]", r.worst_input, r.worst_index),
            r.analytic,
            r.numeric,
            r.tolerance,
            r.seconds,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_check_passes() {
        let rows = run_all();
        assert_eq!(rows.len(), OPS.len());
        for r in &rows {
            assert!(r.passed, "{}", format_table(&rows));
        }
    }
}
