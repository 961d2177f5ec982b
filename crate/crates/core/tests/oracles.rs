mod common;

use proptest::prelude::*;

use common::{brute_force_ap, max_abs_diff, naive_cbam, naive_conv2d, Det, Gt};
use fsdet::boxes::BBox;
use fsdet::cfpan::{apply_cbam, fusion_weights, simplex_violation, CbamVars};
use fsdet::evaluation::{average_precision, iou, nms, GroundTruth, ScoredBox};
use fsdet::graph::Graph;
use fsdet::nn::init::uniform_seeded;
use fsdet::nn::{conv2d, deformable_conv2d, ConvSpec};
use fsdet::Tensor4;

fn conv_case() -> impl Strategy<Value = (ConvSpec, usize, usize, u64)> {
    (1usize..4, 1usize..4, prop_oneof![Just(1usize), Just(3), Just(5)], 1usize..4, 1usize..3, 0usize..4, 0usize..5, 0usize..5, any::<u64>())
        .prop_map(|(cin, cout, k, dilation, stride, padding, eh, ew, seed)| {
            let span = dilation * (k - 1) + 1;
            let spec = ConvSpec {
                in_channels: cin,
                out_channels: cout,
                kernel_size: k,
                dilation,
                stride,
                padding,
            };
            (spec, span + eh, span + ew, seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_naive((spec, h, w, seed) in conv_case()) {
        let x = uniform_seeded([2, spec.in_channels, h, w], 1.0, seed);
        let wt = uniform_seeded([spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size], 1.0, seed ^ 1);
        let b = uniform_seeded([1, spec.out_channels, 1, 1], 1.0, seed ^ 2);
        let fast = conv2d(&x, &wt, Some(&b), &spec).unwrap();
        prop_assert!(max_abs_diff(&fast, &naive_conv2d(&x, &wt, Some(&b), &spec)) < 1e-9);
    }

    #[test]
    fn deform_with_zero_offsets_is_conv(k in prop_oneof![Just(1usize), Just(3)], dilation in 1usize..3, h in 5usize..10, w in 5usize..10, seed: u64) {
        let spec = ConvSpec::same(2, 3, k, dilation);
        let x = uniform_seeded([1, 2, h, w], 1.0, seed);
        let wt = uniform_seeded([3, 2, k, k], 1.0, seed ^ 1);
        let off = Tensor4::zeros([1, 2 * k * k, h, w]);
        let d = deformable_conv2d(&x, &wt, None, &off, &spec).unwrap();
        prop_assert!(max_abs_diff(&d, &naive_conv2d(&x, &wt, None, &spec)) < 1e-9);
    }

    #[test]
    fn cbam_matches_naive(c in 2usize..7, h in 1usize..8, w in 1usize..8, seed: u64) {
        let hid = (c / 2).max(1);
        let ts = [
            uniform_seeded([2, c, h, w], 2.0, seed),
            uniform_seeded([hid, c, 1, 1], 1.0, seed ^ 1),
            uniform_seeded([1, hid, 1, 1], 0.5, seed ^ 2),
            uniform_seeded([c, hid, 1, 1], 1.0, seed ^ 3),
            uniform_seeded([1, c, 1, 1], 0.5, seed ^ 4),
            uniform_seeded([1, 2, 7, 7], 0.3, seed ^ 5),
            uniform_seeded([1, 1, 1, 1], 0.5, seed ^ 6),
        ];
        let mut g = Graph::new();
        let v: Vec<_> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let p = CbamVars { mlp_w1: v[1], mlp_b1: v[2], mlp_w2: v[3], mlp_b2: v[4], spatial_w: v[5], spatial_b: v[6] };
        let out = apply_cbam(&mut g, v[0], &p).unwrap();
        let naive = naive_cbam(&ts[0], &ts[1], &ts[2], &ts[3], &ts[4], &ts[5], &ts[6]);
        prop_assert!(max_abs_diff(g.value(out), &naive) < 1e-9);
    }

    #[test]
    fn fusion_weights_on_simplex(h in 1usize..6, w in 1usize..6, scale in 0.01f64..200.0, seed: u64) {
        let l = uniform_seeded([2, 3, h, w], scale, seed);
        let mut g = Graph::new();
        let v = g.constant(l.clone());
        let a = fusion_weights(&mut g, v).unwrap();
        prop_assert!(simplex_violation(&[&l]) < 1e-9);
        prop_assert!(g.value(a).data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..20.0, 0.0f64..20.0, 2.0f64..15.0, 2.0f64..15.0).prop_map(|(x, y, w, h)| BBox::raw(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ap_matches_exhaustive_matching(
        gts in prop::collection::vec((0usize..2, bbox()), 1..5),
        dets in prop::collection::vec((0usize..2, bbox(), 0.0f64..1.0), 0..5),
        thr in prop_oneof![Just(0.1), Just(0.3), Just(0.5)],
    ) {
        let gts: Vec<Gt> = gts;
        let dets: Vec<Det> = dets;
        let fast = average_precision(
            &dets.iter().map(|&(image, bbox, score)| ScoredBox { image, bbox, score }).collect::<Vec<_>>(),
            &gts.iter().map(|&(image, bbox)| GroundTruth { image, bbox, difficult: false }).collect::<Vec<_>>(),
            thr,
        ).unwrap();
        let oracle = brute_force_ap(&dets, &gts, thr).unwrap();
        prop_assert!((fast - oracle).abs() < 1e-12, "fast {fast} oracle {oracle}");
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let x = iou(&a, &b);
        prop_assert!((x - iou(&b, &a)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_no_overlapping_pair(boxes in prop::collection::vec(bbox(), 0..12), seed: u64, thr in 0.1f64..0.9) {
        let scores = uniform_seeded([1, 1, 1, boxes.len().max(1)], 1.0, seed).data().to_vec();
        let kept = nms(&boxes, &scores[..boxes.len()], thr);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(iou(&boxes[a], &boxes[b]) <= thr);
                prop_assert!(scores[a] >= scores[b]);
            }
        }
        for j in 0..boxes.len() {
            if !kept.contains(&j) {
                prop_assert!(kept.iter().any(|&k| scores[k] >= scores[j] && iou(&boxes[k], &boxes[j]) > thr));
            }
        }
    }
}
