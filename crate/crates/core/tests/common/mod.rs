//! Loop-level reference implementations used as test oracles.
#![allow(dead_code)]

use fsdet::boxes::BBox;
use fsdet::nn::ConvSpec;
use fsdet::Tensor4;

/// Direct seven-loop convolution.
pub fn naive_conv2d(x: &Tensor4, w: &Tensor4, b: Option<&Tensor4>, s: &ConvSpec) -> Tensor4 {
    let [n, c, h, wd] = x.shape();
    let k = s.kernel_size;
    let span = s.dilation * (k - 1) + 1;
    let oh = (h + 2 * s.padding - span) / s.stride + 1;
    let ow = (wd + 2 * s.padding - span) / s.stride + 1;
    let mut out = Tensor4::zeros([n, s.out_channels, oh, ow]);
    for bi in 0..n {
        for o in 0..s.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map(|b| b.at(0, o, 0, 0)).unwrap_or(0.0);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, ci, ky, kx) * x.at(bi, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(bi, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Channel then spatial attention, recomputed element by element. MLP
/// weights are `(out, in, 1, 1)`, biases `(1, out, 1, 1)`, the spatial
/// kernel `(1, 2, 7, 7)` over `[mean, max]`.
pub fn naive_cbam(f: &Tensor4, w1: &Tensor4, b1: &Tensor4, w2: &Tensor4, b2: &Tensor4, sw: &Tensor4, sb: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = f.shape();
    let hidden = w1.batch();
    let mlp = |v: &[f64]| -> Vec<f64> {
        let hv: Vec<f64> = (0..hidden)
            .map(|j| (b1.at(0, j, 0, 0) + (0..c).map(|i| w1.at(j, i, 0, 0) * v[i]).sum::<f64>()).max(0.0))
            .collect();
        (0..c)
            .map(|i| b2.at(0, i, 0, 0) + (0..hidden).map(|j| w2.at(i, j, 0, 0) * hv[j]).sum::<f64>())
            .collect()
    };
    let mut out = Tensor4::zeros(f.shape());
    for b in 0..n {
        let mut avg = vec![0.0; c];
        let mut mx = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = f.at(b, ch, y, x);
                    avg[ch] += v / (h * w) as f64;
                    mx[ch] = mx[ch].max(v);
                }
            }
        }
        let (ma, mm) = (mlp(&avg), mlp(&mx));
        let mc: Vec<f64> = (0..c).map(|i| sigmoid(ma[i] + mm[i])).collect();
        let f1 = |ch: usize, y: usize, x: usize| mc[ch] * f.at(b, ch, y, x);
        let mut desc = vec![[0.0f64; 2]; h * w];
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| f1(ch, y, x)).collect();
                desc[y * w + x] = [
                    vals.iter().sum::<f64>() / c as f64,
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                ];
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = sb.at(0, 0, 0, 0);
                for d in 0..2 {
                    for ky in 0..7 {
                        for kx in 0..7 {
                            let (iy, ix) = (y as isize + ky as isize - 3, x as isize + kx as isize - 3);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += sw.at(0, d, ky, kx) * desc[iy as usize * w + ix as usize][d];
                        }
                    }
                }
                let ms = sigmoid(acc);
                for ch in 0..c {
                    out.set(b, ch, y, x, ms * f1(ch, y, x));
                }
            }
        }
    }
    out
}

/// One detection for the AP oracle: `(image, box, score)`.
pub type Det = (usize, BBox, f64);
/// One ground truth: `(image, box)`.
pub type Gt = (usize, BBox);

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// AP by exhaustive search over every injective detection-to-gt assignment
/// with IoU ≥ `thr`. The protocol's assignment is the one whose sequence of
/// `(matched, IoU, −gt index)` in descending score order is
/// lexicographically largest. AP is then
/// `(1/G) Σ_{j=1..G} max{precision@k : TP@k ≥ j}`.
pub fn brute_force_ap(dets: &[Det], gts: &[Gt], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.total_cmp(&dets[a].2).then(a.cmp(&b)));
    let mut best: Option<(Vec<(u8, f64, i64)>, Vec<Option<usize>>)> = None;
    let mut assign = vec![None; order.len()];
    let mut used = vec![false; gts.len()];
    fn rec(
        i: usize,
        order: &[usize],
        dets: &[Det],
        gts: &[Gt],
        thr: f64,
        assign: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut Option<(Vec<(u8, f64, i64)>, Vec<Option<usize>>)>,
    ) {
        if i == order.len() {
            let key: Vec<(u8, f64, i64)> = order
                .iter()
                .zip(assign.iter())
                .map(|(&d, a)| match a {
                    Some(j) => (1, box_iou(&dets[d].1, &gts[*j].1), -(*j as i64)),
                    None => (0, 0.0, 0),
                })
                .collect();
            let better = match best {
                None => true,
                Some((k, _)) => key.partial_cmp(k) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some((key, assign.clone()));
            }
            return;
        }
        let d = order[i];
        assign[i] = None;
        rec(i + 1, order, dets, gts, thr, assign, used, best);
        for j in 0..gts.len() {
            if !used[j] && gts[j].0 == dets[d].0 && box_iou(&dets[d].1, &gts[j].1) >= thr {
                used[j] = true;
                assign[i] = Some(j);
                rec(i + 1, order, dets, gts, thr, assign, used, best);
                assign[i] = None;
                used[j] = false;
            }
        }
    }
    rec(0, &order, dets, gts, thr, &mut assign, &mut used, &mut best);
    let (_, assign) = best.expect("the empty assignment always exists");
    let g = gts.len();
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, a) in assign.iter().enumerate() {
        if a.is_some() {
            tp += 1;
        }
        points.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    for j in 1..=g {
        let p = points.iter().filter(|(t, _)| *t >= j).map(|(_, p)| *p).fold(0.0, f64::max);
        ap += p / g as f64;
    }
    Some(ap)
}

pub fn max_abs_diff(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
