//! RoIAlign over a multi-level pyramid.
//!
//! Box corners are mapped to feature coordinates with a half-pixel shift
//! (`x·scale − 0.5`). Each output bin averages a `sampling × sampling` grid
//! of bilinear samples; samples beyond one pixel outside the map read zero,
//! samples in the border band are clamped to the edge.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// One region to pool: image `batch` of pyramid `level`, box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub level: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignSpec {
    pub output_size: usize,
    pub sampling: usize,
}

impl Default for RoiAlignSpec {
    fn default() -> Self {
        Self {
            output_size: 7,
            sampling: 2,
        }
    }
}

/// Pyramid level for a box: `clamp(⌊4 + log2(√area / canonical)⌋, lo, hi)`.
pub fn assign_level(b: &BBox, canonical: f64, lo: usize, hi: usize) -> usize {
    let s = b.area().max(1e-6).sqrt();
    let l = (4.0 + (s / canonical).log2() + 1e-9).floor();
    (l.max(lo as f64) as usize).min(hi)
}

#[inline]
fn corners(h: usize, w: usize, y: f64, x: f64) -> Option<[(usize, f64); 4]> {
    let (hf, wf) = (h as f64, w as f64);
    if y < -1.0 || y > hf || x < -1.0 || x > wf {
        return None;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y as usize;
    let mut x0 = x as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ])
}

/// Visits every `(output bin index, plane index, weight)` contribution of
/// one RoI on an `h × w` map.
fn for_each_sample(
    roi: &BBox,
    scale: f64,
    h: usize,
    w: usize,
    spec: &RoiAlignSpec,
    mut f: impl FnMut(usize, usize, f64),
) {
    let out = spec.output_size;
    let sr = spec.sampling;
    let x1 = roi.x1 * scale - 0.5;
    let y1 = roi.y1 * scale - 0.5;
    let bin_w = ((roi.x2 - roi.x1) * scale).max(1e-6) / out as f64;
    let bin_h = ((roi.y2 - roi.y1) * scale).max(1e-6) / out as f64;
    let norm = 1.0 / (sr * sr) as f64;
    for py in 0..out {
        for px in 0..out {
            let bin = py * out + px;
            for iy in 0..sr {
                let y = y1 + (py as f64 + (iy as f64 + 0.5) / sr as f64) * bin_h;
                for ix in 0..sr {
                    let x = x1 + (px as f64 + (ix as f64 + 0.5) / sr as f64) * bin_w;
                    if let Some(cs) = corners(h, w, y, x) {
                        for (idx, wt) in cs {
                            if wt != 0.0 {
                                f(bin, idx, wt * norm);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check(levels: &[&Tensor4], strides: &[f64], rois: &[Roi]) -> Result<usize> {
    if levels.is_empty() || levels.len() != strides.len() {
        return Err(Error::invalid("roi_align", "one stride per pyramid level required"));
    }
    let c = levels[0].channels();
    if let Some(l) = levels.iter().find(|l| l.channels() != c) {
        return Err(Error::Shape {
            op: "roi_align",
            dim: "level channels",
            expected: c,
            got: l.channels(),
        });
    }
    for r in rois {
        let Some(map) = levels.get(r.level) else {
            return Err(Error::invalid("roi_align", format!("level index {} out of range", r.level)));
        };
        if r.batch >= map.batch() {
            return Err(Error::invalid("roi_align", format!("batch index {} out of range", r.batch)));
        }
        let img_w = map.width() as f64 * strides[r.level];
        let img_h = map.height() as f64 * strides[r.level];
        let b = &r.bbox;
        if !b.is_valid() || b.x2 <= 0.0 || b.y2 <= 0.0 || b.x1 >= img_w || b.y1 >= img_h {
            return Err(Error::invalid(
                "roi_align",
                format!("box {b:?} lies outside the {img_w}x{img_h} image"),
            ));
        }
    }
    Ok(c)
}

/// Pools every RoI to `(R, C, out, out)`.
pub fn roi_align(levels: &[&Tensor4], strides: &[f64], rois: &[Roi], spec: &RoiAlignSpec) -> Result<Tensor4> {
    let c = check(levels, strides, rois)?;
    if rois.is_empty() {
        return Err(Error::invalid("roi_align", "no regions to pool"));
    }
    let out = spec.output_size;
    let bins = out * out;
    let mut result = Tensor4::zeros([rois.len(), c, out, out]);
    for (r, roi) in rois.iter().enumerate() {
        let map = levels[roi.level];
        let (h, w) = (map.height(), map.width());
        let dst = result.item_mut(r);
        for ch in 0..c {
            let plane = map.plane(roi.batch, ch);
            let cell = &mut dst[ch * bins..(ch + 1) * bins];
            for_each_sample(&roi.bbox, 1.0 / strides[roi.level], h, w, spec, |bin, idx, wt| {
                cell[bin] += wt * plane[idx];
            });
        }
    }
    Ok(result)
}

/// Gradient of [`roi_align`] w.r.t. each level's features.
pub fn roi_align_backward(
    shapes: &[[usize; 4]],
    strides: &[f64],
    rois: &[Roi],
    spec: &RoiAlignSpec,
    grad_out: &Tensor4,
) -> Vec<Tensor4> {
    let mut grads: Vec<Tensor4> = shapes.iter().map(|&s| Tensor4::zeros(s)).collect();
    let out = spec.output_size;
    let bins = out * out;
    for (r, roi) in rois.iter().enumerate() {
        let g = &mut grads[roi.level];
        let [_, c, h, w] = g.shape();
        let go = grad_out.item(r);
        for ch in 0..c {
            let base = g.offset(roi.batch, ch, 0, 0);
            let plane = &mut g.data_mut()[base..base + h * w];
            let cell = &go[ch * bins..(ch + 1) * bins];
            for_each_sample(&roi.bbox, 1.0 / strides[roi.level], h, w, spec, |bin, idx, wt| {
                plane[idx] += wt * cell[bin];
            });
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_pools_to_constant() {
        let map = Tensor4::full([1, 3, 8, 8], 2.5);
        let rois = [
            Roi {
                batch: 0,
                level: 0,
                bbox: BBox::raw(3.0, 5.0, 17.0, 29.0),
            },
            Roi {
                batch: 0,
                level: 0,
                bbox: BBox::raw(0.0, 0.0, 32.0, 32.0),
            },
        ];
        let out = roi_align(&[&map], &[4.0], &rois, &RoiAlignSpec::default()).unwrap();
        assert_eq!(out.shape(), [2, 3, 7, 7]);
        assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn full_map_on_ramp_matches_sample_oracle() {
        // f(y, x) = x on a 7x7 map with stride 1; full-map box, 7x7 output,
        // one sample per bin lands exactly on pixel centres
        let map = Tensor4::from_fn([1, 1, 7, 7], |_, _, _, x| x as f64);
        let roi = Roi {
            batch: 0,
            level: 0,
            bbox: BBox::raw(0.0, 0.0, 7.0, 7.0),
        };
        let spec = RoiAlignSpec {
            output_size: 7,
            sampling: 1,
        };
        let out = roi_align(&[&map], &[1.0], &[roi], &spec).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                assert!((out.at(0, 0, y, x) - x as f64).abs() < 1e-12);
            }
        }
        // two samples per bin along a ramp average to the same centre value
        // except where the left-most sample clamps at the border
        let spec = RoiAlignSpec {
            output_size: 7,
            sampling: 2,
        };
        let out = roi_align(&[&map], &[1.0], &[roi], &spec).unwrap();
        // bin 0 samples x = -0.25 (clamped to 0) and 0.25 -> 0.125
        assert!((out.at(0, 0, 3, 0) - 0.125).abs() < 1e-12);
        for x in 1..6 {
            assert!((out.at(0, 0, 3, x) - x as f64).abs() < 1e-12);
        }
        // bin 6 samples 5.75 and 6.25 (clamped to 6) -> 5.875
        assert!((out.at(0, 0, 3, 6) - 5.875).abs() < 1e-12);
    }

    #[test]
    fn box_outside_image_is_rejected() {
        let map = Tensor4::zeros([1, 1, 4, 4]);
        let roi = Roi {
            batch: 0,
            level: 0,
            bbox: BBox::raw(40.0, 40.0, 50.0, 50.0),
        };
        assert!(roi_align(&[&map], &[8.0], &[roi], &RoiAlignSpec::default()).is_err());
    }

    #[test]
    fn level_rule() {
        let b = |s: f64| BBox::raw(0.0, 0.0, s, s);
        assert_eq!(assign_level(&b(224.0), 224.0, 2, 5), 4);
        assert_eq!(assign_level(&b(112.0), 224.0, 2, 5), 3);
        assert_eq!(assign_level(&b(10.0), 224.0, 2, 5), 2);
        assert_eq!(assign_level(&b(2000.0), 224.0, 2, 5), 5);
    }
}
