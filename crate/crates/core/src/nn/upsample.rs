//! Bilinear upsampling with half-pixel centers.
//!
//! Output pixel `d` along an axis maps to source coordinate
//! `(d + 0.5) / factor − 0.5`, clamped below at 0; the upper neighbour is
//! clamped to the last row/column (edge replication). This is the
//! `align_corners = false` convention.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Per-output-index `(lo, hi, weight_hi)` along one axis.
fn axis_table(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_upsample(input: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor < 2 {
        return Err(Error::invalid("bilinear_upsample", format!("factor {factor} must be >= 2")));
    }
    let [n, c, h, w] = input.shape();
    let ty = axis_table(h, factor);
    let tx = axis_table(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            let plane = input.plane(b, ch);
            for &(y0, y1, wy) in &ty {
                for &(x0, x1, wx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    out.data_mut()[i] = top * (1.0 - wy) + bot * wy;
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`].
pub fn bilinear_upsample_backward(input_shape: [usize; 4], factor: usize, grad_out: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = input_shape;
    let ty = axis_table(h, factor);
    let tx = axis_table(w, factor);
    let mut gi = Tensor4::zeros(input_shape);
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            let base = gi.offset(b, ch, 0, 0);
            let plane = &mut gi.data_mut()[base..base + h * w];
            for &(y0, y1, wy) in &ty {
                for &(x0, x1, wx) in &tx {
                    let g = grad_out.data()[i];
                    i += 1;
                    plane[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                    plane[y0 * w + x1] += g * (1.0 - wy) * wx;
                    plane[y1 * w + x0] += g * wy * (1.0 - wx);
                    plane[y1 * w + x1] += g * wy * wx;
                }
            }
        }
    }
    gi
}
