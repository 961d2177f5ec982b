//! Offset-only deformable convolution.
//!
//! Each kernel tap `k` of output `(y, x)` samples the input bilinearly at its
//! nominal dilated-grid position displaced by `(dy, dx)` read from offset
//! channels `2k` and `2k + 1`. Samples outside the image read zero.

use crate::error::{Error, Result};
use crate::nn::conv::{ConvGrads, ConvSpec};
use crate::tensor::{gemm, Tensor4};

/// Bilinear read of an `h × w` plane at fractional `(y, x)`; zero outside.
#[inline]
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (hf, wf) = (h as f64, w as f64);
    if y <= -1.0 || y >= hf || x <= -1.0 || x >= wf {
        return 0.0;
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    hy * hx * at(y0, x0) + hy * lx * at(y0, x0 + 1) + ly * hx * at(y0 + 1, x0) + ly * lx * at(y0 + 1, x0 + 1)
}

/// Corner indices and weights of a bilinear read, plus the partial
/// derivatives of the sampled value w.r.t. `y` and `x`.
struct Bilinear {
    corners: [(usize, f64); 4],
    count: usize,
    dy: f64,
    dx: f64,
}

#[inline]
fn bilinear_parts(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> Option<Bilinear> {
    let (hf, wf) = (h as f64, w as f64);
    if y <= -1.0 || y >= hf || x <= -1.0 || x >= wf {
        return None;
    }
    let (y0f, x0f) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0f, x - x0f);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let (y0, x0) = (y0f as isize, x0f as isize);
    let mut out = Bilinear {
        corners: [(0, 0.0); 4],
        count: 0,
        dy: 0.0,
        dx: 0.0,
    };
    // (dy, dx offsets, weight, d weight/dy, d weight/dx)
    let taps = [
        (0, 0, hy * hx, -hx, -hy),
        (0, 1, hy * lx, -lx, hy),
        (1, 0, ly * hx, hx, -ly),
        (1, 1, ly * lx, lx, ly),
    ];
    for (oy, ox, wt, dwy, dwx) in taps {
        let (yy, xx) = (y0 + oy, x0 + ox);
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            let idx = yy as usize * w + xx as usize;
            let v = plane[idx];
            out.corners[out.count] = (idx, wt);
            out.count += 1;
            out.dy += dwy * v;
            out.dx += dwx * v;
        }
    }
    Some(out)
}

fn check_offsets(input: &Tensor4, offsets: &Tensor4, spec: &ConvSpec, oh: usize, ow: usize) -> Result<()> {
    let want = 2 * spec.taps();
    if offsets.channels() != want {
        return Err(Error::Shape {
            op: "deformable_conv2d",
            dim: "offset channels (2 * kernel_size^2)",
            expected: want,
            got: offsets.channels(),
        });
    }
    if offsets.batch() != input.batch() {
        return Err(Error::Shape {
            op: "deformable_conv2d",
            dim: "offset batch",
            expected: input.batch(),
            got: offsets.batch(),
        });
    }
    if offsets.height() != oh || offsets.width() != ow {
        return Err(Error::Shape {
            op: "deformable_conv2d",
            dim: "offset spatial size",
            expected: oh * ow,
            got: offsets.height() * offsets.width(),
        });
    }
    Ok(())
}

#[inline]
fn tap_position(spec: &ConvSpec, oy: usize, ox: usize, ky: usize, kx: usize) -> (f64, f64) {
    let s = spec.stride as f64;
    let r = spec.dilation as f64;
    let pad = spec.padding as f64;
    (oy as f64 * s + r * ky as f64 - pad, ox as f64 * s + r * kx as f64 - pad)
}

fn deform_im2col(input: &Tensor4, offsets: &Tensor4, b: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f64]) {
    let (h, w) = (input.height(), input.width());
    let k = spec.kernel_size;
    let p = oh * ow;
    for c in 0..spec.in_channels {
        let plane = input.plane(b, c);
        for ky in 0..k {
            for kx in 0..k {
                let tap = ky * k + kx;
                let off_y = offsets.plane(b, 2 * tap);
                let off_x = offsets.plane(b, 2 * tap + 1);
                let row = c * k * k + tap;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i = oy * ow + ox;
                        let (py, px) = tap_position(spec, oy, ox, ky, kx);
                        dst[i] = bilinear_sample(plane, h, w, py + off_y[i], px + off_x[i]);
                    }
                }
            }
        }
    }
}

/// Forward deformable convolution. With all-zero offsets this reduces to
/// [`conv2d`](crate::nn::conv2d).
pub fn deformable_conv2d(
    input: &Tensor4,
    weight: &Tensor4,
    bias: Option<&Tensor4>,
    offsets: &Tensor4,
    spec: &ConvSpec,
) -> Result<Tensor4> {
    let (oh, ow) = spec.check(input, weight, bias)?;
    check_offsets(input, offsets, spec, oh, ow)?;
    let rows = spec.in_channels * spec.taps();
    let p = oh * ow;
    let mut out = Tensor4::zeros([input.batch(), spec.out_channels, oh, ow]);
    let mut cols = vec![0.0; rows * p];
    for b in 0..input.batch() {
        deform_im2col(input, offsets, b, spec, oh, ow, &mut cols);
        let dst = out.item_mut(b);
        gemm(
            spec.out_channels,
            rows,
            p,
            1.0,
            weight.data(),
            (rows as isize, 1),
            &cols,
            (p as isize, 1),
            0.0,
            dst,
        );
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Reverse pass of [`deformable_conv2d`]: returns the convolution gradients
/// and the offset gradient.
pub fn deformable_conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    offsets: &Tensor4,
    spec: &ConvSpec,
    grad_out: &Tensor4,
    want: (bool, bool, bool, bool),
) -> (ConvGrads, Option<Tensor4>) {
    let (want_input, want_weight, want_bias, want_offsets) = want;
    let (oh, ow) = (grad_out.height(), grad_out.width());
    let (h, w) = (input.height(), input.width());
    let k = spec.kernel_size;
    let rows = spec.in_channels * spec.taps();
    let p = oh * ow;
    let mut gi = want_input.then(|| Tensor4::zeros(input.shape()));
    let mut gw = want_weight.then(|| Tensor4::zeros(weight.shape()));
    let mut gb = want_bias.then(|| Tensor4::zeros([spec.out_channels, 1, 1, 1]));
    let mut go_off = want_offsets.then(|| Tensor4::zeros(offsets.shape()));
    let mut cols = vec![0.0; rows * p];
    for b in 0..input.batch() {
        let go = grad_out.item(b);
        if let Some(gw) = gw.as_mut() {
            deform_im2col(input, offsets, b, spec, oh, ow, &mut cols);
            gemm(
                spec.out_channels,
                p,
                rows,
                1.0,
                go,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                1.0,
                gw.data_mut(),
            );
        }
        if let Some(gb) = gb.as_mut() {
            for o in 0..spec.out_channels {
                gb.data_mut()[o] += go[o * p..(o + 1) * p].iter().sum::<f64>();
            }
        }
        if gi.is_none() && go_off.is_none() {
            continue;
        }
        gemm(
            rows,
            spec.out_channels,
            p,
            1.0,
            weight.data(),
            (1, rows as isize),
            go,
            (p as isize, 1),
            0.0,
            &mut cols,
        );
        let plane_len = h * w;
        for c in 0..spec.in_channels {
            let plane = input.plane(b, c);
            for ky in 0..k {
                for kx in 0..k {
                    let tap = ky * k + kx;
                    let row = c * k * k + tap;
                    let dcol = &cols[row * p..(row + 1) * p];
                    let off_y_start = offsets.offset(b, 2 * tap, 0, 0);
                    let off_x_start = offsets.offset(b, 2 * tap + 1, 0, 0);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let i = oy * ow + ox;
                            let g = dcol[i];
                            if g == 0.0 {
                                continue;
                            }
                            let (py, px) = tap_position(spec, oy, ox, ky, kx);
                            let dy = offsets.data()[off_y_start + i];
                            let dx = offsets.data()[off_x_start + i];
                            let Some(parts) = bilinear_parts(plane, h, w, py + dy, px + dx) else {
                                continue;
                            };
                            if let Some(gi) = gi.as_mut() {
                                let base = gi.offset(b, c, 0, 0);
                                let dst = &mut gi.data_mut()[base..base + plane_len];
                                for &(idx, wt) in &parts.corners[..parts.count] {
                                    dst[idx] += g * wt;
                                }
                            }
                            if let Some(goff) = go_off.as_mut() {
                                goff.data_mut()[off_y_start + i] += g * parts.dy;
                                goff.data_mut()[off_x_start + i] += g * parts.dx;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        ConvGrads {
            input: gi,
            weight: gw,
            bias: gb,
        },
        go_off,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv2d;
    use crate::nn::testutil::random_tensor;

    #[test]
    fn zero_offsets_equal_standard_conv() {
        for r in [1, 2] {
            let x = random_tensor([2, 3, 7, 6], 3);
            let w = random_tensor([4, 3, 3, 3], 4);
            let b = random_tensor([4, 1, 1, 1], 5);
            let spec = ConvSpec::same(3, 4, 3, r);
            let off = Tensor4::zeros([2, 18, 7, 6]);
            let d = deformable_conv2d(&x, &w, Some(&b), &off, &spec).unwrap();
            let c = conv2d(&x, &w, Some(&b), &spec).unwrap();
            assert!(d.max_abs_diff(&c) < 1e-6);
        }
    }

    #[test]
    fn integer_offsets_on_constant_input_match_conv() {
        let x = Tensor4::full([1, 2, 9, 9], 1.5);
        let w = random_tensor([2, 2, 3, 3], 8);
        let spec = ConvSpec::same(2, 2, 3, 1);
        // shifts of ±1 that keep every tap inside the image for the central
        // 5x5 outputs
        let off = Tensor4::from_fn([1, 18, 9, 9], |_, c, _, _| if c % 2 == 0 { 1.0 } else { -1.0 });
        let d = deformable_conv2d(&x, &w, None, &off, &spec).unwrap();
        let c = conv2d(&x, &w, None, &spec).unwrap();
        for o in 0..2 {
            for y in 2..7 {
                for xx in 2..7 {
                    assert!((d.at(0, o, y, xx) - c.at(0, o, y, xx)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn half_pixel_offset_on_ramp() {
        // f(y, x) = y; single tap, weight 1, offset (dy, dx) = (+0.5, 0)
        let x = Tensor4::from_fn([1, 1, 6, 6], |_, _, y, _| y as f64);
        let w = Tensor4::full([1, 1, 1, 1], 1.0);
        let spec = ConvSpec::same(1, 1, 1, 1);
        let off = Tensor4::from_fn([1, 2, 6, 6], |_, c, _, _| if c == 0 { 0.5 } else { 0.0 });
        let out = deformable_conv2d(&x, &w, None, &off, &spec).unwrap();
        for y in 0..5 {
            for xx in 0..6 {
                assert!((out.at(0, 0, y, xx) - (y as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_offset_channels_is_an_error() {
        let x = Tensor4::zeros([1, 1, 4, 4]);
        let w = Tensor4::zeros([1, 1, 3, 3]);
        let spec = ConvSpec::same(1, 1, 3, 1);
        let off = Tensor4::zeros([1, 9, 4, 4]);
        match deformable_conv2d(&x, &w, None, &off, &spec) {
            Err(Error::Shape { expected, got, .. }) => assert_eq!((expected, got), (18, 9)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bilinear_is_zero_outside_and_exact_on_grid() {
        let plane = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_sample(&plane, 2, 2, 1.0, 1.0), 4.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, -1.0, 0.0), 0.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.5, 0.5), 2.5);
        // half a pixel past the border blends with the zero padding
        assert_eq!(bilinear_sample(&plane, 2, 2, 1.5, 1.0), 2.0);
    }
}
