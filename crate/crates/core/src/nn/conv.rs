//! Dilated 2-D convolution via im2col + GEMM.
//!
//! Out-of-bounds taps read zero. Taps of output `(y, x)` sit at
//! `(y·stride + r·ky − pad, x·stride + r·kx − pad)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor4};

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride 1, padding chosen so a `kernel_size` conv at `dilation`
    /// preserves resolution.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            stride: 1,
            padding: dilation * (kernel_size - 1) / 2,
        }
    }

    pub fn strided(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            dilation: 1,
            stride,
            padding: (kernel_size - 1) / 2,
        }
    }

    pub fn receptive_field(&self) -> usize {
        (self.kernel_size - 1) * self.dilation + 1
    }

    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.dilation == 0 || self.stride == 0 {
            return Err(Error::invalid("conv2d", "dilation and stride must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("conv2d", "channel counts must be >= 1"));
        }
        Ok(())
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let rf = self.receptive_field();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < rf || pw < rf {
            return Err(Error::invalid(
                "conv2d",
                format!("input {h}x{w} (padded {ph}x{pw}) smaller than receptive field {rf}"),
            ));
        }
        Ok(((ph - rf) / self.stride + 1, (pw - rf) / self.stride + 1))
    }

    pub(crate) fn check(&self, input: &Tensor4, weight: &Tensor4, bias: Option<&Tensor4>) -> Result<(usize, usize)> {
        self.validate()?;
        if input.channels() != self.in_channels {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "input channels",
                expected: self.in_channels,
                got: input.channels(),
            });
        }
        let ws = self.weight_shape();
        for (i, (&e, &g)) in ws.iter().zip(weight.shape().iter()).enumerate() {
            if e != g {
                return Err(Error::Shape {
                    op: "conv2d",
                    dim: ["weight out_channels", "weight in_channels", "kernel height", "kernel width"][i],
                    expected: e,
                    got: g,
                });
            }
        }
        if let Some(b) = bias {
            if b.len() != self.out_channels {
                return Err(Error::Shape {
                    op: "conv2d",
                    dim: "bias length",
                    expected: self.out_channels,
                    got: b.len(),
                });
            }
        }
        self.output_size(input.height(), input.width())
    }
}

/// Fills `cols` (`C·K·K × OH·OW`, row-major) for batch item `b`.
fn im2col(input: &Tensor4, b: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f64]) {
    let (h, w) = (input.height() as isize, input.width() as isize);
    let k = spec.kernel_size;
    let p = oh * ow;
    let (s, r, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    for c in 0..spec.in_channels {
        let plane = input.plane(b, c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s + r * ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + r * kx as isize - pad;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the input-gradient item `b` (adjoint of
/// [`im2col`]).
fn col2im(cols: &[f64], spec: &ConvSpec, oh: usize, ow: usize, grad: &mut Tensor4, b: usize) {
    let (h, w) = (grad.height() as isize, grad.width() as isize);
    let k = spec.kernel_size;
    let p = oh * ow;
    let (s, r, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let plane_len = grad.plane_len();
    let item = grad.item_mut(b);
    for c in 0..spec.in_channels {
        let plane = &mut item[c * plane_len..(c + 1) * plane_len];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s + r * ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = ox as isize * s + r * kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `bias`, when given, is any tensor with
/// `out_channels` elements.
pub fn conv2d(input: &Tensor4, weight: &Tensor4, bias: Option<&Tensor4>, spec: &ConvSpec) -> Result<Tensor4> {
    let (oh, ow) = spec.check(input, weight, bias)?;
    let rows = spec.in_channels * spec.taps();
    let p = oh * ow;
    let mut out = Tensor4::zeros([input.batch(), spec.out_channels, oh, ow]);
    let mut cols = vec![0.0; rows * p];
    for b in 0..input.batch() {
        im2col(input, b, spec, oh, ow, &mut cols);
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

/// Gradients of a convolution w.r.t. its input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Tensor4>,
    pub weight: Option<Tensor4>,
    pub bias: Option<Tensor4>,
}

/// Reverse pass of [`conv2d`]; only the requested gradients are computed.
pub fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    grad_out: &Tensor4,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (oh, ow) = (grad_out.height(), grad_out.width());
    let rows = spec.in_channels * spec.taps();
    let p = oh * ow;
    let mut gi = want.0.then(|| Tensor4::zeros(input.shape()));
    let mut gw = want.1.then(|| Tensor4::zeros(weight.shape()));
    let mut gb = want.2.then(|| Tensor4::zeros([spec.out_channels, 1, 1, 1]));
    let mut cols = vec![0.0; rows * p];
    for b in 0..input.batch() {
        let go = grad_out.item(b);
        if let Some(gw) = gw.as_mut() {
            im2col(input, b, spec, oh, ow, &mut cols);
            // dW[O, rows] += dOut[O, P] · cols[rows, P]^T
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
        if let Some(gi) = gi.as_mut() {
            // dcols[rows, P] = W[O, rows]^T · dOut[O, P]
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
            col2im(&cols, spec, oh, ow, gi, b);
        }
        if let Some(gb) = gb.as_mut() {
            for o in 0..spec.out_channels {
                gb.data_mut()[o] += go[o * p..(o + 1) * p].iter().sum::<f64>();
            }
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{naive_conv2d, random_tensor};

    #[test]
    fn all_ones_three_by_three_sums_to_nine() {
        let x = Tensor4::full([1, 1, 3, 3], 1.0);
        let w = Tensor4::full([1, 1, 3, 3], 1.0);
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_size: 3,
            dilation: 1,
            stride: 1,
            padding: 0,
        };
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn dilation_two_covers_five_by_five() {
        let x = Tensor4::full([1, 1, 5, 5], 1.0);
        let w = Tensor4::full([1, 1, 3, 3], 1.0);
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_size: 3,
            dilation: 2,
            stride: 1,
            padding: 0,
        };
        assert_eq!(spec.receptive_field(), 5);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn matches_naive_oracle_random() {
        for (seed, r) in [(1u64, 1usize), (2, 2)] {
            let x = random_tensor([2, 3, 8, 8], seed);
            let w = random_tensor([4, 3, 3, 3], seed + 10);
            let spec = ConvSpec::same(3, 4, 3, r);
            let y = conv2d(&x, &w, None, &spec).unwrap();
            let y_ref = naive_conv2d(&x, &w, None, &spec);
            assert!(y.max_abs_diff(&y_ref) < 1e-6);
        }
    }

    #[test]
    fn strided_with_bias_matches_oracle() {
        let x = random_tensor([1, 2, 7, 6], 5);
        let w = random_tensor([3, 2, 3, 3], 6);
        let b = random_tensor([3, 1, 1, 1], 7);
        let spec = ConvSpec::strided(2, 3, 3, 2);
        let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let y_ref = naive_conv2d(&x, &w, Some(&b), &spec);
        assert_eq!(y.shape(), [1, 3, 4, 3]);
        assert!(y.max_abs_diff(&y_ref) < 1e-9);
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor4::zeros([1, 2, 5, 5]);
        let w = Tensor4::zeros([1, 3, 3, 3]);
        let spec = ConvSpec::same(3, 1, 3, 1);
        match conv2d(&x, &w, None, &spec) {
            Err(Error::Shape { dim, .. }) => assert_eq!(dim, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
        let spec = ConvSpec::same(2, 1, 3, 1);
        match conv2d(&x, &w, None, &spec) {
            Err(Error::Shape { dim, .. }) => assert_eq!(dim, "weight in_channels"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
