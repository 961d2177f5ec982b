//! Differentiable numeric kernels: (dilated) convolution, deformable
//! convolution, bilinear upsampling, pooling, parameter initialisation and a
//! finite-difference gradient checker.

mod conv;
mod deform;
pub mod gradcheck;
pub mod init;
mod pool;
mod upsample;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use deform::{bilinear_sample, deformable_conv2d, deformable_conv2d_backward};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use pool::{channel_max_with_argmax, channel_mean, global_avg_pool, global_max_pool, global_max_pool_with_argmax};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::nn::ConvSpec;
    use crate::tensor::Tensor4;

    /// Uniform values in `[-1, 1)` from a fixed seed.
    pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4 {
        super::init::uniform_seeded(shape, 1.0, seed)
    }

    /// Direct loop convolution.
    pub fn naive_conv2d(x: &Tensor4, w: &Tensor4, bias: Option<&Tensor4>, spec: &ConvSpec) -> Tensor4 {
        let [n, ci, h, wd] = x.shape();
        let k = spec.kernel_size;
        let (oh, ow) = spec.output_size(h, wd).unwrap();
        let mut out = Tensor4::zeros([n, spec.out_channels, oh, ow]);
        for b in 0..n {
            for o in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(b, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(b, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }
}
