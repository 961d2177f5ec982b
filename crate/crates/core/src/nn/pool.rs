//! Global spatial pooling and per-location channel reductions.

use crate::tensor::Tensor4;

/// Mean over all spatial positions; output `(n, c, 1, 1)`.
pub fn global_avg_pool(input: &Tensor4) -> Tensor4 {
    let [n, c, _, _] = input.shape();
    let hw = input.plane_len() as f64;
    Tensor4::from_fn([n, c, 1, 1], |b, ch, _, _| input.plane(b, ch).iter().sum::<f64>() / hw)
}

/// Max over all spatial positions with the flat in-plane index of the
/// winner (first occurrence on ties).
pub fn global_max_pool_with_argmax(input: &Tensor4) -> (Tensor4, Vec<usize>) {
    let [n, c, _, _] = input.shape();
    let mut arg = Vec::with_capacity(n * c);
    let mut out = Tensor4::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let (i, v) = argmax(input.plane(b, ch));
            out.set(b, ch, 0, 0, v);
            arg.push(i);
        }
    }
    (out, arg)
}

pub fn global_max_pool(input: &Tensor4) -> Tensor4 {
    global_max_pool_with_argmax(input).0
}

/// Mean across channels at each location; output `(n, 1, h, w)`.
pub fn channel_mean(input: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor4::zeros([n, 1, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let base = out.offset(b, 0, 0, 0);
            for (d, s) in out.data_mut()[base..base + h * w].iter_mut().zip(src) {
                *d += s / c as f64;
            }
        }
    }
    out
}

/// Max across channels at each location plus the winning channel index.
pub fn channel_max_with_argmax(input: &Tensor4) -> (Tensor4, Vec<usize>) {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor4::full([n, 1, h, w], f64::NEG_INFINITY);
    let mut arg = vec![0usize; n * h * w];
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let base = b * h * w;
            for (i, &s) in src.iter().enumerate() {
                if s > out.data()[base + i] {
                    out.data_mut()[base + i] = s;
                    arg[base + i] = ch;
                }
            }
        }
    }
    (out, arg)
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor4 {
        Tensor4::new([1, 2, 2, 2], vec![4.0, 4.0, 4.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn average() {
        assert_eq!(global_avg_pool(&sample()).data(), &[4.0, 2.5]);
    }

    #[test]
    fn maximum() {
        assert_eq!(global_max_pool(&sample()).data(), &[4.0, 4.0]);
    }

    #[test]
    fn singleton_is_identity() {
        let t = Tensor4::full([1, 1, 1, 1], -2.25);
        assert_eq!(global_avg_pool(&t).data(), &[-2.25]);
        assert_eq!(global_max_pool(&t).data(), &[-2.25]);
    }

    #[test]
    fn channel_reductions() {
        let t = sample();
        assert_eq!(channel_mean(&t).data(), &[2.5, 3.0, 3.5, 4.0]);
        let (m, arg) = channel_max_with_argmax(&t);
        assert_eq!(m.data(), &[4.0, 4.0, 4.0, 4.0]);
        assert_eq!(arg, vec![0, 0, 0, 0]);
    }
}
