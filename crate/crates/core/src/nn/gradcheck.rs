//! Central finite-difference verification of analytic gradients.
//!
//! The relative error of one coordinate is
//! `|a − n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose true
//! gradient is (near) zero from dominating the report with round-off noise.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::init::uniform_seeded;
use crate::tensor::Tensor4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub floor: f64,
    /// Check at most this many coordinates per input (seeded subsample).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor4]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.scalar(out))
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `eps`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor4], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::invalid("gradcheck", "function must reduce to a scalar"));
    }
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor4> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor4::zeros(inputs[i].shape()));
        if let Some(index) = analytic.data().iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFiniteGradient { input: i, index });
        }
        let n = inputs[i].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = inputs[i].data()[idx];
            work[i].data_mut()[idx] = orig + opts.eps;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[idx] = orig - opts.eps;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.coords_checked == 1 {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Reduces `x` to a scalar through a fixed random linear functional, so a
/// gradient check exercises every output coordinate with a distinct weight.
pub fn random_projection(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = uniform_seeded(g.value(x).shape(), 1.0, seed);
    g.dot_const(x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor4::scalar(3.0);
        let r = gradcheck(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn non_finite_gradient_names_the_coordinate() {
        let x = Tensor4::new([1, 2, 1, 1], vec![1.0, f64::INFINITY]).unwrap();
        let err = gradcheck(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { input: 0, index: 1 }));
    }
}
