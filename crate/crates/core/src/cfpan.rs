//! The neck: CBAM attention on the top pyramid level followed by top-down
//! fusion in which every fused level mixes three sources with pointwise
//! weights that sum to one.
//!
//! For level `n ∈ {2, 3, 4}`:
//!
//! ```text
//! (α, β, γ) = softmax(Lα, Lβ, Lγ)         pointwise at level-n resolution
//! P_n = α ⊗ U(P_{n+1}) + β ⊗ U(Lat_{n+1}(C_{n+1})) + γ ⊗ Lat_n(C_n)
//! ```
//!
//! and `P5 = CBAM(Lat_5(C5))`. The fusion logits live at the fine
//! resolution and weight the already upsampled sources, so the simplex
//! constraint holds literally at every output location.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init, ConvSpec};
use crate::params::{Binding, Group, ParamId, ParamStore};
use crate::tensor::Tensor4;

/// Pyramid levels handled by the neck, finest first.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeckKind {
    /// Learnable pointwise fusion weights.
    Cfpan,
    /// Static top-down sum: `(α, β, γ) = (0.5, 0, 0.5)` everywhere.
    Fpn,
}

/// Weights of the static top-down sum used by [`NeckKind::Fpn`].
pub const FPN_WEIGHTS: [f64; 3] = [0.5, 0.0, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeckConfig {
    pub kind: NeckKind,
    pub cbam: bool,
    /// Output channel width shared by every level.
    pub width: usize,
    /// Hidden reduction ratio of the CBAM channel MLP.
    pub reduction: usize,
    /// Standard deviation of the initial fusion-logit jitter (0 = all zero).
    pub logit_jitter: f64,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            kind: NeckKind::Cfpan,
            cbam: true,
            width: 64,
            reduction: 4,
            logit_jitter: 0.0,
        }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.reduction == 0 || self.width < self.reduction {
            return Err(Error::Config(format!(
                "neck width {} must be a positive multiple of reduction {}",
                self.width, self.reduction
            )));
        }
        if !(self.logit_jitter >= 0.0 && self.logit_jitter.is_finite()) {
            return Err(Error::Config("neck.logit_jitter must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Tape handles of one CBAM block.
#[derive(Clone, Copy, Debug)]
pub struct CbamVars {
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub spatial_w: Var,
    pub spatial_b: Var,
}

pub fn spatial_spec() -> ConvSpec {
    ConvSpec::same(2, 1, 7, 1)
}

fn check_channels(g: &Graph, f: Var, p: &CbamVars) -> Result<()> {
    let c = g.value(f).channels();
    let expected = g.value(p.mlp_w1).channels();
    if c != expected {
        return Err(Error::Shape {
            op: "channel_attention",
            dim: "channels",
            expected,
            got: c,
        });
    }
    Ok(())
}

/// `M_c = σ(MLP(avgpool F) + MLP(maxpool F))`, shape `(N, C, 1, 1)`.
pub fn channel_attention(g: &mut Graph, f: Var, p: &CbamVars) -> Result<Var> {
    check_channels(g, f, p)?;
    let avg = g.global_avg_pool(f);
    let max = g.global_max_pool(f);
    let mut paths = Vec::with_capacity(2);
    for v in [avg, max] {
        let h = g.linear(v, p.mlp_w1, Some(p.mlp_b1))?;
        let h = g.relu(h);
        let o = g.linear(h, p.mlp_w2, Some(p.mlp_b2))?;
        let n = g.value(o).batch();
        let c = g.value(o).channels();
        paths.push(g.reshape(o, [n, c, 1, 1])?);
    }
    let s = g.add(paths[0], paths[1])?;
    Ok(g.sigmoid(s))
}

/// `M_s = σ(conv7×7([mean_c F ‖ max_c F]))`, shape `(N, 1, H, W)`.
pub fn spatial_attention(g: &mut Graph, f: Var, p: &CbamVars) -> Result<Var> {
    let mean = g.channel_mean(f);
    let max = g.channel_max(f);
    let cat = g.concat_channels(&[mean, max])?;
    let s = g.conv2d(cat, p.spatial_w, Some(p.spatial_b), spatial_spec())?;
    Ok(g.sigmoid(s))
}

/// `F' = M_c(F) ⊗ F`, then `M_s(F') ⊗ F'`.
pub fn apply_cbam(g: &mut Graph, f: Var, p: &CbamVars) -> Result<Var> {
    let mc = channel_attention(g, f, p)?;
    let f1 = g.mul(mc, f)?;
    let ms = spatial_attention(g, f1, p)?;
    g.mul(ms, f1)
}

/// How a fused level obtains its `(α, β, γ)` maps.
#[derive(Clone, Copy, Debug)]
pub enum Fusion {
    /// `(1, 3, H, W)` logits, softmaxed over the three channels.
    Logits(Var),
    Static([f64; 3]),
}

/// Pointwise softmax of `(1, 3, H, W)` fusion logits.
pub fn fusion_weights(g: &mut Graph, logits: Var) -> Result<Var> {
    if g.value(logits).channels() != 3 {
        return Err(Error::Shape {
            op: "fusion_weights",
            dim: "logit channels",
            expected: 3,
            got: g.value(logits).channels(),
        });
    }
    Ok(g.softmax_channels(logits))
}

/// Fuses one level from the coarser output `p_next`, the coarser lateral
/// `lat_next` and the current lateral `lat_cur`.
pub fn fuse_level(g: &mut Graph, p_next: Var, lat_next: Var, lat_cur: Var, fusion: Fusion) -> Result<Var> {
    let [n, c, h, w] = g.value(lat_cur).shape();
    let next = g.value(p_next).shape();
    if g.value(lat_next).shape() != next {
        return Err(Error::invalid(
            "fuse_level",
            format!("coarse inputs disagree: {:?} vs {:?}", next, g.value(lat_next).shape()),
        ));
    }
    if next[0] != n || next[1] != c {
        return Err(Error::Shape {
            op: "fuse_level",
            dim: "channels",
            expected: c,
            got: next[1],
        });
    }
    if next[2] * 2 != h || next[3] * 2 != w {
        return Err(Error::invalid(
            "fuse_level",
            format!("resolution ratio must be 2: coarse {}x{}, fine {h}x{w}", next[2], next[3]),
        ));
    }
    let up_p = g.upsample(p_next, 2)?;
    match fusion {
        Fusion::Logits(logits) => {
            let ls = g.value(logits).shape();
            if ls[2] != h || ls[3] != w {
                return Err(Error::invalid(
                    "fuse_level",
                    format!("fusion logits are {}x{}, level is {h}x{w}", ls[2], ls[3]),
                ));
            }
            let wts = fusion_weights(g, logits)?;
            let alpha = g.slice_channels(wts, 0, 1)?;
            let beta = g.slice_channels(wts, 1, 1)?;
            let gamma = g.slice_channels(wts, 2, 1)?;
            let up_l = g.upsample(lat_next, 2)?;
            let a = g.mul(alpha, up_p)?;
            let b = g.mul(beta, up_l)?;
            let c = g.mul(gamma, lat_cur)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        }
        Fusion::Static([a, b, c]) => {
            let mut terms = vec![g.scale(up_p, a)];
            if b != 0.0 {
                let up_l = g.upsample(lat_next, 2)?;
                terms.push(g.scale(up_l, b));
            }
            terms.push(g.scale(lat_cur, c));
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct CbamIds {
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
    spatial_w: ParamId,
    spatial_b: ParamId,
}

impl CbamIds {
    fn bind(&self, b: &Binding) -> CbamVars {
        CbamVars {
            mlp_w1: b[self.mlp_w1],
            mlp_b1: b[self.mlp_b1],
            mlp_w2: b[self.mlp_w2],
            mlp_b2: b[self.mlp_b2],
            spatial_w: b[self.spatial_w],
            spatial_b: b[self.spatial_b],
        }
    }
}

/// Parameters of the neck registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Cfpan {
    pub config: NeckConfig,
    laterals: [(ParamId, ParamId); 4],
    cbam: Option<CbamIds>,
    fusion: Option<[ParamId; 3]>,
}

/// Output of [`Cfpan::forward`]: P2..P5, finest first.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub levels: [Var; 4],
}

impl Cfpan {
    /// Registers the neck for backbone widths `in_channels` (C2..C5) and
    /// level-2..4 spatial sizes `fine_sizes`.
    pub fn new<R: Rng>(
        config: NeckConfig,
        in_channels: [usize; 4],
        fine_sizes: [(usize, usize); 3],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let laterals = std::array::from_fn(|i| {
            let w = store.add(
                format!("neck.lateral{}.weight", LEVELS[i]),
                Group::Neck,
                init::kaiming([d, in_channels[i], 1, 1], rng),
            );
            let b = store.add(format!("neck.lateral{}.bias", LEVELS[i]), Group::Neck, Tensor4::zeros([1, d, 1, 1]));
            (w, b)
        });
        let cbam = config.cbam.then(|| {
            let hidden = (d / config.reduction).max(1);
            CbamIds {
                mlp_w1: store.add("neck.cbam.mlp1.weight", Group::Neck, init::kaiming([hidden, d, 1, 1], rng)),
                mlp_b1: store.add("neck.cbam.mlp1.bias", Group::Neck, Tensor4::zeros([1, hidden, 1, 1])),
                mlp_w2: store.add("neck.cbam.mlp2.weight", Group::Neck, init::kaiming([d, hidden, 1, 1], rng).scaled(0.5)),
                mlp_b2: store.add("neck.cbam.mlp2.bias", Group::Neck, Tensor4::zeros([1, d, 1, 1])),
                spatial_w: store.add("neck.cbam.spatial.weight", Group::Neck, init::normal([1, 2, 7, 7], 0.01, rng)),
                spatial_b: store.add("neck.cbam.spatial.bias", Group::Neck, Tensor4::zeros([1, 1, 1, 1])),
            }
        });
        let fusion = match config.kind {
            NeckKind::Cfpan => Some(std::array::from_fn(|i| {
                let (h, w) = fine_sizes[i];
                let logits = if config.logit_jitter > 0.0 {
                    init::normal([1, 3, h, w], config.logit_jitter, rng)
                } else {
                    Tensor4::zeros([1, 3, h, w])
                };
                store.add(format!("neck.fusion{}.logits", LEVELS[i]), Group::Neck, logits)
            })),
            NeckKind::Fpn => None,
        };
        Ok(Self {
            config,
            laterals,
            cbam,
            fusion,
        })
    }

    pub fn fusion_logit_ids(&self) -> Option<[ParamId; 3]> {
        self.fusion
    }

    /// `c` holds C2..C5, finest first.
    pub fn forward(&self, g: &mut Graph, b: &Binding, c: [Var; 4]) -> Result<Pyramid> {
        for i in 0..3 {
            let (f, n) = (g.value(c[i]).shape(), g.value(c[i + 1]).shape());
            if f[2] != 2 * n[2] || f[3] != 2 * n[3] {
                return Err(Error::invalid(
                    "cfpan_forward",
                    format!("level C{} is {}x{} but C{} is {}x{}", LEVELS[i], f[2], f[3], LEVELS[i + 1], n[2], n[3]),
                ));
            }
        }
        let mut lat = [c[0]; 4];
        for i in 0..4 {
            let (w, bias) = self.laterals[i];
            let spec = ConvSpec::same(g.value(c[i]).channels(), self.config.width, 1, 1);
            lat[i] = g.conv2d(c[i], b[w], Some(b[bias]), spec)?;
        }
        let mut p = [lat[3]; 4];
        if let Some(ids) = &self.cbam {
            p[3] = apply_cbam(g, lat[3], &ids.bind(b))?;
        }
        for i in (0..3).rev() {
            let fusion = match &self.fusion {
                Some(ids) => Fusion::Logits(b[ids[i]]),
                None => Fusion::Static(FPN_WEIGHTS),
            };
            p[i] = fuse_level(g, p[i + 1], lat[i + 1], lat[i], fusion)?;
        }
        Ok(Pyramid { levels: p })
    }
}

/// Largest `|α + β + γ − 1|` over every location of the given logit maps.
pub fn simplex_violation(logits: &[&Tensor4]) -> f64 {
    let mut worst: f64 = 0.0;
    for l in logits {
        let mut g = Graph::new();
        let v = g.constant((*l).clone());
        let s = g.softmax_channels(v);
        let t = g.value(s);
        let [n, _, h, w] = t.shape();
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let sum: f64 = (0..3).map(|k| t.at(b, k, y, x)).sum();
                    worst = worst.max((sum - 1.0).abs());
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::random_tensor;

    fn zero_cbam(g: &mut Graph, c: usize, hidden: usize) -> CbamVars {
        CbamVars {
            mlp_w1: g.constant(Tensor4::zeros([hidden, c, 1, 1])),
            mlp_b1: g.constant(Tensor4::zeros([1, hidden, 1, 1])),
            mlp_w2: g.constant(Tensor4::zeros([c, hidden, 1, 1])),
            mlp_b2: g.constant(Tensor4::zeros([1, c, 1, 1])),
            spatial_w: g.constant(Tensor4::zeros([1, 2, 7, 7])),
            spatial_b: g.constant(Tensor4::zeros([1, 1, 1, 1])),
        }
    }

    #[test]
    fn zero_input_gives_half_channel_gate() {
        let mut g = Graph::new();
        let p = zero_cbam(&mut g, 3, 1);
        let f = g.constant(Tensor4::zeros([1, 3, 4, 4]));
        let m = channel_attention(&mut g, f, &p).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_mlp_on_ones() {
        let mut g = Graph::new();
        let p = CbamVars {
            mlp_w1: g.constant(Tensor4::full([1, 1, 1, 1], 1.0)),
            mlp_b1: g.constant(Tensor4::zeros([1, 1, 1, 1])),
            mlp_w2: g.constant(Tensor4::full([1, 1, 1, 1], 1.0)),
            mlp_b2: g.constant(Tensor4::zeros([1, 1, 1, 1])),
            spatial_w: g.constant(Tensor4::zeros([1, 2, 7, 7])),
            spatial_b: g.constant(Tensor4::zeros([1, 1, 1, 1])),
        };
        let f = g.constant(Tensor4::full([1, 1, 3, 3], 1.0));
        let m = channel_attention(&mut g, f, &p).unwrap();
        assert!((g.value(m).data()[0] - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn spatial_gate_with_bias_only() {
        let mut g = Graph::new();
        let mut p = zero_cbam(&mut g, 2, 1);
        p.spatial_b = g.constant(Tensor4::full([1, 1, 1, 1], 0.7));
        let f = g.constant(random_tensor([2, 2, 5, 5], 3));
        let m = spatial_attention(&mut g, f, &p).unwrap();
        let expected = 1.0 / (1.0 + (-0.7f64).exp());
        assert_eq!(g.value(m).shape(), [2, 1, 5, 5]);
        assert!(g.value(m).data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn zeroed_cbam_quarters_the_input() {
        let mut g = Graph::new();
        let p = zero_cbam(&mut g, 4, 1);
        let x = random_tensor([1, 4, 4, 4], 5);
        let f = g.constant(x.clone());
        let y = apply_cbam(&mut g, f, &p).unwrap();
        assert!(g.value(y).max_abs_diff(&x.scaled(0.25)) < 1e-15);
    }

    #[test]
    fn fusion_rejects_wrong_ratio() {
        let mut g = Graph::new();
        let coarse = g.constant(Tensor4::zeros([1, 2, 4, 4]));
        let fine = g.constant(Tensor4::zeros([1, 2, 12, 12]));
        let err = fuse_level(&mut g, coarse, coarse, fine, Fusion::Static(FPN_WEIGHTS)).unwrap_err();
        assert!(err.to_string().contains("ratio"));
    }

    #[test]
    fn equal_logits_average_constant_fields() {
        let mut g = Graph::new();
        let coarse = g.constant(Tensor4::full([1, 2, 4, 4], 3.0));
        let fine = g.constant(Tensor4::full([1, 2, 8, 8], 3.0));
        let logits = g.constant(Tensor4::zeros([1, 3, 8, 8]));
        let p = fuse_level(&mut g, coarse, coarse, fine, Fusion::Logits(logits)).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }
}
