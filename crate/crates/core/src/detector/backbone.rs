use rand::Rng;

use super::config::BackboneConfig;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{init, ConvSpec};
use crate::params::{Binding, Group, ParamId, ParamStore};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

/// Stem, then four stages of (3×3 stride-2 conv, 3×3 conv), each followed
/// by ReLU. Stage outputs are C2..C5.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Layer,
    stages: [[Layer; 2]; 4],
}

fn layer<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Layer {
    let spec = ConvSpec {
        in_channels: cin,
        out_channels: cout,
        kernel_size: 3,
        dilation: 1,
        stride,
        padding: 1,
    };
    Layer {
        w: store.add(format!("{name}.weight"), Group::Backbone, init::kaiming([cout, cin, 3, 3], rng)),
        b: store.add(format!("{name}.bias"), Group::Backbone, Tensor4::zeros([1, cout, 1, 1])),
        spec,
    }
}

impl Backbone {
    pub fn new<R: Rng>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let stem = layer(store, "backbone.stem", 3, config.stem, 2, rng);
        let mut cin = config.stem;
        let stages = std::array::from_fn(|i| {
            let w = config.widths[i];
            let down = layer(store, &format!("backbone.c{}.down", i + 2), cin, w, 2, rng);
            let conv = layer(store, &format!("backbone.c{}.conv", i + 2), w, w, 1, rng);
            cin = w;
            [down, conv]
        });
        Self { config, stem, stages }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, image: Var) -> Result<[Var; 4]> {
        let apply = |g: &mut Graph, l: &Layer, x: Var| -> Result<Var> {
            let y = g.conv2d(x, b[l.w], Some(b[l.b]), l.spec)?;
            Ok(g.relu(y))
        };
        let mut x = apply(g, &self.stem, image)?;
        let mut out = [x; 4];
        for (i, [down, conv]) in self.stages.iter().enumerate() {
            x = apply(g, down, x)?;
            x = apply(g, conv, x)?;
            out[i] = x;
        }
        Ok(out)
    }
}
