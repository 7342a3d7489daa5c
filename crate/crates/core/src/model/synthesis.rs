//! The frame synthesis network: two cascaded U-shaped conv nets.
//!
//! Each down block is two 3×3 convs. Down blocks that have a matching up
//! block keep their output as a skip and are followed by a 2× average pool;
//! the remaining ones form the bottleneck. Each up block upsamples 2×
//! (nearest), concatenates the matching skip on channels, then applies two
//! 3×3 convs. Optional 3×3 head convs and a 1×1 projection to RGB follow.
//!
//! The second stage refines the first stage's RGB output and the two are
//! summed.

use super::config::{ModelConfig, UNetWidths};
use super::params::{ConvLayer, ParamLayout};
use crate::error::Result;
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub down: Vec<[ConvLayer; 2]>,
    pub up: Vec<[ConvLayer; 2]>,
    pub head: Vec<ConvLayer>,
    pub out: ConvLayer,
}

impl UNet {
    pub fn new(layout: &mut ParamLayout, name: &str, in_c: usize, widths: &UNetWidths) -> Self {
        let mut c = in_c;
        let mut down = Vec::with_capacity(widths.down.len());
        for (i, &w) in widths.down.iter().enumerate() {
            down.push([
                layout.conv(&format!("{name}.down{i}.conv0"), c, w, 3),
                layout.conv(&format!("{name}.down{i}.conv1"), w, w, 3),
            ]);
            c = w;
        }
        let n_up = widths.up.len();
        let mut up = Vec::with_capacity(n_up);
        for (j, &w) in widths.up.iter().enumerate() {
            let skip = widths.down[n_up - 1 - j];
            up.push([
                layout.conv(&format!("{name}.up{j}.conv0"), c + skip, w, 3),
                layout.conv(&format!("{name}.up{j}.conv1"), w, w, 3),
            ]);
            c = w;
        }
        let mut head = Vec::with_capacity(widths.head.len());
        for (i, &w) in widths.head.iter().enumerate() {
            head.push(layout.conv(&format!("{name}.head{i}"), c, w, 3));
            c = w;
        }
        let out = layout.conv(&format!("{name}.out"), c, 3, 1);
        UNet { down, up, head, out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var, slope: T) -> Result<Var> {
        let n_up = self.up.len();
        let mut skips = Vec::with_capacity(n_up);
        let mut x = x;
        for (k, [c0, c1]) in self.down.iter().enumerate() {
            x = c0.forward_act(g, p, x, slope)?;
            x = c1.forward_act(g, p, x, slope)?;
            if k < n_up {
                skips.push(x);
                x = g.avg_pool2(x)?;
            }
        }
        for [c0, c1] in &self.up {
            let skip = skips.pop().expect("one skip per up block");
            let upsampled = g.upsample2(x);
            x = g.concat_channels(&[upsampled, skip])?;
            x = c0.forward_act(g, p, x, slope)?;
            x = c1.forward_act(g, p, x, slope)?;
        }
        for conv in &self.head {
            x = conv.forward_act(g, p, x, slope)?;
        }
        self.out.forward(g, p, x)
    }

    pub fn param_count(&self) -> usize {
        self.down
            .iter()
            .chain(&self.up)
            .flatten()
            .chain(&self.head)
            .chain(std::iter::once(&self.out))
            .map(ConvLayer::param_count)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisNet {
    pub stage1: UNet,
    pub stage2: UNet,
    pub slope: f64,
}

impl SynthesisNet {
    pub fn new(layout: &mut ParamLayout, config: &ModelConfig) -> Self {
        SynthesisNet {
            stage1: UNet::new(layout, "sffn1", config.d_model, &config.sffn1),
            stage2: UNet::new(layout, "sffn2", 3, &config.sffn2),
            slope: config.leaky_slope,
        }
    }

    /// Maps `(q, d_model, h, w)` decoded features to `(q, 3, h, w)` frames, unclamped.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], decoded: Var) -> Result<Var> {
        let slope = T::from_f64(self.slope);
        let coarse = self.stage1.forward(g, p, decoded, slope)?;
        let refine = self.stage2.forward(g, p, coarse, slope)?;
        g.add(coarse, refine)
    }

    pub fn param_count(&self) -> usize {
        self.stage1.param_count() + self.stage2.param_count()
    }
}
