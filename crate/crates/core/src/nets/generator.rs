use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::autodiff::{ConvSpec, Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Encoder / residual stack / decoder generator layout.
///
/// 7×7 reflect-padded stem, two stride-2 3×3 downsamplings, `res_blocks`
/// residual blocks at 4× base width, two nearest-upsample + 3×3 stages and a
/// 7×7 tanh head. Every conv carries a bias and every hidden conv is followed
/// by an affine instance norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub res_blocks: usize,
}

impl GeneratorConfig {
    /// Desk-scale 64 px layout: base width 32, four residual blocks.
    pub fn desk(in_channels: usize, out_channels: usize) -> Self {
        GeneratorConfig {
            in_channels,
            out_channels,
            base_width: 32,
            res_blocks: 4,
        }
    }

    /// Full 256 px layout: base width 64, nine residual blocks.
    pub fn full(in_channels: usize, out_channels: usize) -> Self {
        GeneratorConfig {
            in_channels,
            out_channels,
            base_width: 64,
            res_blocks: 9,
        }
    }

    /// `(in, out, kernel, normalized)` of every conv, in forward order.
    fn layers(&self) -> Vec<(usize, usize, usize, bool)> {
        let w = self.base_width;
        let mut layers = vec![
            (self.in_channels, w, 7, true),
            (w, 2 * w, 3, true),
            (2 * w, 4 * w, 3, true),
        ];
        for _ in 0..self.res_blocks {
            layers.push((4 * w, 4 * w, 3, true));
            layers.push((4 * w, 4 * w, 3, true));
        }
        layers.push((4 * w, 2 * w, 3, true));
        layers.push((2 * w, w, 3, true));
        layers.push((w, self.out_channels, 7, false));
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|&(cin, cout, k, norm)| k * k * cin * cout + cout + if norm { 2 * cout } else { 0 })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Param(format!("degenerate generator config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct NormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    convs: Vec<ConvIdx>,
    norms: Vec<NormIdx>,
}

impl<T: Real> Generator<T> {
    pub fn new(owner: u32, config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new(owner);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, (cin, cout, k, norm)) in config.layers().into_iter().enumerate() {
            let w = params.normal(format!("conv{i}.weight"), &[cout, cin, k, k], rng);
            let b = params.filled(format!("conv{i}.bias"), &[cout], 0.0);
            convs.push(ConvIdx { w, b });
            if norm {
                let gamma = params.filled(format!("norm{i}.gamma"), &[cout], 1.0);
                let beta = params.filled(format!("norm{i}.beta"), &[cout], 0.0);
                norms.push(NormIdx { gamma, beta });
            }
        }
        Ok(Generator {
            config,
            params,
            convs,
            norms,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn conv(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: usize,
        spec: ConvSpec,
        trainable: bool,
    ) -> Result<Var> {
        let c = self.convs[layer];
        let w = self.params.bind(g, c.w, trainable);
        let b = self.params.bind(g, c.b, trainable);
        g.conv2d(x, w, Some(b), spec)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, layer: usize, trainable: bool) -> Result<Var> {
        let n = self.norms[layer];
        let gamma = self.params.bind(g, n.gamma, trainable);
        let beta = self.params.bind(g, n.beta, trainable);
        g.instance_norm(x, gamma, beta)
    }

    fn conv_norm_relu(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: usize,
        spec: ConvSpec,
        trainable: bool,
    ) -> Result<Var> {
        let h = self.conv(g, x, layer, spec, trainable)?;
        let h = self.norm(g, h, layer, trainable)?;
        Ok(g.relu(h))
    }

    /// Maps an `N × in_channels × H × W` batch in [−1, 1] to
    /// `N × out_channels × H × W` in [−1, 1]. `H` and `W` must be multiples of 4.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 16 || w < 16 {
            return Err(Error::Shape(format!(
                "generator input {h}×{w} must be at least 16 and divisible by 4"
            )));
        }
        let reflect3 = ConvSpec::new(1, 3, PadMode::Reflect);
        let reflect1 = ConvSpec::new(1, 1, PadMode::Reflect);
        let down = ConvSpec::new(2, 1, PadMode::Zero);
        let same = ConvSpec::new(1, 1, PadMode::Zero);

        let mut layer = 0;
        let mut h = self.conv_norm_relu(g, x, layer, reflect3, trainable)?;
        layer += 1;
        for _ in 0..2 {
            h = self.conv_norm_relu(g, h, layer, down, trainable)?;
            layer += 1;
        }
        for _ in 0..self.config.res_blocks {
            let r = self.conv_norm_relu(g, h, layer, reflect1, trainable)?;
            let r = self.conv(g, r, layer + 1, reflect1, trainable)?;
            let r = self.norm(g, r, layer + 1, trainable)?;
            h = g.add(h, r)?;
            layer += 2;
        }
        for _ in 0..2 {
            let u = g.upsample2x(h)?;
            h = self.conv_norm_relu(g, u, layer, same, trainable)?;
            layer += 1;
        }
        let out = self.conv(g, h, layer, reflect3, trainable)?;
        Ok(g.tanh(out))
    }

    /// Inference on a batch outside any training graph.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv, false)?;
        Ok(g.value(y).clone())
    }
}
