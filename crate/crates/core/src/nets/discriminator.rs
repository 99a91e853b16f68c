use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamSet, SpectralState};
use crate::autodiff::{ConvSpec, Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const KERNEL: usize = 4;
const LEAK: f64 = 0.2;
const MAX_WIDTH_MULT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreHead {
    /// Probabilities in (0, 1), for the log-form adversarial loss.
    Sigmoid,
    /// Raw scores, for the least-squares form.
    Linear,
}

/// Patch classifier: `downsamplings` stride-2 4×4 convs, one stride-1 4×4
/// feature conv and a stride-1 4×4 score conv, leaky rectifiers (slope 0.2)
/// between them and no normalization layers. With three downsamplings the
/// receptive field of each score is 70×70 pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub downsamplings: usize,
    pub head: ScoreHead,
    pub spectral_norm: bool,
}

impl DiscriminatorConfig {
    pub fn patch70(in_channels: usize, base_width: usize) -> Self {
        DiscriminatorConfig {
            in_channels,
            base_width,
            downsamplings: 3,
            head: ScoreHead::Sigmoid,
            spectral_norm: true,
        }
    }

    /// `(in, out, stride)` of every conv, in forward order.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let w = self.base_width;
        let mut layers = Vec::new();
        let mut cin = self.in_channels;
        let mut mult = 1;
        for i in 0..self.downsamplings {
            if i > 0 {
                mult = (mult * 2).min(MAX_WIDTH_MULT);
            }
            layers.push((cin, w * mult, 2));
            cin = w * mult;
        }
        mult = (mult * 2).min(MAX_WIDTH_MULT);
        layers.push((cin, w * mult, 1));
        layers.push((w * mult, 1, 1));
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|&(cin, cout, _)| KERNEL * KERNEL * cin * cout + cout)
            .sum()
    }

    /// Side of the square score grid for a square `size`-pixel input.
    pub fn score_grid(&self, size: usize) -> Option<usize> {
        self.layers().iter().try_fold(size, |s, &(_, _, stride)| {
            ConvSpec::new(stride, 1, PadMode::Zero).output_size(s, KERNEL)
        })
    }

    /// Receptive field of one score, in input pixels.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for (_, _, stride) in self.layers() {
            rf += (KERNEL - 1) * jump;
            jump *= stride;
        }
        rf
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    weights: Vec<usize>,
    biases: Vec<usize>,
    strides: Vec<usize>,
    spectral: Vec<SpectralState<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(owner: u32, config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.in_channels == 0 || config.base_width == 0 {
            return Err(Error::Param(format!("degenerate discriminator config {config:?}")));
        }
        let mut params = ParamSet::new(owner);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut strides = Vec::new();
        let mut spectral = Vec::new();
        for (i, (cin, cout, stride)) in config.layers().into_iter().enumerate() {
            weights.push(params.normal(format!("conv{i}.weight"), &[cout, cin, KERNEL, KERNEL], rng));
            biases.push(params.filled(format!("conv{i}.bias"), &[cout], 0.0));
            strides.push(stride);
            spectral.push(SpectralState::new(cout, cin * KERNEL * KERNEL, rng));
        }
        let mut d = Discriminator {
            config,
            params,
            weights,
            biases,
            strides,
            spectral,
        };
        if config.spectral_norm {
            d.power_iterate(1)?;
        }
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    pub fn spectral_states(&self) -> &[SpectralState<T>] {
        &self.spectral
    }

    pub fn spectral_states_mut(&mut self) -> &mut [SpectralState<T>] {
        &mut self.spectral
    }

    /// Advances every layer's power iteration on the current weights.
    pub fn power_iterate(&mut self, n_iters: usize) -> Result<()> {
        for (state, &wi) in self.spectral.iter_mut().zip(&self.weights) {
            state.iterate(self.params.tensors()[wi].data(), n_iters)?;
        }
        Ok(())
    }

    /// Weight tensors as used in the forward pass (divided by σ̂ when
    /// spectral normalization is on).
    pub fn effective_weights(&self) -> Vec<Tensor<T>> {
        self.weights
            .iter()
            .zip(&self.spectral)
            .map(|(&wi, state)| {
                let w = &self.params.tensors()[wi];
                if self.config.spectral_norm {
                    let s = state.sigma(w.data());
                    w.map(|x| x / s)
                } else {
                    w.clone()
                }
            })
            .collect()
    }

    /// Patch scores `N × 1 × S × S` for an `N × in_channels × H × W` batch.
    /// Uses the stored power-iteration vectors without advancing them.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let last = self.weights.len() - 1;
        let mut h = x;
        for (i, (&wi, &bi)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut w = self.params.bind(g, wi, trainable);
            if self.config.spectral_norm {
                let s = &self.spectral[i];
                w = g.spectral_normalized(w, &s.u, &s.v)?;
            }
            let b = self.params.bind(g, bi, trainable);
            h = g.conv2d(h, w, Some(b), ConvSpec::new(self.strides[i], 1, PadMode::Zero))?;
            if i < last {
                h = g.leaky_relu(h, LEAK);
            }
        }
        Ok(match self.config.head {
            ScoreHead::Sigmoid => g.sigmoid(h),
            ScoreHead::Linear => h,
        })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv, false)?;
        Ok(g.value(y).clone())
    }
}

/// Scores an (appearance, structure) pair with a directional discriminator.
/// The pair is concatenated along channels, appearance first.
pub fn directional_forward<T: Real>(
    d: &Discriminator<T>,
    g: &mut Graph<T>,
    appearance: Var,
    structure: Var,
    trainable: bool,
) -> Result<Var> {
    let (na, _, ha, wa) = g.value(appearance).dims4()?;
    let (nb, _, hb, wb) = g.value(structure).dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "directional pair {:?} / {:?} differ in batch or spatial size",
            g.value(appearance).shape(),
            g.value(structure).shape()
        )));
    }
    let pair = g.concat_channels(&[appearance, structure])?;
    d.forward(g, pair, trainable)
}
