use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ScoreHead};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain cycle consistency on both sides, single-image discriminators.
    CycleGan,
    /// Extended cycle on the appearance side plus the extra reconstruction
    /// discriminator, single-image discriminators.
    XCycleGan,
    /// Extended cycle, extra reconstruction discriminator and the directional
    /// discriminator.
    XdCycleGan,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::CycleGan, Variant::XCycleGan, Variant::XdCycleGan];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CycleGan => "cyclegan",
            Variant::XCycleGan => "xcyclegan",
            Variant::XdCycleGan => "xdcyclegan",
        }
    }

    pub fn roles(self) -> &'static [DiscRole] {
        match self {
            Variant::CycleGan => &[DiscRole::OcSingle, DiscRole::Vc],
            Variant::XCycleGan => &[DiscRole::OcSingle, DiscRole::Vc, DiscRole::OcExtra],
            Variant::XdCycleGan => &[DiscRole::Dir, DiscRole::OcExtra],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Variant(format!("unknown variant {s:?} (cyclegan|xcyclegan|xdcyclegan)")))
    }
}

/// The discriminators a model may carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscRole {
    /// Real appearance vs reconstructed appearance `G_oc(G_vc(a))`.
    OcExtra,
    /// Real appearance vs translated appearance `G_oc(b)`.
    OcSingle,
    /// Real structure vs translated structure `G_vc(a)`.
    Vc,
    /// (appearance, structure) pairs, A→B direction vs B→A direction.
    Dir,
}

impl DiscRole {
    pub fn name(self) -> &'static str {
        match self {
            DiscRole::OcExtra => "d_oc",
            DiscRole::OcSingle => "d_oc_single",
            DiscRole::Vc => "d_vc",
            DiscRole::Dir => "d_dir",
        }
    }

    fn owner(self) -> u32 {
        match self {
            DiscRole::OcExtra => 3,
            DiscRole::OcSingle => 4,
            DiscRole::Vc => 5,
            DiscRole::Dir => 6,
        }
    }
}

/// Widths and depths of every network in a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub gen_width: usize,
    pub res_blocks: usize,
    pub disc_width: usize,
    pub disc_downsamplings: usize,
    pub head: ScoreHead,
    pub spectral_norm: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            gen_width: 32,
            res_blocks: 4,
            disc_width: 64,
            disc_downsamplings: 3,
            head: ScoreHead::Sigmoid,
            spectral_norm: true,
        }
    }
}

impl Architecture {
    pub fn generator(&self, cin: usize, cout: usize) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: cin,
            out_channels: cout,
            base_width: self.gen_width,
            res_blocks: self.res_blocks,
        }
    }

    pub fn discriminator(&self, cin: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: cin,
            base_width: self.disc_width,
            downsamplings: self.disc_downsamplings,
            head: self.head,
            spectral_norm: self.spectral_norm,
        }
    }
}

pub const APPEARANCE_CHANNELS: usize = 3;
pub const G_OC_OWNER: u32 = 1;
pub const G_VC_OWNER: u32 = 2;

/// Generators and discriminators of one model variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub variant: Variant,
    pub arch: Architecture,
    pub structure_channels: usize,
    /// Structure → appearance.
    pub g_oc: Generator<T>,
    /// Appearance → structure.
    pub g_vc: Generator<T>,
    pub discs: Vec<(DiscRole, Discriminator<T>)>,
}

impl<T: Real> ModelBundle<T> {
    /// Initializes every network from `seed`; each network draws from its own
    /// stream so adding a discriminator leaves the others unchanged.
    pub fn new(variant: Variant, arch: Architecture, structure_channels: usize, seed: u64) -> Result<Self> {
        if structure_channels == 0 {
            return Err(Error::Param("structure images need at least one channel".into()));
        }
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let g_oc = Generator::new(
            G_OC_OWNER,
            arch.generator(structure_channels, APPEARANCE_CHANNELS),
            &mut rng(G_OC_OWNER as u64),
        )?;
        let g_vc = Generator::new(
            G_VC_OWNER,
            arch.generator(APPEARANCE_CHANNELS, structure_channels),
            &mut rng(G_VC_OWNER as u64),
        )?;
        let mut discs = Vec::new();
        for &role in variant.roles() {
            let cin = match role {
                DiscRole::OcExtra | DiscRole::OcSingle => APPEARANCE_CHANNELS,
                DiscRole::Vc => structure_channels,
                DiscRole::Dir => APPEARANCE_CHANNELS + structure_channels,
            };
            let d = Discriminator::new(role.owner(), arch.discriminator(cin), &mut rng(role.owner() as u64))?;
            discs.push((role, d));
        }
        Ok(ModelBundle {
            variant,
            arch,
            structure_channels,
            g_oc,
            g_vc,
            discs,
        })
    }

    pub fn disc(&self, role: DiscRole) -> Result<&Discriminator<T>> {
        self.discs
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Variant(format!("{} model has no {} discriminator", self.variant, role.name())))
    }

    pub fn disc_mut(&mut self, role: DiscRole) -> Result<&mut Discriminator<T>> {
        let variant = self.variant;
        self.discs
            .iter_mut()
            .find(|(r, _)| *r == role)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Variant(format!("{variant} model has no {} discriminator", role.name())))
    }

    pub fn generator_param_count(&self) -> usize {
        self.g_oc.param_count() + self.g_vc.param_count()
    }

    pub fn discriminator_param_count(&self) -> usize {
        self.discs.iter().map(|(_, d)| d.param_count()).sum()
    }
}
