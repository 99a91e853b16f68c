//! Adversarial training loop: optimizer, replay buffers, epoch schedule,
//! loss trace and checkpoints.

mod adam;
mod buffer;
mod checkpoint;

pub use adam::{Adam, AdamConfig};
pub use buffer::{BufferItem, ReplayBuffer};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC,
};

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::losses::{
    discriminator_losses, generator_objective, DiscriminatorFeed, LossBreakdown, LossWeights, Provenance, Tagged,
};
use crate::metrics::Translator;
use crate::nets::{Architecture, DiscRole, ModelBundle, ParamSet, Variant};
use crate::synthbench::{Dataset, StructureMode};
use crate::tensor::{Real, Tensor};

pub const TRACE_FILE: &str = "trace.log";
pub const CHECKPOINT_DIR: &str = "ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub dataset: PathBuf,
    pub mode: StructureMode,
    pub size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub buffer_capacity: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub arch: Architecture,
    /// Power iterations per discriminator per step.
    pub power_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::XdCycleGan,
            dataset: PathBuf::from("data"),
            mode: StructureMode::Depth,
            size: 64,
            batch_size: 1,
            epochs: 200,
            adam: AdamConfig::default(),
            buffer_capacity: 50,
            seed: 0,
            checkpoint_every: 10,
            weights: LossWeights::default(),
            arch: Architecture::default(),
            power_iterations: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.power_iterations == 0 {
            return Err(Error::Config("power iterations must be at least 1".into()));
        }
        if self.size < 16 || self.size % 4 != 0 {
            return Err(Error::Config(format!("image size must be a multiple of 4 and at least 16, got {}", self.size)));
        }
        self.adam.validate()?;
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.arch.generator(3, self.mode.channels()).validate()?;
        Ok(())
    }
}

/// Step size for 0-based `epoch` of `epochs`: constant for the first half,
/// then linear decay towards 0.
pub fn learning_rate(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * (2.0 - 2.0 * epoch as f64 / epochs as f64).min(1.0).max(0.0)
}

/// History pools kept during training. The directional discriminator keeps
/// whole pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferSlot {
    Vc,
    OcSingle,
    OcExtra,
    DirPos,
    DirNeg,
}

impl BufferSlot {
    pub fn name(self) -> &'static str {
        match self {
            BufferSlot::Vc => "d_vc",
            BufferSlot::OcSingle => "d_oc_single",
            BufferSlot::OcExtra => "d_oc",
            BufferSlot::DirPos => "d_dir_pos",
            BufferSlot::DirNeg => "d_dir_neg",
        }
    }

    fn stream(self) -> u64 {
        100 + self as u64
    }

    pub fn for_variant(variant: Variant) -> Vec<BufferSlot> {
        let mut out = Vec::new();
        for &role in variant.roles() {
            match role {
                DiscRole::Vc => out.push(BufferSlot::Vc),
                DiscRole::OcSingle => out.push(BufferSlot::OcSingle),
                DiscRole::OcExtra => out.push(BufferSlot::OcExtra),
                DiscRole::Dir => out.extend([BufferSlot::DirPos, BufferSlot::DirNeg]),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Generator,
    Discriminator,
}

/// Counts of images each discriminator was evaluated on, by phase and
/// origin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeedLog {
    counts: BTreeMap<(DiscRole, Phase, Provenance), u64>,
}

impl FeedLog {
    pub fn record(&mut self, role: DiscRole, phase: Phase, tags: &[Provenance]) {
        for &t in tags {
            *self.counts.entry((role, phase, t)).or_default() += 1;
        }
    }

    pub fn count(&self, role: DiscRole, phase: Phase, tag: Provenance) -> u64 {
        self.counts.get(&(role, phase, tag)).copied().unwrap_or(0)
    }

    /// Images of origin `tag` seen by `role` in either phase.
    pub fn received(&self, role: DiscRole, tag: Provenance) -> u64 {
        self.count(role, Phase::Generator, tag) + self.count(role, Phase::Discriminator, tag)
    }

    pub fn entries(&self) -> impl Iterator<Item = (DiscRole, Phase, Provenance, u64)> + '_ {
        self.counts.iter().map(|(&(r, p, t), &n)| (r, p, t, n))
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: ModelBundle<T>,
    pub adam_g_oc: Adam<T>,
    pub adam_g_vc: Adam<T>,
    pub adam_d: Vec<(DiscRole, Adam<T>)>,
    pub buffers: Vec<(BufferSlot, ReplayBuffer<T>)>,
    /// Completed steps.
    pub step: u64,
    /// Current 0-based epoch.
    pub epoch: usize,
    /// Completed steps within the current epoch.
    pub step_in_epoch: usize,
    /// Discriminator input instrumentation; off unless set to `Some`.
    pub feed_log: Option<FeedLog>,
}

fn buffer_rng(seed: u64, slot: BufferSlot) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(slot.stream());
    r
}

fn param_grads<T: Real>(g: &Graph<T>, grads: &Gradients<T>, params: &ParamSet<T>) -> Vec<Tensor<T>> {
    (0..params.len())
        .map(|i| {
            g.param_var(params.key(i))
                .and_then(|v| grads.wrt(v))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params.tensors()[i].shape()))
        })
        .collect()
}

fn split_batch<T: Real>(t: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    (0..t.dims4()?.0).map(|i| t.batch_item(i)).collect()
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ModelBundle::new(cfg.variant, cfg.arch, cfg.mode.channels(), cfg.seed)?;
        let adam_d = model.discs.iter().map(|(r, d)| (*r, Adam::new(d.params()))).collect();
        let buffers = BufferSlot::for_variant(cfg.variant)
            .into_iter()
            .map(|s| (s, ReplayBuffer::new(cfg.buffer_capacity, buffer_rng(cfg.seed, s))))
            .collect();
        Ok(TrainState {
            adam_g_oc: Adam::new(model.g_oc.params()),
            adam_g_vc: Adam::new(model.g_vc.params()),
            adam_d,
            buffers,
            model,
            step: 0,
            epoch: 0,
            step_in_epoch: 0,
            feed_log: None,
        })
    }

    /// One update of both generators on the full generator objective with
    /// the discriminators frozen, then of every discriminator on its own
    /// loss over buffered fakes. Parameters are left untouched when any
    /// loss is non-finite.
    pub fn train_step(&mut self, cfg: &TrainConfig, batch_a: &Tensor<T>, batch_b: &Tensor<T>) -> Result<LossBreakdown> {
        if batch_a.dims4()?.0 != batch_b.dims4()?.0 {
            return Err(Error::Shape("appearance and structure batches differ in size".into()));
        }
        let lr = learning_rate(cfg.adam.lr, self.epoch, cfg.epochs);
        let variant = self.model.variant;
        if cfg.arch.spectral_norm {
            for (_, d) in &mut self.model.discs {
                d.power_iterate(cfg.power_iterations)?;
            }
        }
        let mut log = self.feed_log.take();

        let mut g = Graph::new();
        let a = g.constant(batch_a.clone());
        let b = g.constant(batch_b.clone());
        let pass = generator_objective(&mut g, variant, &cfg.weights, &self.model, a, b, true, &mut |r, t| {
            if let Some(l) = log.as_mut() {
                l.record(r, Phase::Generator, t)
            }
        });
        let pass = match pass {
            Ok(p) => p,
            Err(e) => {
                self.feed_log = log;
                return Err(e);
            }
        };
        let mut bd = LossBreakdown::default();
        for &(term, v) in &pass.terms {
            bd.set(term, g.scalar(v).as_f64());
        }
        bd.total = g.scalar(pass.total).as_f64();

        let fake_vc = split_batch(g.value(pass.fake_vc))?;
        let fake_oc = split_batch(g.value(pass.fake_oc))?;
        let rec_oc = split_batch(g.value(pass.rec_oc))?;
        let real_a = split_batch(batch_a)?;
        let real_b = split_batch(batch_b)?;

        let mut history: BTreeMap<BufferSlot, Vec<(Tensor<T>, Vec<Provenance>)>> = BTreeMap::new();
        for (slot, buf) in &mut self.buffers {
            use Provenance::*;
            let mut parts: Vec<Vec<Tensor<T>>> = Vec::new();
            let mut tags: Vec<Vec<Provenance>> = Vec::new();
            for i in 0..real_a.len() {
                let item = match slot {
                    BufferSlot::Vc => BufferItem { parts: vec![fake_vc[i].clone()], tags: vec![TranslatedStructure] },
                    BufferSlot::OcSingle => BufferItem { parts: vec![fake_oc[i].clone()], tags: vec![TranslatedAppearance] },
                    BufferSlot::OcExtra => BufferItem { parts: vec![rec_oc[i].clone()], tags: vec![ReconstructedAppearance] },
                    BufferSlot::DirPos => BufferItem {
                        parts: vec![real_a[i].clone(), fake_vc[i].clone()],
                        tags: vec![RealAppearance, TranslatedStructure],
                    },
                    BufferSlot::DirNeg => BufferItem {
                        parts: vec![fake_oc[i].clone(), real_b[i].clone()],
                        tags: vec![TranslatedAppearance, RealStructure],
                    },
                };
                let (out, _) = buf.query(item);
                parts.resize(out.parts.len(), Vec::new());
                tags.resize(out.tags.len(), Vec::new());
                for (p, t) in out.parts.into_iter().enumerate() {
                    parts[p].push(t);
                }
                for (p, t) in out.tags.into_iter().enumerate() {
                    tags[p].push(t);
                }
            }
            let stacked = parts
                .iter()
                .zip(tags)
                .map(|(p, t)| Ok((Tensor::stack(p)?, t)))
                .collect::<Result<Vec<_>>>()?;
            history.insert(*slot, stacked);
        }

        let mut gd = Graph::new();
        let mut feed = {
            let a = gd.constant(batch_a.clone());
            let b = gd.constant(batch_b.clone());
            let fvc = gd.constant(g.value(pass.fake_vc).clone());
            let foc = gd.constant(g.value(pass.fake_oc).clone());
            let roc = gd.constant(g.value(pass.rec_oc).clone());
            DiscriminatorFeed::current(&gd, a, b, fvc, foc, roc)?
        };
        for (slot, parts) in history {
            let mut tagged: Vec<Tagged> = parts
                .into_iter()
                .map(|(t, tags)| Tagged { var: gd.constant(t), tags })
                .collect();
            match slot {
                BufferSlot::Vc => feed.fake_vc = tagged.remove(0),
                BufferSlot::OcSingle => feed.fake_oc = tagged.remove(0),
                BufferSlot::OcExtra => feed.rec_oc = tagged.remove(0),
                BufferSlot::DirPos => {
                    let s = tagged.remove(1);
                    feed.dir_pos = (tagged.remove(0), s);
                }
                BufferSlot::DirNeg => {
                    let s = tagged.remove(1);
                    feed.dir_neg = (tagged.remove(0), s);
                }
            }
        }
        let losses = discriminator_losses(&mut gd, variant, &cfg.weights, &self.model, &feed, true, &mut |r, t| {
            if let Some(l) = log.as_mut() {
                l.record(r, Phase::Discriminator, t)
            }
        });
        self.feed_log = log;
        let losses = losses?;
        for &(role, v) in &losses {
            bd.set_disc(role, gd.scalar(v).as_f64());
        }
        if !bd.all_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!("{bd:?}"),
            });
        }

        let grads = g.backward(pass.total)?;
        let grad_oc = param_grads(&g, &grads, self.model.g_oc.params());
        let grad_vc = param_grads(&g, &grads, self.model.g_vc.params());
        let d_total = gd.combine(&losses.iter().map(|&(_, v)| (v, 1.0)).collect::<Vec<_>>())?;
        let dgrads = gd.backward(d_total)?;
        let grad_d: Vec<Vec<Tensor<T>>> = self
            .model
            .discs
            .iter()
            .map(|(_, d)| param_grads(&gd, &dgrads, d.params()))
            .collect();

        self.adam_g_oc.update(self.model.g_oc.params_mut(), &grad_oc, lr, &cfg.adam)?;
        self.adam_g_vc.update(self.model.g_vc.params_mut(), &grad_vc, lr, &cfg.adam)?;
        for (((role, d), (arole, opt)), gr) in self.model.discs.iter_mut().zip(&mut self.adam_d).zip(&grad_d) {
            debug_assert_eq!(role, arole);
            opt.update(d.params_mut(), gr, lr, &cfg.adam)?;
        }
        self.step += 1;
        Ok(bd)
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Reads a loss trace.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Training run over a dataset directory, writing `trace.log` and `ckpt/`
/// under a run directory.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub state: TrainState<T>,
    data_a: Vec<Tensor<T>>,
    data_b: Vec<Tensor<T>>,
    run_dir: PathBuf,
}

fn load_split<T: Real>(images: &[Image]) -> Vec<Tensor<T>> {
    images.iter().map(Image::to_tensor).collect()
}

impl<T: Real> Trainer<T> {
    /// Starts a fresh run; an existing trace in `run_dir` is replaced.
    pub fn new(config: TrainConfig, run_dir: &Path) -> Result<Self> {
        let state = TrainState::new(&config)?;
        let t = Self::with_state(config, state, run_dir)?;
        let trace = run_dir.join(TRACE_FILE);
        File::create(&trace).map_err(|e| Error::io(&trace, e))?;
        Ok(t)
    }

    /// Continues the run saved in `checkpoint`; trace records after the
    /// checkpoint's step are dropped so the trace picks up where it left off.
    pub fn resume(checkpoint: &Path, run_dir: &Path) -> Result<Self> {
        let ck = load_checkpoint::<T>(checkpoint)?;
        let step = ck.state.step;
        let t = Self::with_state(ck.config, ck.state, run_dir)?;
        let trace = run_dir.join(TRACE_FILE);
        let kept = if trace.exists() {
            read_trace(&trace)?.into_iter().filter(|r| r.step <= step).collect()
        } else {
            Vec::new()
        };
        let mut out = BufWriter::new(File::create(&trace).map_err(|e| Error::io(&trace, e))?);
        for r in kept {
            writeln!(out, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(&trace, e))?;
        }
        out.flush().map_err(|e| Error::io(&trace, e))?;
        Ok(t)
    }

    fn with_state(config: TrainConfig, state: TrainState<T>, run_dir: &Path) -> Result<Self> {
        config.validate()?;
        let ds = Dataset::open(&config.dataset)?;
        if ds.manifest.mode != config.mode || ds.manifest.size != config.size {
            return Err(Error::Dataset(format!(
                "dataset {} is {} mode at {} px, config expects {} mode at {} px",
                config.dataset.display(),
                ds.manifest.mode.name(),
                ds.manifest.size,
                config.mode.name(),
                config.size
            )));
        }
        let data_a = load_split(&ds.train_images(Domain::Appearance)?);
        let data_b = load_split(&ds.train_images(Domain::Structure)?);
        if data_a.is_empty() || data_b.is_empty() {
            return Err(Error::Dataset("training splits must not be empty".into()));
        }
        let ckpt = run_dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let t = Trainer {
            config,
            state,
            data_a,
            data_b,
            run_dir: run_dir.to_path_buf(),
        };
        if t.steps_per_epoch() == 0 {
            return Err(Error::Config(format!(
                "batch size {} exceeds the training set",
                t.config.batch_size
            )));
        }
        Ok(t)
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data_a.len().max(self.data_b.len()) / self.config.batch_size
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.epochs) as u64
    }

    fn epoch_order(&self, epoch: usize) -> (Vec<usize>, Vec<usize>) {
        let perm = |n: usize, side: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
            r.set_stream(((epoch as u64) << 1) | side);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut r);
            idx
        };
        (perm(self.data_a.len(), 0), perm(self.data_b.len(), 1))
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
    }

    /// Trains until the configured number of epochs is done, or until
    /// `stop_at_step` completed steps. Returns the last checkpoint written.
    pub fn run(&mut self, stop_at_step: Option<u64>) -> Result<Option<PathBuf>> {
        let trace_path = self.run_dir.join(TRACE_FILE);
        let mut trace = BufWriter::new(
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(&trace_path)
                .map_err(|e| Error::io(&trace_path, e))?,
        );
        let per_epoch = self.steps_per_epoch();
        let bs = self.config.batch_size;
        let mut last = None;
        while self.state.epoch < self.config.epochs {
            let (order_a, order_b) = self.epoch_order(self.state.epoch);
            while self.state.step_in_epoch < per_epoch {
                if stop_at_step.is_some_and(|s| self.state.step >= s) {
                    trace.flush().map_err(|e| Error::io(&trace_path, e))?;
                    return Ok(last);
                }
                let k = self.state.step_in_epoch * bs;
                let pick = |data: &[Tensor<T>], order: &[usize]| {
                    let items: Vec<Tensor<T>> = (k..k + bs).map(|j| data[order[j % order.len()]].clone()).collect();
                    Tensor::stack(&items)
                };
                let a = pick(&self.data_a, &order_a)?;
                let b = pick(&self.data_b, &order_b)?;
                let epoch = self.state.epoch;
                let losses = self.state.train_step(&self.config, &a, &b)?;
                self.state.step_in_epoch += 1;
                let rec = TraceRecord {
                    step: self.state.step,
                    epoch,
                    lr: learning_rate(self.config.adam.lr, epoch, self.config.epochs),
                    losses,
                };
                writeln!(trace, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&trace_path, e))?;
            }
            self.state.epoch += 1;
            self.state.step_in_epoch = 0;
            let e = self.state.epoch;
            let every = self.config.checkpoint_every;
            if e == self.config.epochs || (every > 0 && e % every == 0) {
                trace.flush().map_err(|e| Error::io(&trace_path, e))?;
                let p = self.checkpoint_path(e);
                save_checkpoint(&p, &self.config, &self.state)?;
                last = Some(p);
            }
        }
        trace.flush().map_err(|e| Error::io(&trace_path, e))?;
        Ok(last)
    }
}

/// Trains from scratch into `run_dir` and returns the final checkpoint.
pub fn train(config: &TrainConfig, run_dir: &Path) -> Result<PathBuf> {
    let mut t = Trainer::<f32>::new(config.clone(), run_dir)?;
    t.run(None)?
        .ok_or_else(|| Error::Checkpoint("training finished without writing a checkpoint".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Appearance → structure (`G_vc`).
    A2B,
    /// Structure → appearance (`G_oc`).
    B2A,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a2b" => Ok(Direction::A2B),
            "b2a" => Ok(Direction::B2A),
            other => Err(Error::Param(format!("unknown direction {other:?} (a2b|b2a)"))),
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Direction::A2B => "a2b",
            Direction::B2A => "b2a",
        }
    }
}

/// Applies one generator of `model` to `image`.
pub fn translate<T: Real>(model: &ModelBundle<T>, image: &Image, direction: Direction) -> Result<Image> {
    let (gen, domain) = match direction {
        Direction::A2B => (&model.g_vc, Domain::Structure),
        Direction::B2A => (&model.g_oc, Domain::Appearance),
    };
    let expected = gen.config().in_channels;
    if image.channels() != expected {
        return Err(Error::Shape(format!(
            "{} translation expects {expected}-channel input, got {}",
            direction.suffix(),
            image.channels()
        )));
    }
    let out = gen.apply(&image.to_tensor::<T>())?;
    Image::from_tensor(&out, 0, domain)
}

impl<T: Real> Translator for ModelBundle<T> {
    fn to_structure(&self, appearance: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.g_vc.apply(&appearance.cast::<T>())?.cast())
    }

    fn to_appearance(&self, structure: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.g_oc.apply(&structure.cast::<T>())?.cast())
    }
}
