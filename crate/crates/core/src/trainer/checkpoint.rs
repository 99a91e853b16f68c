//! Checkpoint container.
//!
//! Layout: the 8-byte magic, the manifest length as a little-endian `u64`,
//! the JSON manifest, then every array as raw little-endian values in
//! manifest order. Each manifest tensor entry records its name, shape and
//! byte offset from the start of the array section.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, BufferItem, BufferSlot, ReplayBuffer, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::losses::Provenance;
use crate::nets::{DiscRole, ParamSet, Variant};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XDCKPT\x00\x01";
const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("RNG seed has {} bytes, expected 32", self.seed.len())))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(self.stream);
        r.set_word_pos(pos);
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BufferEntry {
    slot: BufferSlot,
    capacity: usize,
    rng: RngState,
    items: Vec<Vec<Provenance>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    dtype: DType,
    variant: Variant,
    structure_channels: usize,
    config: TrainConfig,
    step: u64,
    epoch: usize,
    step_in_epoch: usize,
    adam_steps: Vec<(String, u64)>,
    spectral_iterations: Vec<(String, Vec<u64>)>,
    buffers: Vec<BufferEntry>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub state: TrainState<T>,
}

struct Writer<T> {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real> Writer<T> {
    fn put(&mut self, name: String, shape: &[usize], data: &[T]) {
        self.entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: self.bytes.len() as u64,
        });
        T::write_le(data, &mut self.bytes);
    }

    fn params(&mut self, prefix: &str, params: &ParamSet<T>, adam: &Adam<T>) {
        for (i, name) in params.names().iter().enumerate() {
            let p = &params.tensors()[i];
            self.put(format!("{prefix}/{name}"), p.shape(), p.data());
            self.put(format!("{prefix}/adam_m/{name}"), p.shape(), adam.m[i].data());
            self.put(format!("{prefix}/adam_v/{name}"), p.shape(), adam.v[i].data());
        }
    }
}

/// Serializes `state` to bytes.
pub fn encode_checkpoint<T: Real>(config: &TrainConfig, state: &TrainState<T>) -> Result<Vec<u8>> {
    let model = &state.model;
    let mut w = Writer::<T> {
        entries: Vec::new(),
        bytes: Vec::new(),
        _t: std::marker::PhantomData,
    };
    w.params("g_oc", model.g_oc.params(), &state.adam_g_oc);
    w.params("g_vc", model.g_vc.params(), &state.adam_g_vc);
    let mut adam_steps = vec![("g_oc".to_string(), state.adam_g_oc.t), ("g_vc".to_string(), state.adam_g_vc.t)];
    let mut spectral_iterations = Vec::new();
    for ((role, d), (_, adam)) in model.discs.iter().zip(&state.adam_d) {
        let name = role.name();
        w.params(name, d.params(), adam);
        adam_steps.push((name.to_string(), adam.t));
        for (i, s) in d.spectral_states().iter().enumerate() {
            w.put(format!("{name}/sigma_u/{i}"), &[s.u.len()], &s.u);
            w.put(format!("{name}/sigma_v/{i}"), &[s.v.len()], &s.v);
        }
        spectral_iterations.push((name.to_string(), d.spectral_states().iter().map(|s| s.iterations).collect()));
    }
    let mut buffers = Vec::new();
    for (slot, buf) in &state.buffers {
        for (j, item) in buf.items().iter().enumerate() {
            for (p, t) in item.parts.iter().enumerate() {
                w.put(format!("buffer/{}/{j}/{p}", slot.name()), t.shape(), t.data());
            }
        }
        buffers.push(BufferEntry {
            slot: *slot,
            capacity: buf.capacity(),
            rng: RngState::capture(&buf.rng),
            items: buf.items().iter().map(|i| i.tags.clone()).collect(),
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        dtype: T::DTYPE,
        variant: model.variant,
        structure_channels: model.structure_channels,
        config: config.clone(),
        step: state.step,
        epoch: state.epoch,
        step_in_epoch: state.step_in_epoch,
        adam_steps,
        spectral_iterations,
        buffers,
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + w.bytes.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.bytes);
    Ok(out)
}

pub fn save_checkpoint<T: Real>(path: &Path, config: &TrainConfig, state: &TrainState<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_checkpoint(config, state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a, T> {
    arrays: HashMap<&'a str, (&'a [usize], Vec<T>)>,
}

impl<T: Real> Reader<'_, T> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let (s, data) = self
            .arrays
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        if s != shape {
            return Err(Error::Checkpoint(format!("array {name} has shape {s:?}, expected {shape:?}")));
        }
        Ok(data)
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        Tensor::from_vec(shape, self.take(name, shape)?)
    }

    fn params(&mut self, prefix: &str, params: &mut ParamSet<T>, adam: &mut Adam<T>) -> Result<()> {
        let names = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let shape = params.tensors()[i].shape().to_vec();
            params.tensors_mut()[i] = self.tensor(&format!("{prefix}/{name}"), &shape)?;
            adam.m[i] = self.tensor(&format!("{prefix}/adam_m/{name}"), &shape)?;
            adam.v[i] = self.tensor(&format!("{prefix}/adam_v/{name}"), &shape)?;
        }
        Ok(())
    }
}

fn lookup<V: Copy>(pairs: &[(String, V)], name: &str) -> Result<V> {
    pairs
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Checkpoint(format!("manifest has no entry for {name}")))
}

/// Parses a checkpoint produced by [`encode_checkpoint`].
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {:?} arrays, requested {:?}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let data = &bytes[16 + len..];
    let elem = T::DTYPE.size_of();
    let mut arrays = HashMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let chunk = data
            .get(start..start + n * elem)
            .ok_or_else(|| Error::Checkpoint(format!("array {} runs past the end of the file", e.name)))?;
        arrays.insert(e.name.as_str(), (e.shape.as_slice(), T::read_le(chunk)));
    }
    let stored: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>() * elem).sum();
    if stored != data.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the arrays", data.len() as i64 - stored as i64)));
    }
    let mut r = Reader { arrays };

    let config = manifest.config.clone();
    let mut state = TrainState::<T>::new(&config)?;
    if state.model.variant != manifest.variant || state.model.structure_channels != manifest.structure_channels {
        return Err(Error::Checkpoint("manifest model does not match its config".into()));
    }
    r.params("g_oc", state.model.g_oc.params_mut(), &mut state.adam_g_oc)?;
    r.params("g_vc", state.model.g_vc.params_mut(), &mut state.adam_g_vc)?;
    state.adam_g_oc.t = lookup(&manifest.adam_steps, "g_oc")?;
    state.adam_g_vc.t = lookup(&manifest.adam_steps, "g_vc")?;
    for ((role, d), (_, adam)) in state.model.discs.iter_mut().zip(&mut state.adam_d) {
        let name = role.name();
        r.params(name, d.params_mut(), adam)?;
        adam.t = lookup(&manifest.adam_steps, name)?;
        let iters = manifest
            .spectral_iterations
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Checkpoint(format!("no spectral state for {name}")))?;
        for (i, s) in d.spectral_states_mut().iter_mut().enumerate() {
            s.u = r.take(&format!("{name}/sigma_u/{i}"), &[s.u.len()])?;
            s.v = r.take(&format!("{name}/sigma_v/{i}"), &[s.v.len()])?;
            s.iterations = *iters
                .get(i)
                .ok_or_else(|| Error::Checkpoint(format!("missing iteration count for {name} layer {i}")))?;
        }
    }
    let shapes = |slot: BufferSlot, p: usize| -> Vec<usize> {
        let s = config.size;
        let sc = manifest.structure_channels;
        let c = match (slot, p) {
            (BufferSlot::Vc, _) | (BufferSlot::DirPos, 1) | (BufferSlot::DirNeg, 1) => sc,
            _ => 3,
        };
        vec![1, c, s, s]
    };
    if state.buffers.len() != manifest.buffers.len() {
        return Err(Error::Checkpoint("buffer list does not match the variant".into()));
    }
    for ((slot, buf), entry) in state.buffers.iter_mut().zip(&manifest.buffers) {
        if *slot != entry.slot {
            return Err(Error::Checkpoint(format!("unexpected buffer {:?}", entry.slot)));
        }
        let mut items = Vec::new();
        for (j, tags) in entry.items.iter().enumerate() {
            let parts = (0..tags.len())
                .map(|p| r.tensor(&format!("buffer/{}/{j}/{p}", slot.name()), &shapes(*slot, p)))
                .collect::<Result<Vec<_>>>()?;
            items.push(BufferItem { parts, tags: tags.clone() });
        }
        *buf = ReplayBuffer::restore(entry.capacity, items, entry.rng.restore()?);
    }
    if let Some(extra) = r.arrays.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array {extra}")));
    }
    state.step = manifest.step;
    state.epoch = manifest.epoch;
    state.step_in_epoch = manifest.step_in_epoch;
    Ok(Checkpoint { config, state })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl<T: Real> Checkpoint<T> {
    /// Role of every discriminator stored in the checkpoint.
    pub fn roles(&self) -> Vec<DiscRole> {
        self.state.model.discs.iter().map(|(r, _)| *r).collect()
    }
}
