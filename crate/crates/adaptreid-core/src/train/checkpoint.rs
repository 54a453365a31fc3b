//! Versioned binary checkpoint container. Parameter and optimizer arrays are
//! stored as raw little-endian f64 bits keyed by name, so a save/load
//! round-trip is exact to the bit. Writes go to a temp file then rename.

use crate::error::{Error, Result};
use crate::model::{build_domain_models, build_reid_net, NetworkConfig};
use crate::nn::adam::Adam;
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use crate::train::schedule::PhaseFlags;
use crate::train::{JointState, ReidState, ADAM_BETA1, ADAM_BETA2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ARCP";
pub const VERSION: u32 = 1;

const KIND_JOINT: u8 = 0;
const KIND_REID: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    attention_enabled: bool,
    epoch: usize,
    attention_frozen: bool,
    disc_masked: bool,
    adam_d_steps: u64,
    adam_g_steps: u64,
    rng_seed: Vec<u8>,
    rng_word_pos_lo: u64,
    rng_word_pos_hi: u64,
    rng_stream: u64,
}

fn rng_to_header(rng: &ChaCha8Rng, h: &mut Header) {
    h.rng_seed = rng.get_seed().to_vec();
    let pos = rng.get_word_pos();
    h.rng_word_pos_lo = pos as u64;
    h.rng_word_pos_hi = (pos >> 64) as u64;
    h.rng_stream = rng.get_stream();
}

fn rng_from_header(h: &Header) -> Result<ChaCha8Rng> {
    let seed: [u8; 32] = h
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(h.rng_stream);
    rng.set_word_pos((h.rng_word_pos_hi as u128) << 64 | h.rng_word_pos_lo as u128);
    Ok(rng)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in checkpoint".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(&shape, data))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_params(w: &mut Writer, store: &ParamStore) {
    w.u64(store.len() as u64);
    for (_, entry) in store.iter() {
        w.str(&entry.name);
        w.tensor(&entry.value);
    }
}

fn read_params_into(r: &mut Reader, store: &mut ParamStore) -> Result<()> {
    let count = r.u64()? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} parameters, model expects {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let name = r.str()?;
        let value = r.tensor()?;
        let id = store.lookup(&name)?;
        if store.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?} in file but {:?} in model",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value;
    }
    Ok(())
}

fn write_moments(w: &mut Writer, adam: &Adam, store: &ParamStore) {
    let entries: Vec<_> = adam.moments().collect();
    w.u64(entries.len() as u64);
    for (idx, (m, v)) in entries {
        w.str(&store.get(crate::nn::params::ParamId(idx)).name);
        w.tensor(m);
        w.tensor(v);
    }
}

fn read_moments_into(r: &mut Reader, adam: &mut Adam, store: &ParamStore) -> Result<()> {
    let count = r.u64()? as usize;
    for _ in 0..count {
        let name = r.str()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        let id = store.lookup(&name)?;
        adam.set_moment(id.0, m, v);
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_joint(path: &Path, state: &JointState) -> Result<()> {
    let mut header = Header {
        network: state.models.config.clone(),
        attention_enabled: state.attention_enabled,
        epoch: state.epoch,
        attention_frozen: state.flags.attention_frozen,
        disc_masked: state.flags.disc_masked,
        adam_d_steps: state.adam_d.step_count,
        adam_g_steps: state.adam_g.step_count,
        rng_seed: vec![],
        rng_word_pos_lo: 0,
        rng_word_pos_hi: 0,
        rng_stream: 0,
    };
    rng_to_header(&state.rng, &mut header);
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(KIND_JOINT);
    w.u64(header_json.len() as u64);
    w.buf.extend_from_slice(&header_json);
    write_params(&mut w, &state.store);
    write_moments(&mut w, &state.adam_d, &state.store);
    write_moments(&mut w, &state.adam_g, &state.store);
    write_file(path, &w.buf)
}

fn read_envelope<'a>(data: &'a [u8], expect_kind: u8, path: &Path) -> Result<(Header, Reader<'a>)> {
    let mut r = Reader::new(data);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { expected: VERSION, found: version });
    }
    let kind = r.u8()?;
    if kind != expect_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind {kind} does not match the expected kind {expect_kind}"
        )));
    }
    let header_len = r.u64()? as usize;
    let header_bytes = r.take(header_len)?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    Ok((header, r))
}

pub fn load_joint(path: &Path) -> Result<JointState> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut r) = read_envelope(&data, KIND_JOINT, path)?;
    let (models, mut store) = build_domain_models(&header.network, header.attention_enabled, 0)?;
    read_params_into(&mut r, &mut store)?;
    let mut adam_d = Adam::new(ADAM_BETA1, ADAM_BETA2);
    adam_d.step_count = header.adam_d_steps;
    read_moments_into(&mut r, &mut adam_d, &store)?;
    let mut adam_g = Adam::new(ADAM_BETA1, ADAM_BETA2);
    adam_g.step_count = header.adam_g_steps;
    read_moments_into(&mut r, &mut adam_g, &store)?;
    r.finish()?;
    Ok(JointState {
        models,
        store,
        adam_d,
        adam_g,
        epoch: header.epoch,
        flags: PhaseFlags {
            attention_frozen: header.attention_frozen,
            disc_masked: header.disc_masked,
        },
        rng: rng_from_header(&header)?,
        attention_enabled: header.attention_enabled,
    })
}

pub fn save_reid(path: &Path, state: &ReidState) -> Result<()> {
    let mut header = Header {
        network: state.net.config.clone(),
        attention_enabled: false,
        epoch: state.epoch,
        attention_frozen: false,
        disc_masked: false,
        adam_d_steps: 0,
        adam_g_steps: state.adam.step_count,
        rng_seed: vec![],
        rng_word_pos_lo: 0,
        rng_word_pos_hi: 0,
        rng_stream: 0,
    };
    rng_to_header(&state.rng, &mut header);
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(KIND_REID);
    w.u64(header_json.len() as u64);
    w.buf.extend_from_slice(&header_json);
    write_params(&mut w, &state.store);
    write_moments(&mut w, &state.adam, &state.store);
    write_file(path, &w.buf)
}

pub fn load_reid(path: &Path) -> Result<ReidState> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut r) = read_envelope(&data, KIND_REID, path)?;
    let (net, mut store) = build_reid_net(&header.network, 0)?;
    read_params_into(&mut r, &mut store)?;
    let mut adam = Adam::new(ADAM_BETA1, ADAM_BETA2);
    adam.step_count = header.adam_g_steps;
    read_moments_into(&mut r, &mut adam, &store)?;
    r.finish()?;
    Ok(ReidState {
        net,
        store,
        adam,
        epoch: header.epoch,
        rng: rng_from_header(&header)?,
    })
}

/// Which kind of model a checkpoint holds, from its envelope alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Joint,
    Reid,
}

pub fn peek_kind(path: &Path) -> Result<CheckpointKind> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&data);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { expected: VERSION, found: version });
    }
    match r.u8()? {
        KIND_JOINT => Ok(CheckpointKind::Joint),
        KIND_REID => Ok(CheckpointKind::Reid),
        other => Err(Error::Checkpoint(format!("unknown checkpoint kind {other}"))),
    }
}
