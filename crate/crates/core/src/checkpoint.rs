//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic, format version, network config hash and JSON, step, then
//! every parameter slot, the alias table, optimizer moments and the three
//! queues. All floats are stored as `f64` so a resumed run continues bit
//! for bit.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::PooledFeature;
use crate::nn::{Model, NetConfig};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::queue::FeatureQueue;
use crate::train::{Queues, TrainState};

const MAGIC: &[u8; 8] = b"OPTRCKPT";
const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn matrix(&mut self, m: &Array2<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for &v in m.iter() {
            self.f64(v);
        }
    }
    fn queue(&mut self, q: &FeatureQueue) {
        self.u64(q.dim() as u64);
        self.u64(q.capacity() as u64);
        self.u64(q.write_index() as u64);
        for f in q.entries() {
            for &v in f.as_slice() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Version("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Version("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Version("invalid utf-8".into()))
    }
    fn matrix(&mut self) -> Result<Array2<f64>> {
        let (r, c) = (self.usize()?, self.usize()?);
        let n = r.checked_mul(c).ok_or_else(|| Error::Version("size overflow".into()))?;
        let data = self.take(n.checked_mul(8).ok_or_else(|| Error::Version("size overflow".into()))?)?;
        let values = data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((r, c), values).expect("shape"))
    }
    fn queue(&mut self) -> Result<FeatureQueue> {
        let (dim, cap, cursor) = (self.usize()?, self.usize()?, self.usize()?);
        let mut entries = Vec::with_capacity(cap);
        for _ in 0..cap {
            let v = (0..dim).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            entries.push(PooledFeature::from_unit(v));
        }
        FeatureQueue::from_parts(dim, entries, cursor)
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let cfg = state.model.config();
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&cfg.hash());
    w.str(&serde_json::to_string(cfg)?);
    w.u64(state.step);

    let params = &state.model.params;
    w.u64(params.len() as u64);
    for s in params.slots() {
        w.str(&s.name);
        w.u8(u8::from(s.trainable));
        w.matrix(&s.value);
    }
    let aliases = params.aliases();
    w.u64(aliases.len() as u64);
    for (alias, target) in &aliases {
        w.str(alias);
        w.str(target);
    }

    let a = &state.adam;
    w.f64(a.config.beta1);
    w.f64(a.config.beta2);
    w.f64(a.config.eps);
    w.u64(a.t);
    for (m, v) in a.m.iter().zip(&a.v) {
        w.matrix(m);
        w.matrix(v);
    }

    w.queue(&state.queues.img);
    w.queue(&state.queues.ots);
    w.queue(&state.queues.teacher);
    Ok(w.0)
}

/// Decodes a checkpoint, refusing it unless its embedded network hash
/// equals `expected`'s.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&NetConfig>) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Version("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(format!("format version {version}, expected {VERSION}")));
    }
    let hash = r.str()?;
    let cfg: NetConfig = serde_json::from_str(&r.str()?)?;
    if cfg.hash() != hash {
        return Err(Error::Version("embedded config does not match its hash".into()));
    }
    if let Some(exp) = expected {
        if exp.hash() != hash {
            return Err(Error::Version(format!(
                "checkpoint config hash {hash} differs from {}",
                exp.hash()
            )));
        }
    }
    let step = r.u64()?;

    let mut params = ParamStore::new();
    let n = r.usize()?;
    for _ in 0..n {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        let value = r.matrix()?;
        params.add(&name, value, trainable);
    }
    let n_alias = r.usize()?;
    for _ in 0..n_alias {
        let alias = r.str()?;
        let target = r.str()?;
        params.alias(&alias, &target)?;
    }

    let config = AdamConfig {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let t = r.u64()?;
    let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        m.push(r.matrix()?);
        v.push(r.matrix()?);
    }
    let queues = Queues {
        img: r.queue()?,
        ots: r.queue()?,
        teacher: r.queue()?,
    };
    if r.pos != bytes.len() {
        return Err(Error::Version("trailing bytes after checkpoint".into()));
    }
    Ok(TrainState {
        model: Model::from_params(cfg, params)?,
        adam: Adam { config, t, m, v },
        queues,
        step,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&NetConfig>) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?, expected)
}
