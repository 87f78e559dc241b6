//! Versioned little-endian checkpoint format.
//!
//! Layout: magic, `u32` version, model and training config as text pairs,
//! `u64` epoch, best validation score and epoch, three generator states
//! (data, shuffle, init), parameter records, optimizer step and moment
//! records. A tensor record is `u32` name length, name bytes, `u8` kind,
//! `u32` rank, `u64` dims, then the `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MISRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha generator: seed, stream and word position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Best validation cPSNR so far and the epoch it was reached.
    pub best: Option<(f64, u64)>,
    /// Data, shuffle and init generators.
    pub rngs: [RngState; 3],
    pub store: ParamStore<f32>,
    pub adam: Adam,
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn pairs(&mut self, pairs: &[(&str, String)]) {
        self.u32(pairs.len() as u32);
        for (k, v) in pairs {
            self.text(k);
            self.text(v);
        }
    }
    fn tensor(&mut self, name: &str, kind: u8, t: &Tensor<f32>) {
        self.text(name);
        self.bytes(&[kind]);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.bytes(&v.to_le_bytes());
        }
    }
    fn rng(&mut self, r: &RngState) {
        self.bytes(&r.seed);
        self.u64(r.stream);
        self.bytes(&r.word_pos.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("non-UTF-8 text"))
    }
    fn pairs(&mut self) -> Result<Vec<(String, String)>> {
        (0..self.u32()?).map(|_| Ok((self.text()?, self.text()?))).collect()
    }
    fn tensor(&mut self) -> Result<(String, u8, Tensor<f32>)> {
        let name = self.text()?;
        let kind = self.take(1)?[0];
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("tensor '{name}' has rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor size overflow"))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor size overflow"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, kind, Tensor::new(&dims, data)?))
    }
    fn rng(&mut self) -> Result<RngState> {
        Ok(RngState { seed: self.array()?, stream: self.u64()?, word_pos: u128::from_le_bytes(self.array()?) })
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.pairs(&ck.model.to_pairs());
    w.pairs(&ck.train.to_pairs());
    w.u64(ck.epoch);
    let (score, at) = ck.best.unwrap_or((f64::NAN, u64::MAX));
    w.f64(score);
    w.u64(at);
    for r in &ck.rngs {
        w.rng(r);
    }
    w.u32(ck.store.len() as u32);
    for (name, p) in ck.store.iter() {
        w.tensor(name, if p.kind == ParamKind::Trainable { 0 } else { 1 }, &p.value);
    }
    w.u64(ck.adam.step);
    for v in [ck.adam.lr, ck.adam.beta1, ck.adam.beta2, ck.adam.eps] {
        w.f64(v);
    }
    w.u32(ck.adam.moments.len() as u32);
    for (name, (m, v)) in &ck.adam.moments {
        w.tensor(name, 2, m);
        w.tensor(name, 3, v);
    }
    w.0
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let model_pairs = r.pairs()?;
    let model = ModelConfig::from_pairs(model_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut train = TrainConfig::default();
    for (k, v) in r.pairs()? {
        train.set(&k, &v)?;
    }
    let epoch = r.u64()?;
    let (score, at) = (r.f64()?, r.u64()?);
    let best = (at != u64::MAX).then_some((score, at));
    let rngs = [r.rng()?, r.rng()?, r.rng()?];
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let (name, kind, t) = r.tensor()?;
        let kind = match kind {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(corrupt(format!("parameter '{name}' has kind {k}"))),
        };
        store.insert(name, t, kind);
    }
    let step = r.u64()?;
    let mut adam = Adam::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    adam.step = step;
    for _ in 0..r.u32()? {
        let (name, k1, m) = r.tensor()?;
        let (name2, k2, v) = r.tensor()?;
        if (k1, k2) != (2, 3) || name != name2 {
            return Err(corrupt(format!("malformed optimizer record for '{name}'")));
        }
        adam.moments.insert(name, (m, v));
    }
    if r.pos != buf.len() {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { model, train, epoch, best, rngs, store, adam })
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(ck))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { embed_dim: 4, feature_dim: 4, misab_blocks: 1, frames: 2, bias_extent: 8, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = Model::new(&cfg).unwrap().init::<f32>(&mut rng);
        rng.next_u64();
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let grads = store.trainable().map(|(n, t)| (n.to_string(), t.map(|v| v * 0.5))).collect();
        let mut s2 = store.clone();
        adam.update(&mut s2, &grads).unwrap();
        Checkpoint {
            model: cfg,
            train: TrainConfig::desk(),
            epoch: 7,
            best: Some((31.5, 4)),
            rngs: [RngState::capture(&rng), RngState::capture(&ChaCha8Rng::seed_from_u64(9)), RngState::capture(&rng)],
            store: s2,
            adam,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let back = decode(&encode(&ck)).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.train, ck.train);
        assert_eq!((back.epoch, back.best), (ck.epoch, ck.best));
        assert_eq!(back.rngs, ck.rngs);
        assert!(back.store.bit_equal(&ck.store));
        assert_eq!(back.adam, ck.adam);
        let mut a = back.rngs[0].restore();
        let mut b = ck.rngs[0].restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
