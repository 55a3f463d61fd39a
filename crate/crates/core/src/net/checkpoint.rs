//! Binary checkpoint files.
//!
//! Layout (little endian): magic `SLUC`, u32 version, config JSON, 32-byte
//! body digest, alphabet id, lineage, RNG state, then a tensor table where
//! each entry carries name, section, dtype tag, dims and raw data. A SHA-256
//! of everything before it closes the file. Strings are u32-length prefixed.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::{check_set, Layout, ModelCheckpoint, RngState};
use super::optim::Sgd;
use super::tensors::TensorSet;
use super::NetError;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SLUC";
const OPTIMIZER_MAGIC: &[u8; 4] = b"SLUO";
const DTYPE_F64: u8 = 1;

const SECTIONS: [&str; 3] = ["body", "stats", "head"];

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
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensors(&mut self, sets: &[(u8, &TensorSet)]) {
        self.u32(sets.iter().map(|(_, s)| s.len() as u32).sum());
        for &(section, set) in sets {
            for (name, t) in set.iter() {
                self.bytes(name.as_bytes());
                self.u8(section);
                self.u8(DTYPE_F64);
                self.u32(t.ndim() as u32);
                for &d in t.shape() {
                    self.u64(d as u64);
                }
                for &v in t.iter() {
                    self.0.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.0);
        self.0.extend_from_slice(&digest);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(NetError::Truncated)?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8], NetError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, NetError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| NetError::Format("invalid utf-8 string".into()))
    }
    fn tensors(&mut self, sections: usize) -> Result<Vec<TensorSet>, NetError> {
        let mut sets = vec![TensorSet::new(); sections];
        let count = self.u32()?;
        for _ in 0..count {
            let name = self.string()?;
            let section = self.u8()? as usize;
            if section >= sections {
                return Err(NetError::Format(format!("tensor {name}: unknown section {section}")));
            }
            let dtype = self.u8()?;
            if dtype != DTYPE_F64 {
                return Err(NetError::Format(format!("tensor {name}: unsupported dtype tag {dtype}")));
            }
            let ndim = self.u32()? as usize;
            let dims = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(NetError::Truncated)?;
            let raw = self.take(numel.checked_mul(8).ok_or(NetError::Truncated)?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| NetError::Format(e.to_string()))?;
            sets[section].insert(name, t);
        }
        Ok(sets)
    }
}

/// Verifies the trailing checksum and returns the payload.
fn open<'a>(buf: &'a [u8], magic: &[u8; 4]) -> Result<Reader<'a>, NetError> {
    if buf.len() < 4 || &buf[..4] != magic {
        return Err(if buf.len() < 4 { NetError::Truncated } else { NetError::Format("bad magic".into()) });
    }
    if buf.len() < 8 + 32 {
        return Err(NetError::Truncated);
    }
    let (payload, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(NetError::Checksum);
    }
    let mut r = Reader { buf: payload, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Format(format!("unsupported version {version}")));
    }
    Ok(r)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_checkpoint(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(CHECKPOINT_VERSION);
    w.bytes(&serde_json::to_vec(&ckpt.config).expect("config serializes"));
    w.0.extend_from_slice(&ckpt.config.body_digest());
    w.bytes(ckpt.alphabet_id.as_bytes());
    w.u32(ckpt.lineage.len() as u32);
    for stage in &ckpt.lineage {
        w.bytes(stage.as_bytes());
    }
    w.u64(ckpt.rng_state.seed);
    w.0.extend_from_slice(&ckpt.rng_state.word_pos.to_le_bytes());
    w.tensors(&[(0, &ckpt.body), (1, &ckpt.stats), (2, &ckpt.head)]);
    w.finish()
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelCheckpoint, NetError> {
    let mut r = open(buf, MAGIC)?;
    let config: ModelConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| NetError::Format(format!("config: {e}")))?;
    let digest = r.take(32)?;
    if digest != config.body_digest() {
        return Err(NetError::Format("body digest does not match stored config".into()));
    }
    let alphabet_id = r.string()?;
    let n = r.u32()?;
    let lineage = (0..n).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
    let seed = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut sets = r.tensors(SECTIONS.len())?.into_iter();
    if r.pos != r.buf.len() {
        return Err(NetError::Format("trailing bytes after tensor table".into()));
    }
    let ckpt = ModelCheckpoint {
        config,
        body: sets.next().expect("body"),
        stats: sets.next().expect("stats"),
        head: sets.next().expect("head"),
        alphabet_id,
        rng_state: RngState { seed, word_pos },
        lineage,
    };
    ckpt.config.validate()?;
    ckpt.check_layout()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<(), NetError> {
    write_atomic(path.as_ref(), &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint, NetError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and checks it against the layout `expected` implies,
/// naming the first tensor whose shape disagrees.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelCheckpoint, NetError> {
    let ckpt = load_checkpoint(path)?;
    let layout = Layout::of(expected);
    check_set(&ckpt.body, &layout.body)?;
    check_set(&ckpt.stats, &layout.stats)?;
    check_set(&ckpt.head, &layout.head)?;
    if ckpt.config != *expected {
        return Err(NetError::ConfigMismatch(format!("stored {:?}, expected {:?}", ckpt.config, expected)));
    }
    Ok(ckpt)
}

/// Persists optimizer momentum so interrupted training resumes exactly.
pub fn save_optimizer(opt: &Sgd, path: impl AsRef<Path>) -> Result<(), NetError> {
    let mut w = Writer(OPTIMIZER_MAGIC.to_vec());
    w.u32(CHECKPOINT_VERSION);
    w.0.extend_from_slice(&opt.momentum.to_le_bytes());
    w.0.extend_from_slice(&opt.clip_norm.unwrap_or(f64::NAN).to_le_bytes());
    let empty = TensorSet::new();
    let (body, head) = opt.velocity().unwrap_or((&empty, &empty));
    w.u8(u8::from(opt.velocity().is_some()));
    w.tensors(&[(0, body), (1, head)]);
    write_atomic(path.as_ref(), &w.finish())
}

pub fn load_optimizer(path: impl AsRef<Path>) -> Result<Sgd, NetError> {
    let buf = fs::read(path)?;
    let mut r = open(&buf, OPTIMIZER_MAGIC)?;
    let momentum = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let clip = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let has_velocity = r.u8()? != 0;
    let mut sets = r.tensors(2)?.into_iter();
    let mut opt = Sgd::new(momentum, (!clip.is_nan()).then_some(clip));
    if has_velocity {
        opt.set_velocity(sets.next().expect("body"), sets.next().expect("head"));
    }
    Ok(opt)
}
