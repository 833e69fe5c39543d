//! Binary tensor container.
//!
//! Layout (little-endian): magic `ABPP`, `u32` version, `u32` entry count,
//! then per entry a `u32` name length, the UTF-8 name, `u32` rank, `rank`
//! `u32` dims, a `u8` dtype tag (0 = f32, 1 = f64) and the raw values.
//! A JSON sidecar next to the file records configuration and metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"ABPP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            Self::F32 => 0,
            Self::F64 => 1,
        }
    }
}

/// One named tensor and the precision it is stored at.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub dtype: DType,
}

impl Entry {
    pub fn f64(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            dtype: DType::F64,
        }
    }

    pub fn f32(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            dtype: DType::F32,
        }
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(entries.len(), "entry count")?.to_le_bytes());
    for e in entries {
        out.extend_from_slice(&u32_of(e.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let shape = e.tensor.shape();
        out.extend_from_slice(&u32_of(shape.len(), "rank")?.to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        out.push(e.dtype.tag());
        match e.dtype {
            DType::F32 => e.tensor.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => e.tensor.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a tensor container".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported container version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let (dtype, data) = match r.take(1)?[0] {
            0 => (
                DType::F32,
                r.take(numel * 4)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
            ),
            1 => (
                DType::F64,
                r.take(numel * 8)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            ),
            t => return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype tag {t}"))),
        };
        entries.push(Entry {
            tensor: Tensor::new(shape, data)?,
            name,
            dtype,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(entries)?).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// `model.ckpt` -> `model.ckpt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

const OPTIM_STEP: &str = "optim.step";

fn store_entries(store: &ParamStore) -> Vec<Entry> {
    store.iter().map(|(n, t)| Entry::f64(n, t.clone())).collect()
}

/// Saves every parameter at double precision, the optimizer moments when
/// given, and `meta` as the sidecar.
pub fn save_store<T: Serialize>(path: &Path, store: &ParamStore, adam: Option<&AdamState>, meta: &T) -> Result<()> {
    let mut entries = store_entries(store);
    if let Some(adam) = adam {
        entries.push(Entry::f64(OPTIM_STEP, Tensor::scalar(adam.step_count() as f64)));
        let (first, second) = adam.moments();
        for (id, (m, v)) in store.ids().zip(first.iter().zip(second)) {
            let shape = store.get(id).shape().to_vec();
            let name = store.name(id);
            entries.push(Entry::f64(format!("optim.m.{name}"), Tensor::new(shape.clone(), m.clone())?));
            entries.push(Entry::f64(format!("optim.v.{name}"), Tensor::new(shape, v.clone())?));
        }
    }
    write_entries(path, &entries)?;
    write_sidecar(path, meta)
}

/// Parameters and, if present, optimizer moments read from a container.
pub struct LoadedStore {
    pub params: ParamStore,
    optim: Vec<Entry>,
}

impl LoadedStore {
    pub fn has_optimizer(&self) -> bool {
        self.optim.iter().any(|e| e.name == OPTIM_STEP)
    }

    /// Restores the optimizer moments for the parameters of `store`.
    pub fn restore_optimizer(&self, store: &ParamStore, adam: &mut AdamState) -> Result<()> {
        let find = |n: &str| self.optim.iter().find(|e| e.name == n);
        let step = find(OPTIM_STEP).ok_or_else(|| Error::Checkpoint("no optimizer state".into()))?;
        if step.tensor.item() == 0.0 {
            return Ok(());
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            let (Some(m), Some(v)) = (find(&format!("optim.m.{name}")), find(&format!("optim.v.{name}"))) else {
                return Err(Error::Checkpoint(format!("missing optimizer moments for `{name}`")));
            };
            if m.tensor.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!("optimizer moments for `{name}` have the wrong shape")));
            }
            first.push(m.tensor.data().to_vec());
            second.push(v.tensor.data().to_vec());
        }
        adam.restore(step.tensor.item() as u64, first, second)
    }
}

pub fn load_store(path: &Path) -> Result<LoadedStore> {
    let mut params = ParamStore::new();
    let mut optim = Vec::new();
    for e in read_entries(path)? {
        if e.name.starts_with("optim.") {
            optim.push(e);
        } else {
            params.register(e.name, e.tensor);
        }
    }
    Ok(LoadedStore { params, optim })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f64_bits() {
        let t = Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.1).sin() / 3.0);
        let entries = vec![Entry::f64("a.w", t.clone()), Entry::f32("b", Tensor::scalar(0.25))];
        let back = decode(&encode(&entries).unwrap()).unwrap();
        assert_eq!(back[0].tensor.data(), t.data());
        assert_eq!(back[0].name, "a.w");
        assert_eq!(back[1].dtype, DType::F32);
        assert_eq!(back[1].tensor.item(), 0.25);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[Entry::f64("x", Tensor::scalar(1.0))]).unwrap();
        assert_eq!(&bytes[..4], b"ABPP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'x');
    }

    #[test]
    fn corruption_is_reported() {
        let mut bytes = encode(&[Entry::f64("x", Tensor::scalar(1.0))]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'Z';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_fn(&[3], |i| i as f64));
        store.get_mut(crate::numerics::ParamId(0)).accumulate_grad(&[0.1, -0.2, 0.3]).unwrap();
        let mut adam = AdamState::new(0.01);
        adam.step(&mut store).unwrap();
        save_store(&path, &store, Some(&adam), &serde_json::json!({"kind": "test"})).unwrap();
        let loaded = load_store(&path).unwrap();
        let mut fresh = AdamState::new(0.01);
        loaded.restore_optimizer(&loaded.params, &mut fresh).unwrap();
        assert_eq!(fresh.step_count(), 1);
        assert_eq!(fresh.moments().0, adam.moments().0);
        let meta: serde_json::Value = read_sidecar(&path).unwrap();
        assert_eq!(meta["kind"], "test");
    }
}
