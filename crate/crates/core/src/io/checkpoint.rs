//! Checkpoint container: magic, a text manifest, then a little-endian payload.
//!
//! ```text
//! "PUTCKPT\x01"
//! u64 LE manifest length
//! manifest (UTF-8 lines):
//!   config <key> <value>
//!   tensor <name> <dtype> <dims|-> <offset> <nbytes>
//! payload
//! ```
//!
//! Offsets are relative to the payload start. Tensors are laid out back to
//! back in insertion order, config lines are sorted by key, so equal contents
//! always serialize to equal bytes.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use put_tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PUTCKPT\x01";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U64 { .. } => "u64",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::U64 { shape, .. } => shape,
        }
    }

    fn nbytes(&self) -> usize {
        match self {
            TensorData::F32(t) => t.numel() * 4,
            TensorData::U64 { data, .. } => data.len() * 8,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    config: BTreeMap<String, String>,
    tensors: Vec<(String, TensorData)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn config(&self) -> &BTreeMap<String, String> {
        &self.config
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(format!("missing config key {key}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| corrupt(format!("config key {key}: cannot parse {raw:?}")))
    }

    /// Fails with both values when `key` differs from `expected`.
    pub fn expect(&self, key: &str, expected: impl Display) -> Result<()> {
        let expected = expected.to_string();
        let found = self.get(key)?;
        if found != expected {
            return Err(Error::ConfigMismatch {
                key: key.to_string(),
                expected,
                found: found.to_string(),
            });
        }
        Ok(())
    }

    pub fn push(&mut self, name: impl Into<String>, data: TensorData) {
        self.tensors.push((name.into(), data));
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor) {
        self.push(name, TensorData::F32(t));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, data: Vec<u64>) {
        let shape = vec![data.len()];
        self.push(name, TensorData::U64 { shape, data });
    }

    pub fn tensors(&self) -> &[(String, TensorData)] {
        &self.tensors
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    fn find(&self, name: &str) -> Result<&TensorData> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor> {
        match self.find(name)? {
            TensorData::F32(t) => Ok(t),
            other => Err(corrupt(format!("tensor {name}: expected dtype f32, found {}", other.dtype()))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<&[u64]> {
        match self.find(name)? {
            TensorData::U64 { data, .. } => Ok(data),
            other => Err(corrupt(format!("tensor {name}: expected dtype u64, found {}", other.dtype()))),
        }
    }

    /// Checks that `name` exists with exactly `shape`.
    pub fn f32_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.f32(name)?;
        if t.shape() != shape {
            return Err(Error::ConfigMismatch {
                key: format!("shape of {name}"),
                expected: format!("{shape:?}"),
                found: format!("{:?}", t.shape()),
            });
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        for (k, v) in &self.config {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(corrupt(format!("config entry {k:?} is not serializable")));
            }
            manifest.push_str(&format!("config {k} {v}\n"));
        }
        let mut offset = 0usize;
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) || !seen.insert(name.as_str()) {
                return Err(corrupt(format!("tensor name {name:?} is empty, has whitespace or repeats")));
            }
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            manifest.push_str(&format!("tensor {name} {} {dims} {offset} {}\n", t.dtype(), t.nbytes()));
            offset += t.nbytes();
        }
        let mut out = Vec::with_capacity(16 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in &self.tensors {
            t.write(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(corrupt("file too short for header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic or unsupported version"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let mlen = usize::try_from(mlen).map_err(|_| corrupt("manifest length overflows"))?;
        let mend = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("manifest extends past end of file"))?;
        let manifest = std::str::from_utf8(&bytes[16..mend]).map_err(|_| corrupt("manifest is not UTF-8"))?;
        let payload = &bytes[mend..];

        let mut ck = Checkpoint::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            let bad = |what: &str| corrupt(format!("manifest line {}: {what}", lineno + 1));
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("config") => {
                    let rest = parts.next().ok_or_else(|| bad("missing config key"))?;
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    if ck.config.insert(k.to_string(), v.to_string()).is_some() {
                        return Err(bad("duplicate config key"));
                    }
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.next().unwrap_or("").split(' ').collect();
                    let [name, dtype, dims, off, nb] = fields[..] else {
                        return Err(bad("expected name dtype dims offset nbytes"));
                    };
                    let shape: Vec<usize> = if dims == "-" {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                            .collect::<Result<_>>()?
                    };
                    let off: usize = off.parse().map_err(|_| bad("bad offset"))?;
                    let nb: usize = nb.parse().map_err(|_| bad("bad byte count"))?;
                    if off != expected_offset {
                        return Err(bad("tensor offsets overlap or leave gaps"));
                    }
                    let numel = shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .ok_or_else(|| bad("shape overflows"))?;
                    let width = match dtype {
                        "f32" => 4,
                        "u64" => 8,
                        _ => return Err(bad("unknown dtype")),
                    };
                    if numel.checked_mul(width) != Some(nb) {
                        return Err(bad("byte count does not match dtype and shape"));
                    }
                    let end = off.checked_add(nb).filter(|&e| e <= payload.len()).ok_or_else(|| {
                        corrupt(format!("tensor {name} extends past end of payload (file truncated?)"))
                    })?;
                    let raw = &payload[off..end];
                    let data = match dtype {
                        "f32" => TensorData::F32(Tensor::new(
                            shape,
                            raw.chunks_exact(4)
                                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                                .collect(),
                        )?),
                        _ => TensorData::U64 {
                            shape,
                            data: raw
                                .chunks_exact(8)
                                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                                .collect(),
                        },
                    };
                    if ck.has(name) {
                        return Err(bad("duplicate tensor name"));
                    }
                    ck.tensors.push((name.to_string(), data));
                    expected_offset = end;
                }
                _ => return Err(bad("unknown record")),
            }
        }
        if expected_offset != payload.len() {
            return Err(corrupt(format!(
                "payload has {} bytes but manifest covers {expected_offset}",
                payload.len()
            )));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp-ckpt");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("kind", "pvqvae");
        c.set("k", 128);
        c.push_f32("a", Tensor::new([2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        c.push_f32("s", Tensor::scalar(7.0));
        c.push_u64("usage", vec![0, u64::MAX, 3]);
        c
    }

    #[test]
    fn round_trip_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let a = back.f32("a").unwrap();
        assert_eq!(a.data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.u64("usage").unwrap(), &[0, u64::MAX, 3]);
        assert_eq!(back.f32("s").unwrap().shape(), &[] as &[usize]);
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[7] = 2;
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn mismatch_reports_both_values() {
        let err = sample().expect("k", 64).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("128") && msg.contains("64"), "{msg}");
    }

    #[test]
    fn dtype_mismatch_is_explicit() {
        let c = sample();
        assert!(c.u64("a").is_err());
        assert!(c.f32("usage").is_err());
    }
}
