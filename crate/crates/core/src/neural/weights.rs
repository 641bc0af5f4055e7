//! Weights container.
//!
//! Layout: the 8-byte magic `GSUNWTS\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! parameter as little-endian `f64` values in manifest order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::config::EstimatorConfig;
use super::network::EstimatorWeights;
use crate::error::{Error, Result};
use crate::numcore::rng::RngStream;

pub const MAGIC: &[u8; 8] = b"GSUNWTS\0";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub version: u32,
    pub fingerprint: String,
    pub config: EstimatorConfig,
    pub params: Vec<ManifestEntry>,
}

fn fmt_err(m: impl Into<String>) -> Error {
    Error::WeightsFormat(m.into())
}

pub fn write_weights<W: Write>(w: &EstimatorWeights, mut out: W) -> Result<()> {
    let store = &w.store;
    let header = WeightsHeader {
        version: FORMAT_VERSION,
        fingerprint: w.fingerprint(),
        config: w.config.clone(),
        params: store.ids().map(|id| ManifestEntry { name: store.name(id).to_string(), shape: [store.get(id).rows, store.get(id).cols] }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for id in store.ids() {
        let t = store.get(id);
        if !t.is_finite() {
            return Err(fmt_err(format!("parameter {} has non-finite entries", store.name(id))));
        }
        let mut buf = Vec::with_capacity(8 * t.len());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Rebuilds the network from the stored config and fills every parameter
/// from the payload, checking names and shapes against the manifest.
pub fn read_weights<R: Read>(mut input: R) -> Result<EstimatorWeights> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| fmt_err("file too short for the magic bytes"))?;
    if &magic != MAGIC {
        return Err(fmt_err("bad magic bytes"));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4).map_err(|_| fmt_err("truncated version"))?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8).map_err(|_| fmt_err("truncated header length"))?;
    let len = u64::from_le_bytes(b8);
    if len > MAX_HEADER {
        return Err(fmt_err(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json).map_err(|_| fmt_err("truncated header"))?;
    let header: WeightsHeader = serde_json::from_slice(&json).map_err(|e| fmt_err(format!("header: {e}")))?;
    if header.config.fingerprint() != header.fingerprint {
        return Err(fmt_err("config fingerprint mismatch"));
    }
    let mut w = EstimatorWeights::init(&header.config, &mut RngStream::new(0))?;
    if header.params.len() != w.store.len() {
        return Err(fmt_err(format!("manifest lists {} parameters, config builds {}", header.params.len(), w.store.len())));
    }
    let ids: Vec<_> = w.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let t = w.store.get_mut(id);
        if entry.shape != [t.rows, t.cols] {
            return Err(fmt_err(format!("parameter {} has shape {:?}, expected {}x{}", entry.name, entry.shape, t.rows, t.cols)));
        }
        let mut buf = vec![0u8; 8 * t.len()];
        input.read_exact(&mut buf).map_err(|_| fmt_err(format!("truncated payload for {}", entry.name)))?;
        for (v, chunk) in t.data.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(fmt_err(format!("parameter {} has non-finite entries", entry.name)));
            }
        }
        let expected = w.store.name(id);
        if expected != entry.name {
            return Err(fmt_err(format!("manifest name {} where {expected} was expected", entry.name)));
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(fmt_err("trailing bytes after the payload"));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = EstimatorConfig::desk();
        let w = EstimatorWeights::init(&cfg, &mut RngStream::new(8)).unwrap();
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back.config, cfg);
        for id in w.store.ids() {
            assert_eq!(w.store.get(id), back.store.get(id));
            assert_eq!(w.store.name(id), back.store.name(id));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let w = EstimatorWeights::init(&EstimatorConfig::desk(), &mut RngStream::new(8)).unwrap();
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights(bad.as_slice()), Err(Error::WeightsFormat(_))));
        assert!(matches!(read_weights(&buf[..buf.len() - 3]), Err(Error::WeightsFormat(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_weights(extra.as_slice()), Err(Error::WeightsFormat(_))));
        let mut v2 = buf;
        v2[8] = 2;
        assert!(matches!(read_weights(v2.as_slice()), Err(Error::WeightsFormat(_))));
    }
}
