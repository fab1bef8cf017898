// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary trace files and the on-disk trace cache.
//!
//! A trace file is a fixed 32-byte header followed by little-endian `f32`
//! values in row-major order:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `XMRCTRC1`                        |
//! | 8      | 4    | kind (0 = relevance, 1 = hidden states) |
//! | 12     | 4    | rank (2 or 3)                           |
//! | 16     | 12   | dims, three `u32`, unused dims are 1    |
//! | 28     | 4    | reserved, zero                          |
//!
//! The cache lays files out as `traces/<backend>/<sample>/<artifact>.bin`
//! with a `manifest.json` per backend mapping `<sample>/<artifact>` to the
//! file, the prompt digest it was computed from, its shape and its SHA-256.
//! Entries are write-once; files are written to a temp name and renamed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, HiddenTrace, RelevanceMatrix, RelevanceTarget};
use crate::digest::{path_component, sha256_hex, write_atomic};
use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 8] = b"XMRCTRC1";
const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Relevance,
    Hidden,
}

impl TraceKind {
    fn code(self) -> u32 {
        match self {
            TraceKind::Relevance => 0,
            TraceKind::Hidden => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(TraceKind::Relevance),
            1 => Ok(TraceKind::Hidden),
            c => Err(Error::Trace(format!("unknown trace kind {c}"))),
        }
    }
}

/// Raw tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTensor {
    pub kind: TraceKind,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TraceTensor {
    pub fn from_relevance(m: &RelevanceMatrix) -> Self {
        TraceTensor {
            kind: TraceKind::Relevance,
            dims: vec![m.num_layers(), m.num_tokens()],
            data: m.values().to_vec(),
        }
    }

    pub fn from_hidden(h: &HiddenTrace) -> Self {
        TraceTensor {
            kind: TraceKind::Hidden,
            dims: vec![h.num_layers(), h.num_tokens(), h.hidden_dim()],
            data: h.values().to_vec(),
        }
    }

    pub fn into_relevance(self, target: RelevanceTarget) -> Result<RelevanceMatrix> {
        match (self.kind, self.dims.as_slice()) {
            (TraceKind::Relevance, &[l, t]) => RelevanceMatrix::new(l, t, self.data, target),
            _ => Err(Error::Trace("trace is not a relevance matrix".into())),
        }
    }

    pub fn into_hidden(self) -> Result<HiddenTrace> {
        match (self.kind, self.dims.as_slice()) {
            (TraceKind::Hidden, &[l, t, d]) => HiddenTrace::new(l, t, d, self.data),
            _ => Err(Error::Trace("trace is not a hidden-state trace".into())),
        }
    }
}

/// Encode a tensor in the trace file format.
pub fn write_trace(tensor: &TraceTensor) -> Result<Vec<u8>> {
    let rank = tensor.dims.len();
    if !(2..=3).contains(&rank) {
        return Err(Error::Trace(format!("unsupported rank {rank}")));
    }
    let expected: usize = tensor.dims.iter().product();
    if expected != tensor.data.len() {
        return Err(Error::Trace(format!(
            "dims {:?} need {expected} values, got {}",
            tensor.dims,
            tensor.data.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tensor.data.len());
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&tensor.kind.code().to_le_bytes());
    out.extend_from_slice(&(rank as u32).to_le_bytes());
    for i in 0..3 {
        let d = tensor.dims.get(i).copied().unwrap_or(1);
        let d = u32::try_from(d).map_err(|_| Error::Trace(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decode a trace file.
pub fn read_trace(bytes: &[u8]) -> Result<TraceTensor> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != TRACE_MAGIC {
        return Err(Error::Trace("missing trace header".into()));
    }
    let kind = TraceKind::from_code(u32_at(bytes, 8))?;
    let rank = u32_at(bytes, 12) as usize;
    if !(2..=3).contains(&rank) {
        return Err(Error::Trace(format!("unsupported rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32_at(bytes, 16 + 4 * i) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(Error::Trace(format!(
            "trace body has {} bytes, expected {}",
            body.len(),
            4 * n
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(TraceTensor { kind, dims, data })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    prompt_digest: String,
    kind: TraceKind,
    dims: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheManifest {
    entries: BTreeMap<String, ManifestEntry>,
}

/// Disk cache of relevance and hidden-state traces.
#[derive(Debug)]
pub struct TraceCache {
    root: PathBuf,
    manifest_lock: Mutex<()>,
}

impl TraceCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        TraceCache {
            root: root.into(),
            manifest_lock: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn backend_dir(&self, backend: &str) -> PathBuf {
        self.root.join(path_component(backend))
    }

    fn manifest_path(&self, backend: &str) -> PathBuf {
        self.backend_dir(backend).join("manifest.json")
    }

    fn relative_file(sample_id: &str, artifact: &str) -> String {
        format!(
            "{}/{}.bin",
            path_component(sample_id),
            path_component(artifact)
        )
    }

    fn key(sample_id: &str, artifact: &str) -> String {
        format!("{sample_id}/{artifact}")
    }

    fn read_manifest(&self, backend: &str) -> Result<CacheManifest> {
        let path = self.manifest_path(backend);
        match fs::read_to_string(&path) {
            Ok(raw) => {
                serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(CacheManifest::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn write_manifest(&self, backend: &str, manifest: &CacheManifest) -> Result<()> {
        let raw =
            serde_json::to_vec_pretty(manifest).map_err(|e| Error::json("trace manifest", e))?;
        write_atomic(&self.manifest_path(backend), &raw)
    }

    /// Look up a cached trace. A hit requires a manifest entry with the same
    /// prompt digest and a file whose SHA-256 matches the manifest.
    pub fn load(
        &self,
        backend: &str,
        sample_id: &str,
        artifact: &str,
        prompt_digest: &str,
    ) -> Result<Option<TraceTensor>> {
        let manifest = {
            let _guard = self.manifest_lock.lock().expect("manifest lock");
            self.read_manifest(backend)?
        };
        let Some(entry) = manifest.entries.get(&Self::key(sample_id, artifact)) else {
            return Ok(None);
        };
        if entry.prompt_digest != prompt_digest {
            return Err(Error::Trace(format!(
                "cache entry {sample_id}/{artifact} was computed from a different prompt"
            )));
        }
        let path = self.backend_dir(backend).join(&entry.file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Trace(format!(
                "{} does not match its manifest digest",
                path.display()
            )));
        }
        read_trace(&bytes).map(Some)
    }

    /// Store a trace unless the key is already present.
    pub fn store(
        &self,
        backend: &str,
        sample_id: &str,
        artifact: &str,
        prompt_digest: &str,
        tensor: &TraceTensor,
    ) -> Result<()> {
        let bytes = write_trace(tensor)?;
        let rel = Self::relative_file(sample_id, artifact);
        let path = self.backend_dir(backend).join(&rel);
        let _guard = self.manifest_lock.lock().expect("manifest lock");
        let mut manifest = self.read_manifest(backend)?;
        let key = Self::key(sample_id, artifact);
        if manifest.entries.contains_key(&key) && path.is_file() {
            return Ok(());
        }
        write_atomic(&path, &bytes)?;
        manifest.entries.insert(
            key,
            ManifestEntry {
                file: rel,
                prompt_digest: prompt_digest.to_string(),
                kind: tensor.kind,
                dims: tensor.dims.clone(),
                sha256: sha256_hex(&bytes),
            },
        );
        self.write_manifest(backend, &manifest)
    }

    /// Drop a cached trace and its manifest entry.
    pub fn evict(&self, backend: &str, sample_id: &str, artifact: &str) -> Result<bool> {
        let _guard = self.manifest_lock.lock().expect("manifest lock");
        let mut manifest = self.read_manifest(backend)?;
        let Some(entry) = manifest.entries.remove(&Self::key(sample_id, artifact)) else {
            return Ok(false);
        };
        let path = self.backend_dir(backend).join(&entry.file);
        if path.exists() {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        self.write_manifest(backend, &manifest)?;
        Ok(true)
    }

    fn get_or_compute(
        &self,
        backend: &dyn Backend,
        sample_id: &str,
        artifact: &str,
        prompt: &str,
        compute: impl FnOnce() -> Result<TraceTensor>,
    ) -> Result<TraceTensor> {
        let name = backend.descriptor().name.clone();
        let digest = sha256_hex(prompt);
        if let Some(t) = self.load(&name, sample_id, artifact, &digest)? {
            return Ok(t);
        }
        let tensor = compute()?;
        self.store(&name, sample_id, artifact, &digest, &tensor)?;
        // Serve what is on disk so callers always see the cached representation.
        self.load(&name, sample_id, artifact, &digest)?
            .ok_or_else(|| Error::Trace(format!("cache write for {sample_id}/{artifact} vanished")))
    }

    /// Relevance matrix for `prompt`, from cache or freshly computed.
    pub fn relevance(
        &self,
        backend: &dyn Backend,
        sample_id: &str,
        artifact: &str,
        prompt: &str,
        target: RelevanceTarget,
    ) -> Result<RelevanceMatrix> {
        self.get_or_compute(backend, sample_id, artifact, prompt, || {
            backend.require_relevance()?;
            Ok(TraceTensor::from_relevance(
                &backend.layer_relevance(prompt, target)?,
            ))
        })?
        .into_relevance(target)
    }

    /// Hidden-state trace for `prompt`, from cache or freshly computed.
    pub fn hidden(
        &self,
        backend: &dyn Backend,
        sample_id: &str,
        artifact: &str,
        prompt: &str,
    ) -> Result<HiddenTrace> {
        self.get_or_compute(backend, sample_id, artifact, prompt, || {
            backend.require_hidden()?;
            Ok(TraceTensor::from_hidden(&backend.hidden_states(prompt)?))
        })?
        .into_hidden()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_32_bytes() {
        let t = TraceTensor {
            kind: TraceKind::Relevance,
            dims: vec![2, 3],
            data: vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        };
        let bytes = write_trace(&t).unwrap();
        assert_eq!(bytes.len(), 32 + 24);
        assert_eq!(&bytes[..8], b"XMRCTRC1");
        assert_eq!(u32_at(&bytes, 16), 2);
        assert_eq!(u32_at(&bytes, 20), 3);
        assert_eq!(u32_at(&bytes, 24), 1);
        assert_eq!(&bytes[36..40], &0f32.to_le_bytes());
        assert_eq!(read_trace(&bytes).unwrap(), t);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(read_trace(b"short").is_err());
        let t = TraceTensor {
            kind: TraceKind::Hidden,
            dims: vec![2, 1, 2],
            data: vec![1.0; 4],
        };
        let mut bytes = write_trace(&t).unwrap();
        bytes.pop();
        assert!(read_trace(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn trace_round_trip_is_bit_exact(
            l in 1usize..5, t in 0usize..6, d in 1usize..4,
            seed in proptest::collection::vec(any::<f32>(), 0..120)
        ) {
            let n = l * t * d;
            let data: Vec<f32> = (0..n).map(|i| seed.get(i).copied().unwrap_or(i as f32)).collect();
            let tensor = TraceTensor { kind: TraceKind::Hidden, dims: vec![l, t, d], data };
            let back = read_trace(&write_trace(&tensor).unwrap()).unwrap();
            prop_assert_eq!(back.dims, tensor.dims);
            let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = tensor.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
