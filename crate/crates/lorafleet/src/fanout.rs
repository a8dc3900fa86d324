//! The unpacked "one file per tensor" adapter form, and wall-clock
//! comparisons between it and the packed form.
//!
//! A fanout directory holds `manifest.json` plus `tensors/<name>.bin`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lorafleet_core::packfmt::{AdapterManifest, LoaderObjects, PackError, PackedFile, TensorMap};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";

#[derive(Debug, thiserror::Error)]
pub enum FanoutError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Pack(#[from] PackError),
}

impl FanoutError {
    pub fn code(&self) -> &'static str {
        match self {
            FanoutError::Io { .. } => "io_error",
            FanoutError::Manifest(_) => "bad_manifest",
            FanoutError::Pack(e) => e.code(),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> FanoutError + '_ {
    move |source| FanoutError::Io { path: path.to_path_buf(), source }
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(TENSOR_DIR).join(format!("{name}.bin"))
}

pub fn write_fanout(dir: &Path, manifest: &AdapterManifest, payloads: &TensorMap) -> Result<(), FanoutError> {
    let tensors = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tensors).map_err(io(&tensors))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_vec_pretty(manifest).expect("manifest serializes")).map_err(io(&mpath))?;
    for t in &manifest.tensors {
        let bytes = payloads.get(&t.name).ok_or_else(|| PackError::MissingPayload(t.name.clone()))?;
        let p = tensor_path(dir, &t.name);
        fs::write(&p, bytes).map_err(io(&p))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<AdapterManifest, FanoutError> {
    let mpath = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&mpath).map_err(io(&mpath))?;
    let raw: AdapterManifest = serde_json::from_slice(&bytes).map_err(|e| FanoutError::Manifest(e.to_string()))?;
    // Re-validate through the constructor so totals and names are checked.
    let mut checked = AdapterManifest::new(raw.tensors)?;
    checked.layout_params = raw.layout_params;
    Ok(checked)
}

pub fn read_fanout(dir: &Path) -> Result<(AdapterManifest, TensorMap), FanoutError> {
    let manifest = read_manifest(dir)?;
    let mut payloads = BTreeMap::new();
    for t in &manifest.tensors {
        let p = tensor_path(dir, &t.name);
        payloads.insert(t.name.clone(), fs::read(&p).map_err(io(&p))?);
    }
    Ok((manifest, payloads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceTiming {
    pub read_us: u64,
    pub build_us: u64,
    pub object_count: usize,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSliceComparison {
    pub original: SliceTiming,
    pub packed: SliceTiming,
    pub object_ratio: f64,
}

/// Reads and builds loader objects from both forms of the same adapter.
pub fn measure_load_slices(fanout_dir: &Path, packed_path: &Path) -> Result<LoadSliceComparison, FanoutError> {
    let t0 = Instant::now();
    let manifest = read_manifest(fanout_dir)?;
    let mut raw = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let p = tensor_path(fanout_dir, &t.name);
        raw.push((t.name.clone(), fs::read(&p).map_err(io(&p))?));
    }
    let read_us = t0.elapsed().as_micros() as u64;
    let t1 = Instant::now();
    let objects: HashMap<String, Vec<u8>> = raw.into_iter().collect();
    let original = SliceTiming {
        read_us,
        build_us: t1.elapsed().as_micros() as u64,
        object_count: objects.len(),
        bytes: objects.values().map(|b| b.len() as u64).sum(),
    };

    let t2 = Instant::now();
    let bytes = fs::read(packed_path).map_err(io(packed_path))?;
    let file = PackedFile::parse(bytes)?;
    let read_us = t2.elapsed().as_micros() as u64;
    let t3 = Instant::now();
    let loader = LoaderObjects::build(&file)?;
    let packed = SliceTiming {
        read_us,
        build_us: t3.elapsed().as_micros() as u64,
        object_count: loader.object_count(),
        bytes: file.len(),
    };
    let object_ratio = original.object_count as f64 / packed.object_count.max(1) as f64;
    Ok(LoadSliceComparison { original, packed, object_ratio })
}

/// Measured read-and-parse time of one packed file, rounded up to whole milliseconds.
pub fn measure_fetch_ms(path: &Path) -> Result<u64, FanoutError> {
    let t = Instant::now();
    let bytes = fs::read(path).map_err(io(path))?;
    let file = PackedFile::parse(bytes)?;
    LoaderObjects::build(&file)?;
    Ok(t.elapsed().as_micros().div_ceil(1000) as u64)
}

/// Maps scenario revisions onto catalog files in sorted order (wrapping when
/// the catalog is smaller) and returns measured fetch times per revision.
pub fn real_file_fetch_overrides<'a>(
    catalog_root: &Path,
    revisions: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<String, u64>, FanoutError> {
    let index = crate::catalog::load_index(catalog_root).map_err(|e| FanoutError::Manifest(e.to_string()))?;
    if index.entries.is_empty() {
        return Err(FanoutError::Manifest("catalog has no entries".into()));
    }
    let mut names: Vec<&str> = revisions.into_iter().collect();
    names.sort_unstable();
    names.dedup();
    let mut out = BTreeMap::new();
    for (k, name) in names.into_iter().enumerate() {
        let entry = &index.entries[k % index.entries.len()];
        out.insert(name.to_string(), measure_fetch_ms(&catalog_root.join(&entry.path))?);
    }
    Ok(out)
}
