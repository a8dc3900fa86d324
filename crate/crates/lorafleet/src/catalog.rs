//! Sharded on-disk catalogs of packed adapters.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lorafleet_core::checksum::sha256_hex;
use lorafleet_core::lifecycle::AdapterShape;
use lorafleet_core::packfmt::{audit_packed, pack, LayoutParams, PackedFile, SyntheticAdapter};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lifecycle::{ExternalRevision, PolicyService, ServiceError};

pub const CATALOG_FILE: &str = "catalog.json";

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("catalog root {path} is not writable: {reason}")]
    Unwritable { path: PathBuf, reason: String },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("cannot read catalog at {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("registration failed: {0}")]
    Register(#[from] ServiceError),
}

impl CatalogError {
    pub fn code(&self) -> &'static str {
        match self {
            CatalogError::Unwritable { .. } => "unwritable_root",
            CatalogError::InvalidLayout(_) => "invalid_layout",
            CatalogError::Unreadable { .. } => "catalog_unreadable",
            CatalogError::Register(e) => e.code(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogLayout {
    pub root: PathBuf,
    pub shards: u32,
    pub per_shard: u32,
}

impl CatalogLayout {
    pub fn new(root: impl Into<PathBuf>, shards: u32, per_shard: u32) -> Self {
        Self { root: root.into(), shards, per_shard }
    }

    pub fn total(&self) -> u64 {
        self.shards as u64 * self.per_shard as u64
    }

    /// Path of adapter `i` in shard `s`, relative to the root.
    pub fn relative_path(s: u32, i: u32) -> String {
        format!("shard-{s:03}/adapter-{i:06}")
    }

    pub fn path(&self, s: u32, i: u32) -> PathBuf {
        self.root.join(Self::relative_path(s, i))
    }

    /// Inverse of [`CatalogLayout::relative_path`].
    pub fn parse_relative(path: &str) -> Option<(u32, u32)> {
        let (shard, adapter) = path.split_once('/')?;
        let s = shard.strip_prefix("shard-")?;
        let i = adapter.strip_prefix("adapter-")?;
        if s.len() < 3 || i.len() < 6 {
            return None;
        }
        Some((s.parse().ok()?, i.parse().ok()?))
    }
}

/// Shape shared by every adapter in a catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogTemplate {
    pub adapter: SyntheticAdapter,
    pub base_id: String,
    pub rank: u32,
    pub target_modules: Vec<String>,
}

impl Default for CatalogTemplate {
    fn default() -> Self {
        Self {
            adapter: SyntheticAdapter::tiny(LayoutParams::new(2, 4, 2, 5)),
            base_id: "qwen3-30b-a3b".into(),
            rank: 1,
            target_modules: vec!["expert_proj".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub shard: u32,
    pub index: u32,
    pub path: String,
    pub bytes: u64,
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogIndex {
    pub shards: u32,
    pub per_shard: u32,
    pub seed: u64,
    pub template: CatalogTemplate,
    pub entries: Vec<CatalogEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildFailure {
    pub shard: u32,
    pub index: u32,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub requested: u64,
    pub built_count: u64,
    pub error_count: u64,
    pub errors: Vec<BuildFailure>,
    pub registered: u64,
    pub bytes_written: u64,
    pub wall_time_ms: u64,
    pub throughput_mb_s: f64,
}

fn adapter_seed(seed: u64, s: u32, i: u32) -> u64 {
    seed ^ ((s as u64) << 32 | i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn probe_writable(root: &Path) -> Result<(), CatalogError> {
    let fail = |e: std::io::Error| CatalogError::Unwritable { path: root.to_path_buf(), reason: e.to_string() };
    fs::create_dir_all(root).map_err(fail)?;
    let probe = root.join(".write-probe");
    fs::File::create(&probe).and_then(|mut f| f.write_all(b"ok")).map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Builds `shards × per_shard` packed adapters with one worker per shard at a
/// time, up to `parallelism` shards concurrently. When `register` is given,
/// every adapter is committed as a revision of its own generated policy.
pub fn build_catalog(
    layout: &CatalogLayout,
    template: &CatalogTemplate,
    parallelism: usize,
    seed: u64,
    register: Option<&PolicyService>,
) -> Result<BuildReport, CatalogError> {
    if layout.shards == 0 || layout.per_shard == 0 || layout.shards > 1000 || layout.per_shard > 1_000_000 {
        return Err(CatalogError::InvalidLayout(format!("{} shards × {} per shard", layout.shards, layout.per_shard)));
    }
    AdapterShape::new(template.rank, template.target_modules.iter().map(String::as_str))
        .map_err(|e| CatalogError::InvalidLayout(e.to_string()))?;
    probe_writable(&layout.root)?;
    let started = Instant::now();
    let manifest = template.adapter.manifest();

    let build_shard = |s: u32| -> (Vec<CatalogEntry>, Vec<BuildFailure>) {
        let mut entries = Vec::new();
        let mut failures = Vec::new();
        let dir = layout.root.join(format!("shard-{s:03}"));
        if let Err(e) = fs::create_dir_all(&dir) {
            for i in 0..layout.per_shard {
                failures.push(BuildFailure { shard: s, index: i, message: e.to_string() });
            }
            return (entries, failures);
        }
        for i in 0..layout.per_shard {
            let payloads = template.adapter.payloads(&manifest, adapter_seed(seed, s, i));
            let built = pack(&manifest, &payloads).map_err(|e| e.to_string()).and_then(|file| {
                let bytes = file.into_bytes();
                write_atomic(&layout.path(s, i), &bytes).map_err(|e| e.to_string())?;
                Ok(bytes)
            });
            match built {
                Ok(bytes) => entries.push(CatalogEntry {
                    shard: s,
                    index: i,
                    path: CatalogLayout::relative_path(s, i),
                    bytes: bytes.len() as u64,
                    digest: sha256_hex(&bytes),
                    revision_id: None,
                }),
                Err(message) => failures.push(BuildFailure { shard: s, index: i, message }),
            }
        }
        (entries, failures)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| CatalogError::InvalidLayout(e.to_string()))?;
    let per_shard: Vec<(Vec<CatalogEntry>, Vec<BuildFailure>)> =
        pool.install(|| (0..layout.shards).into_par_iter().map(build_shard).collect());
    let mut entries = Vec::with_capacity(layout.total() as usize);
    let mut errors = Vec::new();
    for (e, f) in per_shard {
        entries.extend(e);
        errors.extend(f);
    }

    let mut registered = 0;
    if let Some(ps) = register {
        let shape = AdapterShape::new(template.rank, template.target_modules.iter().map(String::as_str))
            .map_err(|e| CatalogError::InvalidLayout(e.to_string()))?;
        let items: Vec<ExternalRevision> = entries
            .iter()
            .map(|e| ExternalRevision {
                policy_key: format!("catalog:{}:{seed}:{}", layout.root.display(), e.path),
                base_id: template.base_id.clone(),
                shape: shape.clone(),
                step: 0,
                file_ref: layout.root.join(&e.path).to_string_lossy().into_owned(),
                manifest_digest: e.digest.clone(),
            })
            .collect();
        for (entry, rev) in entries.iter_mut().zip(ps.register_external(&items)?) {
            entry.revision_id = Some(rev.revision_id);
            registered += 1;
        }
    }

    let bytes_written: u64 = entries.iter().map(|e| e.bytes).sum();
    let index = CatalogIndex {
        shards: layout.shards,
        per_shard: layout.per_shard,
        seed,
        template: template.clone(),
        entries,
    };
    let index_path = layout.root.join(CATALOG_FILE);
    write_atomic(&index_path, &serde_json::to_vec(&index).expect("index serializes"))
        .map_err(|e| CatalogError::Unwritable { path: index_path, reason: e.to_string() })?;

    let elapsed = started.elapsed();
    Ok(BuildReport {
        requested: layout.total(),
        built_count: index.entries.len() as u64,
        error_count: errors.len() as u64,
        errors,
        registered,
        bytes_written,
        wall_time_ms: elapsed.as_millis() as u64,
        throughput_mb_s: bytes_written as f64 / 1e6 / elapsed.as_secs_f64().max(1e-9),
    })
}

pub fn load_index(root: &Path) -> Result<CatalogIndex, CatalogError> {
    let path = root.join(CATALOG_FILE);
    let fail = |reason: String| CatalogError::Unreadable { path: path.clone(), reason };
    let bytes = fs::read(&path).map_err(|e| fail(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| fail(e.to_string()))
}

/// Seeded stratified sample: every shard gets `samples / shards` picks and the
/// remainder goes to a seeded choice of distinct shards.
pub fn stratified_sample(shards: u32, per_shard: u32, samples: usize, seed: u64) -> Vec<(u32, u32)> {
    if samples == 0 || shards == 0 || per_shard == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = samples / shards as usize;
    let extra = samples % shards as usize;
    let mut order: Vec<u32> = (0..shards).collect();
    order.shuffle(&mut rng);
    let mut counts = vec![base; shards as usize];
    for &s in &order[..extra] {
        counts[s as usize] += 1;
    }
    let mut picks = Vec::with_capacity(samples);
    for (s, &n) in counts.iter().enumerate() {
        let n = n.min(per_shard as usize);
        if n * 2 > per_shard as usize {
            let mut all: Vec<u32> = (0..per_shard).collect();
            all.shuffle(&mut rng);
            all.truncate(n);
            all.sort_unstable();
            picks.extend(all.into_iter().map(|i| (s as u32, i)));
        } else {
            let mut chosen = std::collections::BTreeSet::new();
            while chosen.len() < n {
                chosen.insert(rng.random_range(0..per_shard));
            }
            picks.extend(chosen.into_iter().map(|i| (s as u32, i)));
        }
    }
    picks
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub shard: u32,
    pub index: u32,
    pub path: String,
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogAuditReport {
    pub samples: usize,
    pub ok: usize,
    pub errors: Vec<SampleFailure>,
    pub shards_covered: usize,
    pub shard_count: u32,
    pub keys_per_adapter: usize,
    pub elapsed_ms: u64,
    pub per_adapter_p50_us: u64,
}

/// Audits a stratified sample of adapters. Read-only.
pub fn audit_catalog(root: &Path, samples: usize, seed: u64, keys_per_adapter: usize) -> Result<CatalogAuditReport, CatalogError> {
    let index = load_index(root)?;
    let started = Instant::now();
    let picks = stratified_sample(index.shards, index.per_shard, samples, seed);
    let digests: std::collections::HashMap<(u32, u32), &str> =
        index.entries.iter().map(|e| ((e.shard, e.index), e.digest.as_str())).collect();

    let results: Vec<(u32, Result<u64, SampleFailure>)> = picks
        .par_iter()
        .map(|&(s, i)| {
            let t0 = Instant::now();
            let rel = CatalogLayout::relative_path(s, i);
            let fail = |code: &str, message: String| SampleFailure {
                shard: s,
                index: i,
                path: rel.clone(),
                code: code.to_string(),
                message,
            };
            let outcome = (|| {
                let bytes = fs::read(root.join(&rel)).map_err(|e| fail("missing_file", e.to_string()))?;
                match digests.get(&(s, i)) {
                    Some(&d) if d == sha256_hex(&bytes) => {}
                    Some(_) => return Err(fail("digest_mismatch", "file differs from catalog digest".into())),
                    None => return Err(fail("not_in_catalog", "no catalog entry".into())),
                }
                let file = PackedFile::parse(bytes).map_err(|e| fail(e.code(), e.to_string()))?;
                let report = audit_packed(&file, keys_per_adapter, seed ^ ((s as u64) << 20 | i as u64));
                match report.errors.first() {
                    None => Ok(t0.elapsed().as_micros() as u64),
                    Some(k) => Err(fail(&k.code, format!("{}: {}", k.key, k.message))),
                }
            })();
            (s, outcome)
        })
        .collect();

    let mut covered = std::collections::BTreeSet::new();
    let mut ok = 0;
    let mut errors = Vec::new();
    let mut times = Vec::new();
    for (s, r) in results {
        covered.insert(s);
        match r {
            Ok(us) => {
                ok += 1;
                times.push(us);
            }
            Err(f) => errors.push(f),
        }
    }
    times.sort_unstable();
    Ok(CatalogAuditReport {
        samples: picks.len(),
        ok,
        errors,
        shards_covered: covered.len(),
        shard_count: index.shards,
        keys_per_adapter,
        elapsed_ms: started.elapsed().as_millis() as u64,
        per_adapter_p50_us: lorafleet_core::loadgen::nearest_rank(&times, 50),
    })
}
