use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::{KeyRef, PackedFile, PackedIndex};
use super::PackError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFailure {
    pub key: String,
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub keys: usize,
    pub groups: usize,
    pub copied: usize,
    pub sampled: usize,
    pub sampled_ok: usize,
    pub errors: Vec<KeyFailure>,
    /// Wall time in microseconds; zero when produced without a clock.
    pub elapsed_us: u64,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty() && self.sampled_ok == self.sampled
    }
}

/// Sorted, distinct key positions drawn uniformly from `0..key_count`.
/// Asking for at least `key_count` samples selects every key.
pub fn sample_key_indices(key_count: usize, sample_count: usize, seed: u64) -> Vec<usize> {
    if sample_count >= key_count {
        return (0..key_count).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, key_count, sample_count).into_vec();
    picks.sort_unstable();
    picks
}

/// Audits sampled keys of `index`, fetching each payload through `read`.
/// A failing key is recorded and the remaining samples still run.
pub fn audit_index<R>(index: &PackedIndex, sample_count: usize, seed: u64, mut read: R) -> AuditReport
where
    R: FnMut(&KeyRef<'_>) -> Result<Vec<u8>, PackError>,
{
    let keys = index.keys();
    let picks = sample_key_indices(keys.len(), sample_count, seed);
    let mut errors = Vec::new();
    for &i in &picks {
        let key = &keys[i];
        if let Err(e) = read(key).and_then(|payload| key.verify(&payload)) {
            errors.push(KeyFailure { key: key.name.to_string(), code: e.code().to_string(), message: e.to_string() });
        }
    }
    AuditReport {
        keys: keys.len(),
        groups: index.groups.len(),
        copied: index.copied.len(),
        sampled: picks.len(),
        sampled_ok: picks.len() - errors.len(),
        errors,
        elapsed_us: 0,
    }
}

/// Audit of an in-memory packed file.
pub fn audit_packed(file: &PackedFile, sample_count: usize, seed: u64) -> AuditReport {
    audit_index(&file.index, sample_count, seed, |key| file.raw_payload(key).map(<[u8]>::to_vec))
}

/// One owned, verified buffer per key: the objects a loader has to build.
#[derive(Debug)]
pub struct LoaderObjects {
    objects: Vec<(String, Vec<u8>)>,
}

impl LoaderObjects {
    pub fn build(file: &PackedFile) -> Result<Self, PackError> {
        let objects = file
            .index
            .keys()
            .iter()
            .map(|key| Ok((key.name.to_string(), file.read_key(key)?.to_vec())))
            .collect::<Result<_, PackError>>()?;
        Ok(Self { objects })
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.objects.iter().map(|(_, b)| b.len() as u64).sum()
    }
}
