use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::ServeError;

#[derive(Clone, Debug)]
struct Entry {
    bytes: u64,
    last_use: u64,
    pins: u32,
}

/// CPU adapter cache bounded by both entry count and bytes, evicting the
/// least recently used unpinned entry first.
#[derive(Clone, Debug)]
pub struct CpuCache {
    max_entries: usize,
    max_bytes: u64,
    used_bytes: u64,
    clock: u64,
    entries: BTreeMap<String, Entry>,
}

impl CpuCache {
    pub fn new(max_entries: usize, max_bytes: u64) -> Self {
        Self { max_entries, max_bytes, used_bytes: 0, clock: 0, entries: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn contains(&self, revision: &str) -> bool {
        self.entries.contains_key(revision)
    }

    pub fn is_pinned(&self, revision: &str) -> bool {
        self.entries.get(revision).is_some_and(|e| e.pins > 0)
    }

    pub fn resident(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Marks a use; returns false if the revision is not cached.
    pub fn touch(&mut self, revision: &str) -> bool {
        self.clock += 1;
        match self.entries.get_mut(revision) {
            Some(e) => {
                e.last_use = self.clock;
                true
            }
            None => false,
        }
    }

    pub fn pin(&mut self, revision: &str) -> bool {
        match self.entries.get_mut(revision) {
            Some(e) => {
                e.pins += 1;
                true
            }
            None => false,
        }
    }

    pub fn unpin(&mut self, revision: &str) {
        if let Some(e) = self.entries.get_mut(revision) {
            e.pins = e.pins.saturating_sub(1);
        }
    }

    fn lru_victim(&self) -> Option<String> {
        self.entries.iter().filter(|(_, e)| e.pins == 0).min_by_key(|(_, e)| e.last_use).map(|(k, _)| k.clone())
    }

    /// Inserts a loaded adapter, evicting LRU unpinned entries until both
    /// bounds hold. Nothing is evicted if the insert cannot succeed.
    pub fn insert_evict(&mut self, revision: &str, bytes: u64) -> Result<Vec<String>, ServeError> {
        if bytes > self.max_bytes || self.max_entries == 0 {
            return Err(ServeError::CapacityImpossible { revision: revision.into(), bytes, max_bytes: self.max_bytes });
        }
        if self.touch(revision) {
            return Ok(Vec::new());
        }
        // Dry run so a failed insert leaves the cache untouched.
        let mut unpinned: Vec<(u64, &String, u64)> =
            self.entries.iter().filter(|(_, e)| e.pins == 0).map(|(k, e)| (e.last_use, k, e.bytes)).collect();
        unpinned.sort();
        let (mut n, mut used, mut take) = (self.entries.len(), self.used_bytes, 0);
        while n + 1 > self.max_entries || used + bytes > self.max_bytes {
            let Some(&(_, _, b)) = unpinned.get(take) else {
                return Err(ServeError::CacheFull(revision.into()));
            };
            n -= 1;
            used -= b;
            take += 1;
        }
        let mut evicted = Vec::with_capacity(take);
        for _ in 0..take {
            let victim = self.lru_victim().expect("dry run found a victim");
            let e = self.entries.remove(&victim).expect("victim present");
            self.used_bytes -= e.bytes;
            evicted.push(victim);
        }
        self.clock += 1;
        self.entries.insert(revision.into(), Entry { bytes, last_use: self.clock, pins: 0 });
        self.used_bytes += bytes;
        Ok(evicted)
    }

    /// Places an entry without touching the recency of others; used to seed
    /// the warm set.
    pub(crate) fn seed(&mut self, revision: &str, bytes: u64) -> Result<(), ServeError> {
        self.insert_evict(revision, bytes).and_then(|ev| {
            if ev.is_empty() {
                Ok(())
            } else {
                Err(ServeError::InvalidConfig(alloc::format!("warm set does not fit the CPU cache at {revision}")))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn lru_entry_evicted() {
        let mut c = CpuCache::new(3, 1 << 30);
        for r in ["a", "b", "c"] {
            c.insert_evict(r, 10).unwrap();
        }
        assert_eq!(c.insert_evict("d", 10).unwrap(), vec!["a"]);
    }

    #[test]
    fn pinned_lru_skipped() {
        let mut c = CpuCache::new(3, 1 << 30);
        for r in ["a", "b", "c"] {
            c.insert_evict(r, 10).unwrap();
        }
        c.pin("a");
        assert_eq!(c.insert_evict("d", 10).unwrap(), vec!["b"]);
        c.unpin("a");
        assert_eq!(c.insert_evict("e", 10).unwrap(), vec!["a"]);
    }

    #[test]
    fn touch_changes_order() {
        let mut c = CpuCache::new(3, 1 << 30);
        for r in ["a", "b", "c"] {
            c.insert_evict(r, 10).unwrap();
        }
        c.touch("a");
        assert_eq!(c.insert_evict("d", 10).unwrap(), vec!["b"]);
    }

    #[test]
    fn byte_bound_and_impossible() {
        let mut c = CpuCache::new(10, 25);
        c.insert_evict("a", 10).unwrap();
        c.insert_evict("b", 10).unwrap();
        assert_eq!(c.insert_evict("c", 10).unwrap(), vec!["a"]);
        assert_eq!(c.used_bytes(), 20);
        assert!(matches!(c.insert_evict("huge", 26), Err(ServeError::CapacityImpossible { .. })));
        c.pin("b");
        c.pin("c");
        assert_eq!(c.insert_evict("d", 10), Err(ServeError::CacheFull("d".into())));
        assert_eq!(c.len(), 2);
    }
}
