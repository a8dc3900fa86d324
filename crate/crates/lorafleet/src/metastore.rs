//! Append-only metadata log with attempt directories and content-addressed objects.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! log.jsonl                        one record per line, `<json>#crc=<8 hex>`
//! attempts/<token>/.attempt.json   attempt marker, plus files written by the attempt
//! objects/<dd>/<digest>/...        committed copies of attempt files
//! objects/.staging/<token>/        copy in progress, never referenced
//! ```
//!
//! An entry becomes visible only once its line is appended and synced.
//! Everything else on disk is invisible until a committed entry names it.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use lorafleet_core::checksum::{crc32, sha256_hex};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const LOG_FILE: &str = "log.jsonl";
pub const ATTEMPTS_DIR: &str = "attempts";
pub const OBJECTS_DIR: &str = "objects";
const STAGING_DIR: &str = ".staging";
const ATTEMPT_MARKER: &str = ".attempt.json";
const OBJECT_MARKER: &str = ".created";

/// Default minimum age before an orphan attempt may be collected.
pub const DEFAULT_GC_AGE_MS: u64 = 3_600_000;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Hand-driven clock shared between a test and the components it drives.
#[derive(Clone, Debug, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn at(ms: u64) -> Self {
        Self(Arc::new(AtomicU64::new(ms)))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Checkpoint,
    Revision,
    RolloutRecord,
    OpResult,
    Policy,
    Session,
    Readiness,
    /// A submitted service operation, before it has a result.
    Op,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Committed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitEntry {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub kind: EntryKind,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<String>,
    pub payload_digest: String,
    pub file_refs: Vec<String>,
    pub status: EntryStatus,
    #[serde(default)]
    pub body: Value,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptPath {
    pub token: String,
    pub directory: PathBuf,
    pub created_at: u64,
    pub owner_op: String,
    pub kind: EntryKind,
}

#[derive(Serialize, Deserialize)]
struct AttemptMarker {
    token: String,
    created_at: u64,
    owner_op: String,
    kind: EntryKind,
}

/// Places on the write path where a test can stop the process.
///
/// The order follows the export path: attempt file writes, then the commit
/// steps inside [`Metastore::commit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPoint {
    AttemptFilePartial,
    AfterAttemptWrite,
    AfterVerify,
    MidObjectCopy,
    BeforeObjectPublish,
    AfterObjectPublish,
    MidAppend,
    AfterAppend,
    AfterSync,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 9] = [
        CrashPoint::AttemptFilePartial,
        CrashPoint::AfterAttemptWrite,
        CrashPoint::AfterVerify,
        CrashPoint::MidObjectCopy,
        CrashPoint::BeforeObjectPublish,
        CrashPoint::AfterObjectPublish,
        CrashPoint::MidAppend,
        CrashPoint::AfterAppend,
        CrashPoint::AfterSync,
    ];
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("referenced file does not exist: {0}")]
    MissingFile(String),
    #[error("digest mismatch: expected {expected}, computed {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("attempt {attempt} of op {op_id} was already committed with different content")]
    DuplicateCommit { op_id: String, attempt: String },
    #[error("log record {line} is corrupt: {reason}")]
    CorruptInterior { line: usize, reason: String },
    #[error("invalid file name `{0}`")]
    InvalidName(String),
    #[error("store stopped by injected crash at {0:?}")]
    Crashed(CrashPoint),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io { .. } => "io_error",
            StoreError::MissingFile(_) => "missing_file",
            StoreError::DigestMismatch { .. } => "digest_mismatch",
            StoreError::DuplicateCommit { .. } => "duplicate_commit",
            StoreError::CorruptInterior { .. } => "corrupt_interior",
            StoreError::InvalidName(_) => "invalid_name",
            StoreError::Crashed(_) => "crashed",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Record for [`Metastore::commit_external_batch`]: files already live at
/// their final location and are only referenced.
#[derive(Clone, Debug)]
pub struct ExternalRecord {
    pub kind: EntryKind,
    pub subject_id: String,
    pub op_id: Option<String>,
    pub file_refs: Vec<String>,
    pub payload_digest: String,
    pub body: Value,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub entries: usize,
    pub torn_tail: bool,
    pub truncated_bytes: u64,
    pub orphans: Vec<AttemptPath>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub removed: Vec<PathBuf>,
    pub skipped: Vec<(PathBuf, String)>,
}

struct Inner {
    log: File,
    entries: Vec<CommitEntry>,
    next_seq: u64,
    by_attempt: HashMap<String, usize>,
    referenced_objects: BTreeSet<String>,
    crash_at: Option<CrashPoint>,
    crashed: Option<CrashPoint>,
}

impl Inner {
    fn check_alive(&self) -> Result<(), StoreError> {
        match self.crashed {
            Some(p) => Err(StoreError::Crashed(p)),
            None => Ok(()),
        }
    }

    fn crash(&mut self, point: CrashPoint) -> Result<(), StoreError> {
        if self.crash_at == Some(point) {
            self.crashed = Some(point);
            return Err(StoreError::Crashed(point));
        }
        Ok(())
    }

    fn index(&mut self, entry: CommitEntry) {
        let pos = self.entries.len();
        if let Some(token) = &entry.attempt {
            self.by_attempt.insert(token.clone(), pos);
        }
        for r in &entry.file_refs {
            if let Some(dir) = object_dir_of(r) {
                self.referenced_objects.insert(dir);
            }
        }
        self.next_seq = entry.seq + 1;
        self.entries.push(entry);
    }
}

/// `objects/dd/digest/name` -> `objects/dd/digest`
fn object_dir_of(file_ref: &str) -> Option<String> {
    let mut parts = file_ref.splitn(4, '/');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(OBJECTS_DIR), Some(dd), Some(digest)) => Some(format!("{OBJECTS_DIR}/{dd}/{digest}")),
        _ => None,
    }
}

fn encode_line(entry: &CommitEntry) -> Vec<u8> {
    let body = serde_json::to_string(entry).expect("entry serializes");
    let mut line = format!("{body}#crc={:08x}", crc32(body.as_bytes())).into_bytes();
    line.push(b'\n');
    line
}

fn decode_line(line: &[u8]) -> Result<CommitEntry, String> {
    let text = std::str::from_utf8(line).map_err(|e| e.to_string())?;
    let (body, crc) = text.rsplit_once("#crc=").ok_or("missing checksum suffix")?;
    let stored = u32::from_str_radix(crc, 16).map_err(|_| format!("bad checksum `{crc}`"))?;
    if crc.len() != 8 || stored != crc32(body.as_bytes()) {
        return Err("checksum mismatch".into());
    }
    serde_json::from_str(body).map_err(|e| e.to_string())
}

/// Digest over (name, content hash) pairs in name order.
pub fn files_digest<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut lines: Vec<String> = files.into_iter().map(|(n, b)| format!("{n}\t{}\n", sha256_hex(b))).collect();
    lines.sort();
    sha256_hex(lines.concat().as_bytes())
}

fn valid_file_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('.') && !name.contains(['/', '\\'])
}

fn sync_dir(path: &Path) {
    if let Ok(d) = File::open(path) {
        let _ = d.sync_all();
    }
}

pub struct Metastore {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
    token_counter: AtomicU64,
}

impl std::fmt::Debug for Metastore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Metastore").field("root", &self.root).finish_non_exhaustive()
    }
}

impl Metastore {
    /// Opens (or creates) the store at `root`, replaying the log.
    pub fn open(root: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        Self::recover(root, clock).map(|(s, _)| s)
    }

    /// Replays the log, truncating a torn final record, and lists orphan attempts.
    pub fn recover(root: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<(Self, RecoveryReport), StoreError> {
        let root = root.as_ref().to_path_buf();
        for dir in [root.clone(), root.join(ATTEMPTS_DIR), root.join(OBJECTS_DIR)] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let log_path = root.join(LOG_FILE);
        let mut log = OpenOptions::new().read(true).append(true).create(true).open(&log_path).map_err(io_err(&log_path))?;
        let mut bytes = Vec::new();
        log.read_to_end(&mut bytes).map_err(io_err(&log_path))?;

        let complete_end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        let mut report = RecoveryReport { torn_tail: complete_end < bytes.len(), ..Default::default() };
        let lines: Vec<&[u8]> = bytes[..complete_end].split_inclusive(|&b| b == b'\n').collect();
        let mut entries = Vec::with_capacity(lines.len());
        let mut valid_end = 0usize;
        for (i, raw) in lines.iter().enumerate() {
            let decoded = decode_line(&raw[..raw.len() - 1]).and_then(|e| {
                let expected = entries.last().map_or(e.seq, |p: &CommitEntry| p.seq + 1);
                if e.seq == expected {
                    Ok(e)
                } else {
                    Err(format!("sequence gap: expected {expected}, found {}", e.seq))
                }
            });
            match decoded {
                Ok(e) => {
                    entries.push(e);
                    valid_end += raw.len();
                }
                Err(reason) if i + 1 == lines.len() && !report.torn_tail => {
                    // A bad final record is a torn write.
                    let _ = reason;
                    report.torn_tail = true;
                }
                Err(reason) => return Err(StoreError::CorruptInterior { line: i + 1, reason }),
            }
        }
        if valid_end < bytes.len() {
            report.truncated_bytes = (bytes.len() - valid_end) as u64;
            log.set_len(valid_end as u64).map_err(io_err(&log_path))?;
            log.sync_all().map_err(io_err(&log_path))?;
        }

        let mut inner = Inner {
            log,
            entries: Vec::new(),
            next_seq: 1,
            by_attempt: HashMap::new(),
            referenced_objects: BTreeSet::new(),
            crash_at: None,
            crashed: None,
        };
        for e in entries {
            inner.index(e);
        }
        report.entries = inner.entries.len();
        let store = Self { root, clock, inner: Mutex::new(inner), token_counter: AtomicU64::new(0) };
        report.orphans = store.orphans()?;
        Ok((store, report))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    /// Arms a one-shot crash: the next time the write path reaches `point`
    /// the store stops and every later call fails with [`StoreError::Crashed`].
    pub fn inject_crash(&self, point: Option<CrashPoint>) {
        self.lock().crash_at = point;
    }

    pub fn next_seq(&self) -> u64 {
        self.lock().next_seq
    }

    /// Resolves a `file_refs` entry to a filesystem path.
    pub fn resolve_ref(&self, file_ref: &str) -> PathBuf {
        let p = Path::new(file_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn begin_attempt(&self, op_id: &str, kind: EntryKind) -> Result<AttemptPath, StoreError> {
        self.lock().check_alive()?;
        let attempts = self.root.join(ATTEMPTS_DIR);
        let created_at = self.clock.now_ms();
        loop {
            let n = self.token_counter.fetch_add(1, Ordering::SeqCst);
            let token = format!("att-{created_at:013}-{n:06}");
            let directory = attempts.join(&token);
            match fs::create_dir(&directory) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(StoreError::Io { path: directory, source: e }),
            }
            let marker = AttemptMarker { token: token.clone(), created_at, owner_op: op_id.to_string(), kind };
            let marker_path = directory.join(ATTEMPT_MARKER);
            fs::write(&marker_path, serde_json::to_vec(&marker).expect("marker serializes"))
                .map_err(io_err(&marker_path))?;
            return Ok(AttemptPath { token, directory, created_at, owner_op: op_id.to_string(), kind });
        }
    }

    /// Writes one file into an attempt directory.
    pub fn write_attempt_file(&self, attempt: &AttemptPath, name: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        if !valid_file_name(name) {
            return Err(StoreError::InvalidName(name.to_string()));
        }
        let mut inner = self.lock();
        inner.check_alive()?;
        let path = attempt.directory.join(name);
        let mut f = File::create(&path).map_err(io_err(&path))?;
        if inner.crash_at == Some(CrashPoint::AttemptFilePartial) {
            f.write_all(&bytes[..bytes.len() / 2]).map_err(io_err(&path))?;
            return inner.crash(CrashPoint::AttemptFilePartial).map(|_| path);
        }
        f.write_all(bytes).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))?;
        inner.crash(CrashPoint::AfterAttemptWrite)?;
        Ok(path)
    }

    /// Copies the attempt's files into the object store and appends the
    /// entry that makes them visible.
    ///
    /// Retrying with the same attempt and identical content returns the
    /// existing entry.
    #[allow(clippy::too_many_arguments)]
    pub fn commit(
        &self,
        op_id: &str,
        attempt: &AttemptPath,
        kind: EntryKind,
        subject_id: &str,
        files: &[&str],
        expected_digest: Option<&str>,
        body: Value,
    ) -> Result<CommitEntry, StoreError> {
        let mut inner = self.lock();
        inner.check_alive()?;

        let mut contents = Vec::with_capacity(files.len());
        for &name in files {
            if !valid_file_name(name) {
                return Err(StoreError::InvalidName(name.to_string()));
            }
            let path = attempt.directory.join(name);
            match fs::read(&path) {
                Ok(b) => contents.push((name, b)),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    return Err(StoreError::MissingFile(path.display().to_string()))
                }
                Err(e) => return Err(StoreError::Io { path, source: e }),
            }
        }
        let digest = files_digest(contents.iter().map(|(n, b)| (*n, b.as_slice())));
        if let Some(expected) = expected_digest {
            if expected != digest {
                return Err(StoreError::DigestMismatch { expected: expected.to_string(), actual: digest });
            }
        }
        if let Some(&pos) = inner.by_attempt.get(&attempt.token) {
            let prior = &inner.entries[pos];
            if prior.op_id.as_deref() == Some(op_id)
                && prior.payload_digest == digest
                && prior.kind == kind
                && prior.subject_id == subject_id
            {
                return Ok(prior.clone());
            }
            return Err(StoreError::DuplicateCommit { op_id: op_id.to_string(), attempt: attempt.token.clone() });
        }
        inner.crash(CrashPoint::AfterVerify)?;

        let object_rel = format!("{OBJECTS_DIR}/{}/{digest}", &digest[..2]);
        let object_dir = self.root.join(&object_rel);
        if !object_dir.exists() {
            let staging = self.root.join(OBJECTS_DIR).join(STAGING_DIR).join(&attempt.token);
            let _ = fs::remove_dir_all(&staging);
            fs::create_dir_all(&staging).map_err(io_err(&staging))?;
            for (i, (name, bytes)) in contents.iter().enumerate() {
                let p = staging.join(name);
                let mut f = File::create(&p).map_err(io_err(&p))?;
                f.write_all(bytes).map_err(io_err(&p))?;
                f.sync_data().map_err(io_err(&p))?;
                if i == 0 {
                    inner.crash(CrashPoint::MidObjectCopy)?;
                }
            }
            let marker = staging.join(OBJECT_MARKER);
            fs::write(&marker, self.clock.now_ms().to_string()).map_err(io_err(&marker))?;
            inner.crash(CrashPoint::BeforeObjectPublish)?;
            let parent = object_dir.parent().expect("object dir has a parent");
            fs::create_dir_all(parent).map_err(io_err(parent))?;
            if let Err(e) = fs::rename(&staging, &object_dir) {
                if !object_dir.exists() {
                    return Err(StoreError::Io { path: object_dir, source: e });
                }
                let _ = fs::remove_dir_all(&staging);
            }
            sync_dir(parent);
        }
        inner.crash(CrashPoint::AfterObjectPublish)?;

        let entry = CommitEntry {
            seq: inner.next_seq,
            timestamp_ms: self.clock.now_ms(),
            kind,
            subject_id: subject_id.to_string(),
            op_id: Some(op_id.to_string()),
            attempt: Some(attempt.token.clone()),
            payload_digest: digest,
            file_refs: contents.iter().map(|(n, _)| format!("{object_rel}/{n}")).collect(),
            status: EntryStatus::Committed,
            body,
        };
        self.append(&mut inner, vec![entry]).map(|mut v| v.remove(0))
    }

    /// Appends a metadata-only entry. The digest covers the serialized body.
    pub fn commit_record(&self, kind: EntryKind, subject_id: &str, op_id: Option<&str>, body: Value) -> Result<CommitEntry, StoreError> {
        let mut inner = self.lock();
        inner.check_alive()?;
        let entry = CommitEntry {
            seq: inner.next_seq,
            timestamp_ms: self.clock.now_ms(),
            kind,
            subject_id: subject_id.to_string(),
            op_id: op_id.map(str::to_string),
            attempt: None,
            payload_digest: sha256_hex(body.to_string().as_bytes()),
            file_refs: Vec::new(),
            status: EntryStatus::Committed,
            body,
        };
        self.append(&mut inner, vec![entry]).map(|mut v| v.remove(0))
    }

    /// Appends many entries for files written outside the attempt area, with a
    /// single sync. Every referenced file must exist.
    pub fn commit_external_batch(&self, records: Vec<ExternalRecord>) -> Result<Vec<CommitEntry>, StoreError> {
        let mut inner = self.lock();
        inner.check_alive()?;
        for r in &records {
            for f in &r.file_refs {
                if !self.resolve_ref(f).is_file() {
                    return Err(StoreError::MissingFile(f.clone()));
                }
            }
        }
        let now = self.clock.now_ms();
        let first = inner.next_seq;
        let entries = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| CommitEntry {
                seq: first + i as u64,
                timestamp_ms: now,
                kind: r.kind,
                subject_id: r.subject_id,
                op_id: r.op_id,
                attempt: None,
                payload_digest: r.payload_digest,
                file_refs: r.file_refs,
                status: EntryStatus::Committed,
                body: r.body,
            })
            .collect();
        self.append(&mut inner, entries)
    }

    fn append(&self, inner: &mut Inner, entries: Vec<CommitEntry>) -> Result<Vec<CommitEntry>, StoreError> {
        if entries.is_empty() {
            return Ok(entries);
        }
        let path = self.root.join(LOG_FILE);
        let bytes: Vec<u8> = entries.iter().flat_map(encode_line).collect();
        if inner.crash_at == Some(CrashPoint::MidAppend) {
            inner.log.write_all(&bytes[..bytes.len() / 2]).map_err(io_err(&path))?;
            inner.log.flush().map_err(io_err(&path))?;
            return inner.crash(CrashPoint::MidAppend).map(|_| Vec::new());
        }
        inner.log.write_all(&bytes).map_err(io_err(&path))?;
        inner.crash(CrashPoint::AfterAppend)?;
        inner.log.sync_data().map_err(io_err(&path))?;
        inner.crash(CrashPoint::AfterSync)?;
        for e in &entries {
            inner.index(e.clone());
        }
        Ok(entries)
    }

    /// Committed entries of `kind`, optionally restricted to one subject, in seq order.
    pub fn list_visible(&self, kind: EntryKind, subject: Option<&str>) -> Vec<CommitEntry> {
        self.lock()
            .entries
            .iter()
            .filter(|e| e.kind == kind && subject.is_none_or(|s| e.subject_id == s))
            .cloned()
            .collect()
    }

    pub fn entries(&self) -> Vec<CommitEntry> {
        self.lock().entries.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read_marker(dir: &Path) -> Option<AttemptMarker> {
        fs::read(dir.join(ATTEMPT_MARKER)).ok().and_then(|b| serde_json::from_slice(&b).ok())
    }

    /// Attempt directories that no committed entry references.
    pub fn orphans(&self) -> Result<Vec<AttemptPath>, StoreError> {
        let inner = self.lock();
        self.orphans_locked(&inner)
    }

    fn orphans_locked(&self, inner: &Inner) -> Result<Vec<AttemptPath>, StoreError> {
        let dir = self.root.join(ATTEMPTS_DIR);
        let mut out = Vec::new();
        for item in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let item = item.map_err(io_err(&dir))?;
            let token = item.file_name().to_string_lossy().into_owned();
            if inner.by_attempt.contains_key(&token) {
                continue;
            }
            let directory = item.path();
            // A directory without a readable marker was torn during begin; treat it as ancient.
            let (created_at, owner_op, kind) = match Self::read_marker(&directory) {
                Some(m) => (m.created_at, m.owner_op, m.kind),
                None => (0, String::new(), EntryKind::Op),
            };
            out.push(AttemptPath { token, directory, created_at, owner_op, kind });
        }
        out.sort_by(|a, b| a.token.cmp(&b.token));
        Ok(out)
    }

    /// Removes orphan attempts older than `older_than_ms`, abandoned staging
    /// copies, and unreferenced objects older than the same threshold.
    pub fn gc_orphans(&self, older_than_ms: u64) -> Result<GcReport, StoreError> {
        let inner = self.lock();
        inner.check_alive()?;
        let now = self.clock.now_ms();
        let mut report = GcReport::default();
        let remove = |path: PathBuf, report: &mut GcReport| match fs::remove_dir_all(&path) {
            Ok(()) => report.removed.push(path),
            Err(e) => report.skipped.push((path, e.to_string())),
        };
        for orphan in self.orphans_locked(&inner)? {
            if now.saturating_sub(orphan.created_at) > older_than_ms {
                remove(orphan.directory, &mut report);
            }
        }
        // The lock excludes in-flight commits, so every staging copy is abandoned.
        let staging = self.root.join(OBJECTS_DIR).join(STAGING_DIR);
        if let Ok(items) = fs::read_dir(&staging) {
            for item in items.flatten() {
                remove(item.path(), &mut report);
            }
        }
        let objects = self.root.join(OBJECTS_DIR);
        for prefix in fs::read_dir(&objects).map_err(io_err(&objects))?.flatten() {
            let name = prefix.file_name().to_string_lossy().into_owned();
            if name == STAGING_DIR || !prefix.path().is_dir() {
                continue;
            }
            for obj in fs::read_dir(prefix.path()).map_err(io_err(&objects))?.flatten() {
                let rel = format!("{OBJECTS_DIR}/{name}/{}", obj.file_name().to_string_lossy());
                if inner.referenced_objects.contains(&rel) {
                    continue;
                }
                let created = fs::read_to_string(obj.path().join(OBJECT_MARKER))
                    .ok()
                    .and_then(|s| s.trim().parse::<u64>().ok())
                    .unwrap_or(0);
                if now.saturating_sub(created) > older_than_ms {
                    remove(obj.path(), &mut report);
                }
            }
        }
        Ok(report)
    }
}
