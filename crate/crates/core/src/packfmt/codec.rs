use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::naming::parse_expert_tensor;
use super::{AdapterManifest, DType, PackError, TensorMap, TensorSpec};
use crate::checksum::crc32;

pub const MAGIC: [u8; 4] = *b"MTPK";
pub const FORMAT_VERSION: u32 = 0;
pub const HEADER_LEN: u64 = 16;
pub const PAYLOAD_ALIGN: u64 = 64;

/// One stacked slab of same-shaped expert tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    #[serde(rename = "name")]
    pub group_name: String,
    #[serde(rename = "members")]
    pub member_names: Vec<String>,
    pub dtype: DType,
    #[serde(rename = "shape")]
    pub stacked_shape: Vec<u64>,
    #[serde(rename = "offset")]
    pub payload_offset: u64,
    #[serde(rename = "length")]
    pub payload_length: u64,
    #[serde(rename = "crc32")]
    pub checksum: u32,
}

/// A tensor stored verbatim.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopiedEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub offset: u64,
    pub length: u64,
    #[serde(rename = "crc32")]
    pub checksum: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedIndex {
    pub version: u32,
    pub groups: Vec<GroupEntry>,
    pub copied: Vec<CopiedEntry>,
}

/// Uniform view of a group or copied key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyRef<'a> {
    pub name: &'a str,
    pub offset: u64,
    pub length: u64,
    pub checksum: u32,
    pub is_group: bool,
}

impl KeyRef<'_> {
    pub fn verify(&self, payload: &[u8]) -> Result<(), PackError> {
        let computed = crc32(payload);
        if computed != self.checksum {
            return Err(PackError::ChecksumMismatch { key: self.name.to_string(), stored: self.checksum, computed });
        }
        Ok(())
    }
}

impl PackedIndex {
    pub fn key_count(&self) -> usize {
        self.groups.len() + self.copied.len()
    }

    /// Groups first, then copied keys; this is also payload order.
    pub fn keys(&self) -> Vec<KeyRef<'_>> {
        let groups = self.groups.iter().map(|g| KeyRef {
            name: &g.group_name,
            offset: g.payload_offset,
            length: g.payload_length,
            checksum: g.checksum,
            is_group: true,
        });
        let copied = self.copied.iter().map(|c| KeyRef {
            name: &c.name,
            offset: c.offset,
            length: c.length,
            checksum: c.checksum,
            is_group: false,
        });
        groups.chain(copied).collect()
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("index serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, PackError> {
        let index: PackedIndex =
            serde_json::from_slice(bytes).map_err(|e| PackError::MalformedIndex(e.to_string()))?;
        if index.version != FORMAT_VERSION {
            return Err(PackError::UnknownVersion(index.version));
        }
        Ok(index)
    }

    /// Checks sort order, alignment, non-overlap and shape/length agreement.
    /// Does not look at payload bytes.
    pub fn validate_structure(&self, payload_start: u64) -> Result<(), PackError> {
        let bad = |msg: String| Err(PackError::MalformedIndex(msg));
        if !self.groups.windows(2).all(|w| w[0].group_name < w[1].group_name) {
            return bad("groups not strictly sorted by name".into());
        }
        if !self.copied.windows(2).all(|w| w[0].name < w[1].name) {
            return bad("copied keys not strictly sorted by name".into());
        }
        let mut cursor = payload_start;
        for key in self.keys() {
            if key.offset % PAYLOAD_ALIGN != 0 {
                return bad(alloc::format!("key `{}` offset {} not 64-byte aligned", key.name, key.offset));
            }
            if key.offset < cursor {
                return bad(alloc::format!("key `{}` overlaps the previous region", key.name));
            }
            cursor = key.offset + key.length;
        }
        for g in &self.groups {
            let members = g.member_names.len() as u64;
            if g.stacked_shape.len() < 2 || g.stacked_shape[0] != members || members == 0 {
                return bad(alloc::format!("group `{}` stacked shape disagrees with member count", g.group_name));
            }
            if g.stacked_shape.iter().product::<u64>() * g.dtype.width() != g.payload_length {
                return bad(alloc::format!("group `{}` length disagrees with shape", g.group_name));
            }
        }
        for c in &self.copied {
            if c.shape.is_empty() || c.shape.iter().product::<u64>() * c.dtype.width() != c.length {
                return bad(alloc::format!("key `{}` length disagrees with shape", c.name));
            }
        }
        Ok(())
    }
}

/// Parses the fixed 16-byte header into (version, index_length).
pub fn parse_header(header: &[u8]) -> Result<(u32, u64), PackError> {
    if header.len() < HEADER_LEN as usize {
        return Err(PackError::TruncatedFile { needed: HEADER_LEN, available: header.len() as u64 });
    }
    if header[..4] != MAGIC {
        return Err(PackError::BadMagic);
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(PackError::UnknownVersion(version));
    }
    let index_len = u64::from_le_bytes(header[8..16].try_into().unwrap());
    Ok((version, index_len))
}

const fn align_up(x: u64) -> u64 {
    x.div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN
}

/// Start of the payload region for an index of `index_len` bytes.
pub(crate) const fn payload_start(index_len: u64) -> u64 {
    align_up(HEADER_LEN + index_len)
}

/// A packed adapter file held in memory, with its parsed index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedFile {
    pub index: PackedIndex,
    bytes: Vec<u8>,
}

impl PackedFile {
    /// Parses header and index. Payload checksums are verified lazily.
    pub fn parse(bytes: Vec<u8>) -> Result<Self, PackError> {
        let (_, index_len) = parse_header(&bytes)?;
        let index_end = HEADER_LEN + index_len;
        if (bytes.len() as u64) < index_end {
            return Err(PackError::TruncatedFile { needed: index_end, available: bytes.len() as u64 });
        }
        let index = PackedIndex::from_json(&bytes[HEADER_LEN as usize..index_end as usize])?;
        index.validate_structure(payload_start(index_len))?;
        Ok(Self { index, bytes })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn key_count(&self) -> usize {
        self.index.key_count()
    }

    /// Bytes of the header plus JSON index, excluding alignment padding.
    pub fn index_bytes(&self) -> u64 {
        HEADER_LEN + u64::from_le_bytes(self.bytes[8..16].try_into().unwrap())
    }

    /// Raw payload of one key, bounds-checked against the file length.
    pub fn raw_payload(&self, key: &KeyRef<'_>) -> Result<&[u8], PackError> {
        let end = key.offset + key.length;
        if end > self.len() {
            return Err(PackError::TruncatedFile { needed: end, available: self.len() });
        }
        Ok(&self.bytes[key.offset as usize..end as usize])
    }

    /// Payload of one key after checksum verification.
    pub fn read_key(&self, key: &KeyRef<'_>) -> Result<&[u8], PackError> {
        let payload = self.raw_payload(key)?;
        key.verify(payload)?;
        Ok(payload)
    }
}

enum Slab<'a> {
    Group { name: String, members: Vec<&'a TensorSpec> },
    Copied(&'a TensorSpec),
}

fn check_payloads(manifest: &AdapterManifest, payloads: &TensorMap) -> Result<(), PackError> {
    for t in &manifest.tensors {
        let bytes = payloads.get(&t.name).ok_or_else(|| PackError::MissingPayload(t.name.clone()))?;
        if bytes.len() as u64 != t.byte_length {
            return Err(PackError::PayloadLength {
                name: t.name.clone(),
                expected: t.byte_length,
                actual: bytes.len() as u64,
            });
        }
    }
    Ok(())
}

fn plan_slabs(manifest: &AdapterManifest, group_experts: bool) -> Result<Vec<Slab<'_>>, PackError> {
    let mut names = BTreeMap::new();
    for t in &manifest.tensors {
        if names.insert(t.name.as_str(), ()).is_some() {
            return Err(PackError::DuplicateName(t.name.clone()));
        }
    }

    let mut groups: BTreeMap<String, BTreeMap<u32, &TensorSpec>> = BTreeMap::new();
    let mut copied: BTreeMap<&str, &TensorSpec> = BTreeMap::new();
    for t in &manifest.tensors {
        match parse_expert_tensor(&t.name).filter(|_| group_experts) {
            Some((key, expert)) => {
                groups.entry(key.group_name()).or_default().insert(expert, t);
            }
            None => {
                copied.insert(&t.name, t);
            }
        }
    }

    let mut slabs = Vec::with_capacity(groups.len() + copied.len());
    for (name, members) in groups {
        if copied.contains_key(name.as_str()) {
            return Err(PackError::DuplicateName(name));
        }
        let first = *members.values().next().expect("groups are non-empty");
        for (position, (&expert, &member)) in members.iter().enumerate() {
            if expert != position as u32 {
                return Err(PackError::MissingExpert { group: name, expert: position as u32 });
            }
            if member.dtype != first.dtype || member.shape != first.shape {
                return Err(PackError::HeterogeneousGroup { group: name, member: member.name.clone() });
            }
        }
        slabs.push(Slab::Group { name, members: members.into_values().collect() });
    }
    slabs.extend(copied.into_values().map(Slab::Copied));
    Ok(slabs)
}

fn build_index(slabs: &[Slab<'_>], payloads: &TensorMap, start: u64) -> PackedIndex {
    let mut groups = Vec::new();
    let mut copied = Vec::new();
    let mut cursor = start;
    for slab in slabs {
        match slab {
            Slab::Group { name, members } => {
                let first = members[0];
                let length = first.byte_length * members.len() as u64;
                let mut hasher = crc32fast::Hasher::new();
                for m in members {
                    hasher.update(&payloads[&m.name]);
                }
                let mut stacked_shape = vec![members.len() as u64];
                stacked_shape.extend_from_slice(&first.shape);
                groups.push(GroupEntry {
                    group_name: name.clone(),
                    member_names: members.iter().map(|m| m.name.clone()).collect(),
                    dtype: first.dtype,
                    stacked_shape,
                    payload_offset: cursor,
                    payload_length: length,
                    checksum: hasher.finalize(),
                });
                cursor = align_up(cursor + length);
            }
            Slab::Copied(t) => {
                copied.push(CopiedEntry {
                    name: t.name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    offset: cursor,
                    length: t.byte_length,
                    checksum: crc32(&payloads[&t.name]),
                });
                cursor = align_up(cursor + t.byte_length);
            }
        }
    }
    PackedIndex { version: FORMAT_VERSION, groups, copied }
}

fn pack_with(manifest: &AdapterManifest, payloads: &TensorMap, group_experts: bool) -> Result<PackedFile, PackError> {
    check_payloads(manifest, payloads)?;
    let slabs = plan_slabs(manifest, group_experts)?;

    // Offsets are absolute, so the payload start depends on the index length
    // and vice versa. Offsets only grow, so this reaches a fixed point.
    let mut start = payload_start(0);
    let (index, json) = loop {
        let index = build_index(&slabs, payloads, start);
        let json = index.to_json();
        let needed = payload_start(json.len() as u64);
        if needed == start {
            break (index, json);
        }
        start = needed;
    };

    let end = index.keys().last().map_or(start, |k| k.offset + k.length);
    let mut bytes = Vec::with_capacity(end as usize);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (slab, key) in slabs.iter().zip(index.keys()) {
        bytes.resize(key.offset as usize, 0);
        match slab {
            Slab::Group { members, .. } => {
                for m in members {
                    bytes.extend_from_slice(&payloads[&m.name]);
                }
            }
            Slab::Copied(t) => bytes.extend_from_slice(&payloads[&t.name]),
        }
    }
    bytes.resize(end as usize, 0);
    Ok(PackedFile { index, bytes })
}

/// Packs an adapter, stacking complete expert groups and copying the rest.
pub fn pack(manifest: &AdapterManifest, payloads: &TensorMap) -> Result<PackedFile, PackError> {
    pack_with(manifest, payloads, true)
}

/// Writes the same adapter with one key per tensor (the unpacked fanout form).
pub fn pack_fanout(manifest: &AdapterManifest, payloads: &TensorMap) -> Result<PackedFile, PackError> {
    pack_with(manifest, payloads, false)
}

/// Verifies every key and splits group slabs back into member tensors.
/// The manifest comes back in name order.
pub fn unpack(file: &PackedFile) -> Result<(AdapterManifest, TensorMap), PackError> {
    let mut tensors = Vec::with_capacity(file.key_count());
    let mut map = TensorMap::new();
    let keys = file.index.keys();
    let (group_keys, copied_keys) = keys.split_at(file.index.groups.len());
    for (g, key) in file.index.groups.iter().zip(group_keys) {
        let payload = file.read_key(key)?;
        let member_len = (g.payload_length / g.member_names.len() as u64) as usize;
        let member_shape = g.stacked_shape[1..].to_vec();
        for (i, name) in g.member_names.iter().enumerate() {
            tensors.push(TensorSpec::new(name.clone(), g.dtype, member_shape.clone()));
            map.insert(name.clone(), payload[i * member_len..(i + 1) * member_len].to_vec());
        }
    }
    for (c, key) in file.index.copied.iter().zip(copied_keys) {
        let payload = file.read_key(key)?;
        tensors.push(TensorSpec::new(c.name.clone(), c.dtype, c.shape.clone()));
        map.insert(c.name.clone(), payload.to_vec());
    }
    let manifest = AdapterManifest::new(tensors)?.canonical();
    Ok((manifest, map))
}
