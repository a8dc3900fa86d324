//! Packed adapter container ("MTPK").
//!
//! MoE LoRA adapters fan out into one tiny tensor per (layer, expert,
//! projection, A/B). The packed form stacks all experts of one
//! (layer, projection, A/B) into a single group slab and copies every other
//! tensor verbatim, so a 48 x 128 x 3 x 2 + 384 adapter becomes 288 group
//! keys plus 384 copied keys.
//!
//! File layout, little-endian:
//!
//! ```text
//! 0   4D 54 50 4B          magic "MTPK"
//! 4   u32                  version (0)
//! 8   u64                  index_length
//! 16  [u8; index_length]   UTF-8 JSON index
//!     zero padding to the next 64-byte boundary
//!     payload region, every key 64-byte aligned
//! ```

mod audit;
mod codec;
mod naming;
mod synthetic;

pub use audit::{audit_index, audit_packed, sample_key_indices, AuditReport, KeyFailure, LoaderObjects};
pub use codec::{
    pack, pack_fanout, parse_header, unpack, CopiedEntry, GroupEntry, KeyRef, PackedFile,
    PackedIndex, FORMAT_VERSION, HEADER_LEN, MAGIC, PAYLOAD_ALIGN,
};
pub use naming::{derive_group_key, parse_expert_tensor, GroupKey, LoraSide};
pub use synthetic::{projection_name, SyntheticAdapter};

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Tensor name to raw payload bytes.
pub type TensorMap = BTreeMap<String, Vec<u8>>;

/// Element type of a stored tensor. Codes are part of the on-disk format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum DType {
    F32,
    Bf16,
    F16,
    U8,
}

impl DType {
    pub const fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::Bf16 => 1,
            DType::F16 => 2,
            DType::U8 => 3,
        }
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::Bf16),
            2 => Some(DType::F16),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    /// Bytes per element.
    pub const fn width(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::Bf16 | DType::F16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "bf16" => Some(DType::Bf16),
            "f16" => Some(DType::F16),
            "u8" => Some(DType::U8),
            _ => None,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::Bf16 => "bf16",
            DType::F16 => "f16",
            DType::U8 => "u8",
        }
    }
}

impl From<DType> for u8 {
    fn from(d: DType) -> u8 {
        d.code()
    }
}

impl TryFrom<u8> for DType {
    type Error = String;

    fn try_from(code: u8) -> Result<Self, String> {
        DType::from_code(code).ok_or_else(|| alloc::format!("unknown dtype code {code}"))
    }
}

/// Declared metadata of one tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub byte_length: u64,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<u64>) -> Self {
        let byte_length = shape.iter().product::<u64>() * dtype.width();
        Self { name: name.into(), dtype, shape, byte_length }
    }

    pub fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }

    fn validate(&self) -> Result<(), PackError> {
        let invalid = |reason| PackError::InvalidTensor { name: self.name.clone(), reason };
        if self.name.is_empty() {
            return Err(invalid("empty name"));
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(invalid("shape must be non-empty with positive dimensions"));
        }
        if self.byte_length != self.element_count() * self.dtype.width() {
            return Err(invalid("byte_length disagrees with shape and dtype"));
        }
        Ok(())
    }
}

/// Generation parameters of a synthetic MoE adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub layers: u32,
    pub experts: u32,
    pub projections: u32,
    pub others: u32,
}

impl LayoutParams {
    pub const fn new(layers: u32, experts: u32, projections: u32, others: u32) -> Self {
        Self { layers, experts, projections, others }
    }

    /// The 30B-A3B rank-1 shape: 48 layers, 128 experts, 3 expert projections, 384 others.
    pub const fn qwen3_30b() -> Self {
        Self::new(48, 128, 3, 384)
    }

    pub const fn expert_tensor_count(&self) -> u64 {
        self.layers as u64 * self.experts as u64 * self.projections as u64 * 2
    }

    /// Tensor fanout before packing.
    pub const fn tensor_count(&self) -> u64 {
        self.expert_tensor_count() + self.others as u64
    }

    pub const fn group_count(&self) -> u64 {
        if self.experts == 0 {
            0
        } else {
            self.layers as u64 * self.projections as u64 * 2
        }
    }

    /// Key count after packing.
    pub const fn packed_key_count(&self) -> u64 {
        self.group_count() + self.others as u64
    }
}

/// Ordered tensor list of one adapter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub tensors: Vec<TensorSpec>,
    pub total_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_params: Option<LayoutParams>,
}

impl AdapterManifest {
    /// Validates specs and name uniqueness.
    pub fn new(tensors: Vec<TensorSpec>) -> Result<Self, PackError> {
        let mut seen = BTreeSet::new();
        for t in &tensors {
            t.validate()?;
            if !seen.insert(t.name.as_str()) {
                return Err(PackError::DuplicateName(t.name.clone()));
            }
        }
        let total_bytes = tensors.iter().map(|t| t.byte_length).sum();
        Ok(Self { tensors, total_bytes, layout_params: None })
    }

    /// Same tensors in name order, without layout parameters. `unpack` yields this form.
    pub fn canonical(&self) -> Self {
        let mut tensors = self.tensors.clone();
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        Self { tensors, total_bytes: self.total_bytes, layout_params: None }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PackError {
    #[error("tensor name `{0}` appears more than once")]
    DuplicateName(String),
    #[error("group `{group}`: member `{member}` differs in dtype or shape")]
    HeterogeneousGroup { group: String, member: String },
    #[error("group `{group}` is missing expert {expert}")]
    MissingExpert { group: String, expert: u32 },
    #[error("no payload supplied for tensor `{0}`")]
    MissingPayload(String),
    #[error("payload for `{name}` is {actual} bytes, manifest declares {expected}")]
    PayloadLength { name: String, expected: u64, actual: u64 },
    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: &'static str },
    #[error("file truncated: need {needed} bytes, have {available}")]
    TruncatedFile { needed: u64, available: u64 },
    #[error("bad magic, not a packed adapter file")]
    BadMagic,
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
    #[error("malformed index: {0}")]
    MalformedIndex(String),
    #[error("checksum mismatch in key `{key}`: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { key: String, stored: u32, computed: u32 },
}

impl PackError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            PackError::DuplicateName(_) => "duplicate_name",
            PackError::HeterogeneousGroup { .. } => "heterogeneous_group",
            PackError::MissingExpert { .. } => "missing_expert",
            PackError::MissingPayload(_) => "missing_payload",
            PackError::PayloadLength { .. } => "payload_length",
            PackError::InvalidTensor { .. } => "invalid_tensor",
            PackError::TruncatedFile { .. } => "truncated_file",
            PackError::BadMagic => "bad_magic",
            PackError::UnknownVersion(_) => "unknown_version",
            PackError::MalformedIndex(_) => "malformed_index",
            PackError::ChecksumMismatch { .. } => "checksum_mismatch",
        }
    }
}
