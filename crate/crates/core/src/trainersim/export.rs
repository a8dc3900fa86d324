use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::TrainerError;
use crate::packfmt::{parse_expert_tensor, AdapterManifest, TensorMap, TensorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FragmentKind {
    /// Row block `index` of `of` along dimension 0.
    Slice { index: u32, of: u32 },
    /// Full copy held by every tensor-parallel rank.
    Replica,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorFragment {
    pub kind: FragmentKind,
    pub bytes: Vec<u8>,
}

/// An adapter as it sits across tensor-parallel and expert-parallel ranks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardedAdapterView {
    pub specs: Vec<TensorSpec>,
    /// Dense (non-expert) tensors per TP rank.
    pub tp_slices: Vec<BTreeMap<String, TensorFragment>>,
    pub ep_owned_experts: Vec<BTreeSet<u32>>,
    /// Routed-expert tensors per EP rank.
    pub expert_tensors: Vec<BTreeMap<String, Vec<u8>>>,
    /// Shared-expert tensors, duplicated on every EP rank.
    pub shared_expert_copies: Vec<BTreeMap<String, Vec<u8>>>,
}

/// Result of reassembling a sharded adapter into one serving manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportedAdapter {
    pub manifest: AdapterManifest,
    pub payloads: TensorMap,
    pub replicas_deduplicated: usize,
    pub shared_copies_deduplicated: usize,
}

enum Class {
    Expert(u32),
    Shared,
    Dense,
}

fn classify(name: &str) -> Class {
    if let Some((_, expert)) = parse_expert_tensor(name) {
        Class::Expert(expert)
    } else if name.contains(".shared_expert.") {
        Class::Shared
    } else {
        Class::Dense
    }
}

/// Distributes an unsharded adapter over `tp` x `ep` ranks.
///
/// Dense `lora_B` tensors whose first dimension divides by `tp` are split into
/// row blocks; every other dense tensor is replicated. Experts are assigned to
/// EP ranks in contiguous blocks.
pub fn shard_adapter(manifest: &AdapterManifest, payloads: &TensorMap, tp: u32, ep: u32) -> ShardedAdapterView {
    assert!(tp > 0 && ep > 0, "parallel degrees must be positive");
    let experts = manifest
        .tensors
        .iter()
        .filter_map(|t| parse_expert_tensor(&t.name).map(|(_, e)| e + 1))
        .max()
        .unwrap_or(0);
    let per_rank = experts.div_ceil(ep).max(1);
    let mut view = ShardedAdapterView {
        specs: manifest.tensors.clone(),
        tp_slices: (0..tp).map(|_| BTreeMap::new()).collect(),
        ep_owned_experts: (0..ep).map(|r| (r * per_rank..((r + 1) * per_rank).min(experts)).collect()).collect(),
        expert_tensors: (0..ep).map(|_| BTreeMap::new()).collect(),
        shared_expert_copies: (0..ep).map(|_| BTreeMap::new()).collect(),
    };
    for t in &manifest.tensors {
        let bytes = &payloads[&t.name];
        match classify(&t.name) {
            Class::Expert(e) => {
                view.expert_tensors[(e / per_rank) as usize].insert(t.name.clone(), bytes.clone());
            }
            Class::Shared => {
                for copies in &mut view.shared_expert_copies {
                    copies.insert(t.name.clone(), bytes.clone());
                }
            }
            Class::Dense => {
                let sliced = t.name.contains("lora_B") && t.shape[0] % tp as u64 == 0;
                let chunk = bytes.len() / tp as usize;
                for (rank, frags) in view.tp_slices.iter_mut().enumerate() {
                    let fragment = if sliced {
                        TensorFragment {
                            kind: FragmentKind::Slice { index: rank as u32, of: tp },
                            bytes: bytes[rank * chunk..(rank + 1) * chunk].to_vec(),
                        }
                    } else {
                        TensorFragment { kind: FragmentKind::Replica, bytes: bytes.clone() }
                    };
                    frags.insert(t.name.clone(), fragment);
                }
            }
        }
    }
    view
}

fn gather_dense(view: &ShardedAdapterView, spec: &TensorSpec) -> Result<(Vec<u8>, usize), TrainerError> {
    let missing = || TrainerError::MissingSlice(spec.name.clone());
    let frags: Vec<&TensorFragment> = view.tp_slices.iter().filter_map(|r| r.get(&spec.name)).collect();
    let first = frags.first().ok_or_else(missing)?;
    match first.kind {
        FragmentKind::Replica => {
            if frags.iter().any(|f| f.kind != FragmentKind::Replica || f.bytes != first.bytes) {
                return Err(TrainerError::ReplicaDivergence(spec.name.clone()));
            }
            Ok((first.bytes.clone(), frags.len() - 1))
        }
        FragmentKind::Slice { of, .. } => {
            let mut blocks: BTreeMap<u32, &[u8]> = BTreeMap::new();
            for f in &frags {
                match f.kind {
                    FragmentKind::Slice { index, of: n } if n == of => {
                        blocks.insert(index, &f.bytes);
                    }
                    _ => return Err(TrainerError::ReplicaDivergence(spec.name.clone())),
                }
            }
            if blocks.len() != of as usize || blocks.keys().copied().ne(0..of) {
                return Err(missing());
            }
            Ok((blocks.values().flat_map(|b| b.iter().copied()).collect(), 0))
        }
    }
}

/// Gathers TP slices, writes replicated tensors once, collects each expert
/// from its owning EP rank and deduplicates shared-expert copies.
pub fn export_from_shards(view: &ShardedAdapterView) -> Result<ExportedAdapter, TrainerError> {
    let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
    for (rank, owned) in view.ep_owned_experts.iter().enumerate() {
        for &e in owned {
            if owner.insert(e, rank).is_some() {
                return Err(TrainerError::OverlappingOwnership { tensor: "*".to_string(), expert: e });
            }
        }
    }

    let mut payloads = TensorMap::new();
    let mut replicas_deduplicated = 0;
    let mut shared_copies_deduplicated = 0;
    for spec in &view.specs {
        let missing = || TrainerError::MissingSlice(spec.name.clone());
        let bytes = match classify(&spec.name) {
            Class::Expert(e) => {
                let holders: Vec<usize> =
                    (0..view.expert_tensors.len()).filter(|&r| view.expert_tensors[r].contains_key(&spec.name)).collect();
                if holders.len() > 1 {
                    return Err(TrainerError::OverlappingOwnership { tensor: spec.name.clone(), expert: e });
                }
                let rank = *owner.get(&e).ok_or_else(missing)?;
                view.expert_tensors[rank].get(&spec.name).ok_or_else(missing)?.clone()
            }
            Class::Shared => {
                let copies: Vec<&Vec<u8>> = view.shared_expert_copies.iter().filter_map(|c| c.get(&spec.name)).collect();
                let first = *copies.first().ok_or_else(missing)?;
                if copies.iter().any(|c| *c != first) {
                    return Err(TrainerError::ReplicaDivergence(spec.name.clone()));
                }
                shared_copies_deduplicated += copies.len() - 1;
                first.clone()
            }
            Class::Dense => {
                let (bytes, dropped) = gather_dense(view, spec)?;
                replicas_deduplicated += dropped;
                bytes
            }
        };
        if bytes.len() as u64 != spec.byte_length {
            return Err(missing());
        }
        payloads.insert(spec.name.clone(), bytes);
    }
    let manifest = AdapterManifest::new(view.specs.clone()).map_err(|e| TrainerError::MissingSlice(e.to_string()))?;
    Ok(ExportedAdapter { manifest, payloads, replicas_deduplicated, shared_copies_deduplicated })
}
