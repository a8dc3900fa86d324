use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdapterManifest, DType, LayoutParams, TensorMap, TensorSpec};

const BASE_PROJECTIONS: [&str; 3] = ["gate", "up", "down"];
const ATTENTION: [&str; 4] = ["q", "k", "v", "o"];

/// Expert projection name for index `p`: gate, up, down, then proj3, proj4, ...
pub fn projection_name(p: u32) -> Cow<'static, str> {
    match BASE_PROJECTIONS.get(p as usize) {
        Some(name) => Cow::Borrowed(name),
        None => Cow::Owned(format!("proj{p}")),
    }
}

/// Generator for MoE-shaped adapters with `L*E*P*2 + O` tensors.
///
/// Non-expert tensors walk attention q/k/v/o (and optional shared-expert
/// projections) layer by layer, A before B, and spill into `model.extra.*`
/// once the layers run out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticAdapter {
    pub layout: LayoutParams,
    pub dtype: DType,
    pub expert_shape: Vec<u64>,
    pub other_shape: Vec<u64>,
    #[serde(default)]
    pub shared_expert: bool,
}

impl SyntheticAdapter {
    /// 4-byte payload per tensor (f32 scalar matrices).
    pub fn tiny(layout: LayoutParams) -> Self {
        Self {
            layout,
            dtype: DType::F32,
            expert_shape: vec![1, 1],
            other_shape: vec![1, 1],
            shared_expert: false,
        }
    }

    fn other_slots(&self) -> Vec<Cow<'static, str>> {
        let mut slots: Vec<Cow<'static, str>> =
            ATTENTION.iter().map(|m| Cow::Owned(format!("self_attn.{m}"))).collect();
        if self.shared_expert {
            for p in 0..self.layout.projections {
                slots.push(Cow::Owned(format!("mlp.shared_expert.{}", projection_name(p))));
            }
        }
        slots
    }

    fn other_name(&self, i: u32, slots: &[Cow<'static, str>]) -> alloc::string::String {
        let per_layer = slots.len() as u32 * 2;
        let layer = i / per_layer;
        let side = if i.is_multiple_of(2) { "A" } else { "B" };
        if layer < self.layout.layers {
            let slot = &slots[((i % per_layer) / 2) as usize];
            format!("model.layers.{layer}.{slot}.lora_{side}.weight")
        } else {
            format!("model.extra.{i}.lora_{side}.weight")
        }
    }

    pub fn manifest(&self) -> AdapterManifest {
        let l = self.layout;
        let mut tensors = Vec::with_capacity(l.tensor_count() as usize);
        for layer in 0..l.layers {
            for expert in 0..l.experts {
                for p in 0..l.projections {
                    let proj = projection_name(p);
                    for side in ["A", "B"] {
                        let name = format!("model.layers.{layer}.mlp.experts.{expert}.{proj}.lora_{side}.weight");
                        tensors.push(TensorSpec::new(name, self.dtype, self.expert_shape.clone()));
                    }
                }
            }
        }
        let slots = self.other_slots();
        for i in 0..l.others {
            tensors.push(TensorSpec::new(self.other_name(i, &slots), self.dtype, self.other_shape.clone()));
        }
        let mut manifest = AdapterManifest::new(tensors).expect("synthetic names are unique");
        manifest.layout_params = Some(l);
        manifest
    }

    /// Pseudorandom payload bytes for every tensor, a pure function of `seed`.
    pub fn payloads(&self, manifest: &AdapterManifest, seed: u64) -> TensorMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        manifest
            .tensors
            .iter()
            .map(|t| {
                let mut bytes = vec![0u8; t.byte_length as usize];
                rng.fill_bytes(&mut bytes);
                (t.name.clone(), bytes)
            })
            .collect()
    }

    pub fn build(&self, seed: u64) -> (AdapterManifest, TensorMap) {
        let manifest = self.manifest();
        let payloads = self.payloads(&manifest, seed);
        (manifest, payloads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packfmt::derive_group_key;
    use alloc::collections::BTreeSet;

    #[test]
    fn qwen_shape_counts() {
        let m = SyntheticAdapter::tiny(LayoutParams::qwen3_30b()).manifest();
        assert_eq!(m.tensors.len(), 37_248);
        let groups: BTreeSet<_> = m.tensors.iter().filter_map(|t| derive_group_key(&t.name)).collect();
        assert_eq!(groups.len(), 288);
        assert_eq!(m.tensors.iter().filter(|t| derive_group_key(&t.name).is_none()).count(), 384);
        // 384 others exactly cover q/k/v/o x A/B over 48 layers.
        assert!(m.tensors.iter().all(|t| !t.name.starts_with("model.extra")));
    }

    #[test]
    fn extras_when_layers_run_out() {
        let m = SyntheticAdapter::tiny(LayoutParams::new(0, 0, 0, 5)).manifest();
        assert_eq!(m.tensors.len(), 5);
        assert!(m.tensors.iter().all(|t| t.name.starts_with("model.extra.")));
    }
}
