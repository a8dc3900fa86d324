use alloc::format;
use alloc::string::{String, ToString};

/// Which LoRA factor a tensor holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LoraSide {
    A,
    B,
}

impl LoraSide {
    pub const fn as_str(self) -> &'static str {
        match self {
            LoraSide::A => "A",
            LoraSide::B => "B",
        }
    }
}

/// Grouping key of an expert tensor: all experts sharing it stack into one slab.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub layer: u32,
    pub projection: String,
    pub side: LoraSide,
}

impl GroupKey {
    /// Canonical slab name: the member name with the expert index removed.
    pub fn group_name(&self) -> String {
        format!(
            "model.layers.{}.mlp.experts.{}.lora_{}.weight",
            self.layer,
            self.projection,
            self.side.as_str()
        )
    }

    /// Name of the member tensor for `expert`.
    pub fn member_name(&self, expert: u32) -> String {
        format!(
            "model.layers.{}.mlp.experts.{}.{}.lora_{}.weight",
            self.layer,
            expert,
            self.projection,
            self.side.as_str()
        )
    }
}

// Canonical decimal only, so "01" and "1" never alias.
fn parse_index(s: &str) -> Option<u32> {
    if s.is_empty() || (s.len() > 1 && s.starts_with('0')) || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

/// Splits `model.layers.{L}.mlp.experts.{E}.{proj}.lora_{A|B}.weight` into its
/// group key and expert index. Any other name returns `None`.
pub fn parse_expert_tensor(name: &str) -> Option<(GroupKey, u32)> {
    let mut parts = name.split('.');
    let mut next = || parts.next();
    if next()? != "model" || next()? != "layers" {
        return None;
    }
    let layer = parse_index(next()?)?;
    if next()? != "mlp" || next()? != "experts" {
        return None;
    }
    let expert = parse_index(next()?)?;
    let projection = next()?;
    if projection.is_empty() {
        return None;
    }
    let side = match next()? {
        "lora_A" => LoraSide::A,
        "lora_B" => LoraSide::B,
        _ => return None,
    };
    if next()? != "weight" || next().is_some() {
        return None;
    }
    Some((GroupKey { layer, projection: projection.to_string(), side }, expert))
}

/// Group key of an expert tensor name, or `None` when the tensor is copied as-is.
pub fn derive_group_key(name: &str) -> Option<GroupKey> {
    parse_expert_tensor(name).map(|(key, _)| key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_name_maps_to_group() {
        let key = derive_group_key("model.layers.3.mlp.experts.17.gate.lora_A.weight").unwrap();
        assert_eq!(key, GroupKey { layer: 3, projection: "gate".into(), side: LoraSide::A });
        assert_eq!(key.group_name(), "model.layers.3.mlp.experts.gate.lora_A.weight");
        assert_eq!(key.member_name(17), "model.layers.3.mlp.experts.17.gate.lora_A.weight");
    }

    #[test]
    fn non_expert_names_are_copied() {
        for name in [
            "model.layers.0.self_attn.q.lora_A.weight",
            "model.layers.0.mlp.experts.1.gate.lora_C.weight",
            "model.layers.0.mlp.experts.01.gate.lora_A.weight",
            "model.layers.x.mlp.experts.1.gate.lora_A.weight",
            "model.layers.0.mlp.experts.1.gate.lora_A.weight.extra",
            "model.layers.0.mlp.experts.1..lora_A.weight",
            "model.layers.0.mlp.shared_expert.gate.lora_A.weight",
            "",
        ] {
            assert_eq!(derive_group_key(name), None, "{name}");
        }
    }
}
