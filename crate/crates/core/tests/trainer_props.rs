use lorafleet_core::lifecycle::{AdapterShape, ShapeLimits};
use lorafleet_core::packfmt::{LayoutParams, SyntheticAdapter};
use lorafleet_core::trainersim::{export_from_shards, shard_adapter, StateDigests, TrainerWorker};
use proptest::prelude::*;
use std::collections::BTreeMap;

const MODULES: [&str; 4] = ["down", "gate", "o_proj", "up"];

fn shape_for(i: usize) -> AdapterShape {
    let rank = [1, 2, 4, 8, 16][i % 5];
    let modules: Vec<&str> = MODULES.iter().copied().enumerate().filter(|(k, _)| (i >> k) & 1 == 1 || *k == i % 4).map(|(_, m)| m).collect();
    AdapterShape::new(rank, modules).unwrap()
}

#[derive(Clone, Debug)]
enum Op {
    Switch(usize),
    Update(u64),
    Micro(u64),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![(0usize..6).prop_map(Op::Switch), any::<u64>().prop_map(Op::Update), any::<u64>().prop_map(Op::Micro)],
        1..120,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn switches_preserve_digests_and_padding(ops in ops()) {
        let mut w = TrainerWorker::new("t0", "base", 1 << 20, ShapeLimits::new(16, MODULES), 4);
        let mut expected: BTreeMap<String, StateDigests> = BTreeMap::new();
        let mut accumulating = false;
        w.attach("policy/0", "tok", &shape_for(0)).unwrap();
        for op in ops {
            match op {
                Op::Switch(i) => {
                    let to = format!("policy/{i}");
                    let from = w.active_policy().unwrap().to_string();
                    let r = w.switch_policy(&to, "tok", &shape_for(i));
                    if to == from || accumulating {
                        prop_assert!(r.is_err());
                        continue;
                    }
                    let r = r.unwrap();
                    expected.insert(from, r.saved.clone());
                    if let Some(want) = expected.get(&to) {
                        prop_assert_eq!(&r.restored, want);
                    }
                }
                Op::Update(s) => {
                    w.run_update("tok", s).unwrap();
                    accumulating = false;
                }
                Op::Micro(s) => {
                    w.accumulate_microbatch("tok", s).unwrap();
                    accumulating = true;
                }
            }
            prop_assert!(w.inactive_region_is_zero());
        }
        for (policy, digests) in &expected {
            if w.active_policy() != Some(policy) {
                prop_assert_eq!(&w.store()[policy].state.digests(), digests);
            }
        }
    }

    #[test]
    fn sharded_export_reassembles(tp in prop::sample::select(vec![1u32, 2, 4]), ep in prop::sample::select(vec![1u32, 2, 4]),
                                  layers in 1u32..4, experts in 1u32..9, others in 0u32..24, seed in any::<u64>()) {
        let mut gen = SyntheticAdapter::tiny(LayoutParams::new(layers, experts, 2, others));
        gen.other_shape = vec![4, 2];
        gen.shared_expert = true;
        let (m, p) = gen.build(seed);
        let out = export_from_shards(&shard_adapter(&m, &p, tp, ep)).unwrap();
        prop_assert_eq!(&out.manifest.tensors, &m.tensors);
        prop_assert_eq!(out.payloads, p);
        let shared = m.tensors.iter().filter(|t| t.name.contains(".shared_expert.")).count();
        prop_assert_eq!(out.shared_copies_deduplicated, shared * (ep as usize - 1));
    }
}
