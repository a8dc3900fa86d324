use lorafleet_core::packfmt::{
    pack, pack_fanout, unpack, DType, LayoutParams, PackedFile, SyntheticAdapter, HEADER_LEN, PAYLOAD_ALIGN,
};
use proptest::prelude::*;

fn dtype() -> impl Strategy<Value = DType> {
    prop_oneof![Just(DType::F32), Just(DType::Bf16), Just(DType::F16), Just(DType::U8)]
}

fn adapter() -> impl Strategy<Value = (SyntheticAdapter, u64)> {
    (1u32..=8, 0u32..=8, 1u32..=8, 0u32..=8, dtype(), 1u64..4, 1u64..4, any::<bool>(), any::<u64>()).prop_map(
        |(l, e, p, o, dtype, r, c, shared, seed)| {
            let mut a = SyntheticAdapter::tiny(LayoutParams::new(l, e, p, o));
            a.dtype = dtype;
            a.expert_shape = vec![r, c];
            a.other_shape = vec![c, r];
            a.shared_expert = shared;
            (a, seed)
        },
    )
}

fn assert_offsets_sane(file: &PackedFile) {
    let mut keys = file.index.keys();
    keys.sort_by_key(|k| k.offset);
    let mut prev_end = file.index_bytes();
    assert!(prev_end > HEADER_LEN);
    for k in &keys {
        assert_eq!(k.offset % PAYLOAD_ALIGN, 0, "{} misaligned", k.name);
        assert!(k.offset >= prev_end, "{} overlaps", k.name);
        prev_end = k.offset + k.length;
    }
    assert!(prev_end <= file.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_lossless((gen, seed) in adapter()) {
        let (m, p) = gen.build(seed);
        let file = pack(&m, &p).unwrap();
        let reparsed = PackedFile::parse(file.as_bytes().to_vec()).unwrap();
        let (m2, p2) = unpack(&reparsed).unwrap();
        prop_assert_eq!(m2, m.canonical());
        prop_assert_eq!(p2, p);
    }

    #[test]
    fn key_count_follows_layout((gen, seed) in adapter()) {
        let (m, p) = gen.build(seed);
        let l = gen.layout;
        let file = pack(&m, &p).unwrap();
        prop_assert_eq!(file.index.groups.len() as u64, l.group_count());
        prop_assert_eq!(file.key_count() as u64, l.packed_key_count());
        prop_assert_eq!(pack_fanout(&m, &p).unwrap().key_count() as u64, l.tensor_count());
        assert_offsets_sane(&file);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn large_payload_overhead_is_small(l in 1u32..3, e in 2u32..5, seed in any::<u64>()) {
        let mut gen = SyntheticAdapter::tiny(LayoutParams::new(l, e, 2, 4));
        gen.expert_shape = vec![128, 64];
        gen.other_shape = vec![64, 64];
        let (m, p) = gen.build(seed);
        let raw: u64 = p.values().map(|v| v.len() as u64).sum();
        prop_assume!(raw >= 1 << 20);
        let file = pack(&m, &p).unwrap();
        prop_assert!(file.len() as f64 <= raw as f64 * 1.10, "{} vs {}", file.len(), raw);
        assert_offsets_sane(&file);
    }
}
