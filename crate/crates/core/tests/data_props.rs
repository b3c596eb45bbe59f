use proptest::prelude::*;
use shadowsam_core::data_io::{load_config, load_gt_mask, load_mask, save_mask, MaskKind, ShadowMask};

fn binary_mask() -> impl Strategy<Value = ShadowMask> {
    (1usize..=64, 1usize..=64).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| ShadowMask::binary(h, w, bits).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn binary_masks_round_trip_exactly(m in binary_mask()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_mask(&m, &path).unwrap();
        let back = load_mask(&path).unwrap();
        prop_assert_eq!(back.kind(), MaskKind::Binary);
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(&load_gt_mask(&path).unwrap(), &m);
    }

    #[test]
    fn binarize_records_threshold(
        values in proptest::collection::vec(0.0f32..=1.0, 12),
        theta in 0.05f32..0.95,
    ) {
        let p = ShadowMask::probability(3, 4, values.clone()).unwrap();
        let b = p.binarize(theta);
        prop_assert_eq!(b.kind(), MaskKind::Binary);
        prop_assert_eq!(b.threshold_used(), Some(theta));
        for (v, o) in values.iter().zip(b.values()) {
            prop_assert_eq!(*o, if *v >= theta { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn config_loading_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# toy\nlst_blocks=2\nshort_window_w = 7\nlr_scratch=1e-3\n").unwrap();
    let a = load_config(&path).unwrap();
    assert_eq!(a, load_config(&path).unwrap());
    assert_eq!((a.lst_blocks, a.short_window_w, a.lr_scratch), (2, 7, 1e-3));
}
