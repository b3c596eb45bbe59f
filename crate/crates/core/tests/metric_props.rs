use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowsam_core::data_io::ShadowMask;
use shadowsam_core::metrics::{ber_family, confusion, f_beta, iou, mae};

fn pair() -> impl Strategy<Value = (ShadowMask, ShadowMask)> {
    (1usize..=24, 1usize..=24).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(0.0f32..=1.0, h * w),
            proptest::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(p, g)| {
                (ShadowMask::probability(h, w, p).unwrap(), ShadowMask::binary(h, w, g).unwrap())
            })
    })
}

fn permuted(m: &ShadowMask, perm: &[usize]) -> ShadowMask {
    let v: Vec<f32> = perm.iter().map(|&i| m.values()[i]).collect();
    let (h, w) = m.shape();
    let out = ShadowMask::probability(h, w, v).unwrap();
    if m.kind() == shadowsam_core::data_io::MaskKind::Binary {
        out.binarize(0.5)
    } else {
        out
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_invariant_under_joint_permutation((p, g) in pair(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..p.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (pp, gp) = (permuted(&p, &perm), permuted(&g, &perm));
        let c = confusion(&p.binarize(0.5), &g).unwrap();
        let cp = confusion(&pp.binarize(0.5), &gp).unwrap();
        prop_assert_eq!(c, cp);
        prop_assert!((mae(&p, &g).unwrap() - mae(&pp, &gp).unwrap()).abs() < 1e-9);
        prop_assert_eq!(f_beta(&c, 0.3), f_beta(&cp, 0.3));
        prop_assert_eq!(iou(&c), iou(&cp));
        prop_assert_eq!(ber_family(&c), ber_family(&cp));
    }

    #[test]
    fn counts_total_and_ber_identity((p, g) in pair()) {
        let c = confusion(&p.binarize(0.5), &g).unwrap();
        prop_assert_eq!(c.total() as usize, p.len());
        let b = ber_family(&c);
        if let (Some(ber), Some(s), Some(n)) = (b.ber, b.sber, b.nber) {
            prop_assert!((ber - (s + n) / 2.0).abs() <= 1e-9);
        }
    }
}
