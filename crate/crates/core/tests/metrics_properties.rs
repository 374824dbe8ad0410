mod support {
    pub mod ap_oracle;
}

use proptest::prelude::*;
use support::ap_oracle::{brute_force_ap, random_instance};
use tfnet_core::metrics::{average_precision, frame_map};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_equals_threshold_enumeration(seed in any::<u64>()) {
        let (dets, gts) = random_instance(seed, 3, 10, 50);
        for c in 0..3 {
            prop_assert_eq!(average_precision(&dets, &gts, c, 0.5), brute_force_ap(&dets, &gts, c, 0.5));
        }
    }

    #[test]
    fn ap_in_unit_interval_and_rank_only(seed in any::<u64>()) {
        let (dets, gts) = random_instance(seed, 2, 8, 30);
        let mut warped = dets.clone();
        for d in &mut warped {
            d.score = (d.score * 3.0).exp() / 100.0;
        }
        for c in 0..2 {
            let a = average_precision(&dets, &gts, c, 0.5);
            if let Some(v) = a {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(a, average_precision(&warped, &gts, c, 0.5));
        }
    }

    #[test]
    fn map_invariant_under_class_relabeling(seed in any::<u64>()) {
        let (mut dets, mut gts) = random_instance(seed, 3, 10, 30);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let Ok(before) = frame_map(&dets, &gts, &names, 0.5) else { return Ok(()); };
        let perm = [2usize, 0, 1];
        for d in &mut dets {
            d.class_id = perm[d.class_id];
        }
        for b in gts.iter_mut().flat_map(|g| &mut g.boxes) {
            b.class_id = perm[b.class_id];
        }
        let after = frame_map(&dets, &gts, &names, 0.5).unwrap();
        prop_assert!((before.map - after.map).abs() < 1e-12);
    }
}
