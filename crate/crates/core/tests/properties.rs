use ngebm::attacks::{project, Norm};
use ngebm::data::{Batches, Dataset, Split};
use ngebm::energy::{energy_values, max_softmax_score, softmax_probs};
use ngebm::metrics::{auroc, ece, histogram};
use ngebm::nn::LrSchedule;
use ngebm::Tensor;
use proptest::prelude::*;

fn scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-50i32..50).prop_map(|v| v as f64 / 10.0), 1..n)
}

proptest! {
    #[test]
    fn auroc_is_antisymmetric(a in scores(40), b in scores(40)) {
        let ab = auroc(&a, &b).unwrap().auroc;
        let ba = auroc(&b, &a).unwrap().auroc;
        prop_assert!((ab + ba - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(a in scores(40), b in scores(40)) {
        let f = |v: &f64| (v * 0.7).exp() + 3.0;
        let raw = auroc(&a, &b).unwrap().auroc;
        let mapped = auroc(&a.iter().map(f).collect::<Vec<_>>(), &b.iter().map(f).collect::<Vec<_>>()).unwrap().auroc;
        prop_assert!((raw - mapped).abs() < 1e-12);
    }

    #[test]
    fn ece_is_permutation_invariant_and_bounded(
        pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..120),
        bins in 1usize..25,
        rot in 0usize..120,
    ) {
        let (c, y): (Vec<f64>, Vec<bool>) = pairs.iter().cloned().unzip();
        let base = ece(&c, &y, bins).unwrap();
        let k = rot % c.len();
        let mut c2 = c.clone();
        let mut y2 = y.clone();
        c2.rotate_left(k);
        y2.rotate_left(k);
        let rotated = ece(&c2, &y2, bins).unwrap();
        prop_assert!((base.ece - rotated.ece).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base.ece));
        prop_assert_eq!(base.total(), c.len());
        prop_assert!((base.recompute() - base.ece).abs() < 1e-15);
    }

    #[test]
    fn energy_and_softmax_identities(
        logits in prop::collection::vec(-30.0f64..30.0, 1..8),
        c in -100.0f64..100.0,
    ) {
        let k = logits.len();
        let l = Tensor::new(vec![1, k], logits.clone()).unwrap();
        let shifted = l.map(|v| v + c);
        let e = energy_values(&l).unwrap()[0];
        prop_assert!((energy_values(&shifted).unwrap()[0] - (e - c)).abs() < 1e-10);
        let p = softmax_probs(&l).unwrap();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let arg = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        prop_assert_eq!(arg(p.data()), arg(&logits));
        prop_assert!((max_softmax_score(&shifted).unwrap()[0] - max_softmax_score(&l).unwrap()[0]).abs() < 1e-12);
        for (y, &fy) in logits.iter().enumerate() {
            prop_assert!((p.data()[y] - (fy + e).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn lr_schedule_never_increases(mut ms in prop::collection::btree_set(1usize..200, 0..5), epoch in 0usize..250) {
        let s = LrSchedule { base: 1e-3, milestones: std::mem::take(&mut ms).into_iter().collect(), factor: 0.1 };
        prop_assert!(s.lr_at(epoch + 1) <= s.lr_at(epoch));
    }

    #[test]
    fn projection_lands_in_ball(v in prop::collection::vec(-5.0f64..5.0, 1..10), eps in 0.0f64..3.0) {
        for norm in [Norm::L2, Norm::Linf] {
            let mut d = v.clone();
            project(&mut d, norm, eps);
            prop_assert!(norm.of(&d) <= eps * (1.0 + 1e-12));
            let mut again = d.clone();
            project(&mut again, norm, eps);
            for (a, b) in again.iter().zip(&d) {
                prop_assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn batches_partition_each_epoch(n in 1usize..60, bs in 1usize..20, seed in any::<u64>(), epoch in 0usize..5) {
        let ds = Dataset::new(Tensor::zeros(vec![n, 1]), vec![0; n], 1, Split::Train, "zeros").unwrap();
        let batches = Batches::new(&ds, bs, seed).unwrap();
        let mut seen: Vec<usize> = batches.epoch(epoch).flat_map(|(b, _)| b.indices).collect();
        prop_assert_eq!(batches.order(epoch), batches.order(epoch));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batches.epoch(epoch).count(), batches.batches_per_epoch());
    }

    #[test]
    fn histogram_density_integrates_to_one(v in prop::collection::vec(-10.0f64..10.0, 1..200), bins in 1usize..40) {
        let h = histogram(&v, bins, None).unwrap();
        prop_assert!((h.integral() - 1.0).abs() < 1e-9);
        prop_assert_eq!(h.counts.iter().sum::<usize>(), v.len());
    }
}
