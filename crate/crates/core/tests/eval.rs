mod support;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbseg::eval::{boundary_f1, confusion, iop, miou};
use sbseg::image::LabelMap;
use support::{brute_force_iou, random_labels};

#[test]
fn miou_matches_brute_force_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for pair in 0..50 {
        let truth = random_labels(&mut rng, 9, 7, 4);
        let pred = random_labels(&mut rng, 9, 7, 4);
        let report = miou(std::slice::from_ref(&pred), std::slice::from_ref(&truth), 5).unwrap();
        let expected = brute_force_iou(&[pred], &[truth], 5);
        assert_eq!(report.per_class_iou, expected, "pair {pair}");
        let present: Vec<f64> = expected.iter().flatten().copied().collect();
        assert_eq!(report.miou, present.iter().sum::<f64>() / present.len() as f64);
    }
}

#[test]
fn iop_of_quarter_class() {
    let labels = LabelMap::from_fn(4, 4, |x, y| (x < 2 && y < 2) as u32);
    assert_eq!(iop(&[labels], 2, false).unwrap(), vec![None, Some(0.25)]);
}

fn pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (3usize..10, 3usize..10).prop_flat_map(|(w, h)| {
        let map = move || proptest::collection::vec(0u32..4, w * h).prop_map(move |d| LabelMap::new(w, h, d).unwrap());
        (map(), map())
    })
}

proptest! {
    #[test]
    fn confusion_total_is_pixel_count((p, t) in pair()) {
        let m = confusion(std::slice::from_ref(&p), std::slice::from_ref(&t), 4).unwrap();
        prop_assert_eq!(m.total(), p.data.len() as u64);
    }

    #[test]
    fn class_permutation_permutes_iou((p, t) in pair(), perm in Just([0u32, 1, 2, 3]).prop_shuffle()) {
        let relabel = |m: &LabelMap| LabelMap::new(m.width, m.height, m.data.iter().map(|&l| perm[l as usize]).collect()).unwrap();
        let a = miou(&[p.clone()], &[t.clone()], 4).unwrap();
        let b = miou(&[relabel(&p)], &[relabel(&t)], 4).unwrap();
        for c in 0..4 {
            prop_assert_eq!(a.per_class_iou[c], b.per_class_iou[perm[c] as usize]);
        }
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
    }

    #[test]
    fn boundary_f1_is_monotone_in_tolerance((p, t) in pair()) {
        let mut last = -1.0;
        for tol in 0..4 {
            let f1 = boundary_f1(&p, &t, 4, tol).unwrap().mean.f1;
            prop_assert!(f1 >= last - 1e-12, "tolerance {} gave {} after {}", tol, f1, last);
            last = f1;
        }
    }
}
