use lammvit::lamm::update_weights;
use lammvit::losses::{bce, diversity_loss};
use lammvit::mask::{project_to_patches, region_groups, render_gaussian_masks, LandmarkSet};
use lammvit::metrics::{accuracy, average_precision, THRESHOLD};
use proptest::collection::vec;
use proptest::prelude::*;

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..48).prop_flat_map(|n| (vec(0.0f64..=1.0, n), vec(any::<bool>(), n)))
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval((scores, labels) in scored_labels()) {
        let acc = accuracy(&scores, &labels, THRESHOLD).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        if labels.contains(&true) {
            let ap = average_precision(&scores, &labels).unwrap();
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }

    #[test]
    fn perfect_ranking_has_unit_ap((scores, labels) in scored_labels()) {
        prop_assume!(labels.contains(&true));
        let ideal: Vec<f64> = labels.iter().zip(&scores).map(|(&l, s)| if l { 2.0 + s } else { *s }).collect();
        prop_assert_eq!(average_precision(&ideal, &labels).unwrap(), 1.0);
    }

    #[test]
    fn bce_is_nonnegative((scores, labels) in scored_labels()) {
        let p: Vec<f64> = scores.iter().map(|s| s.clamp(1e-6, 1.0 - 1e-6)).collect();
        prop_assert!(bce(&p, &labels).unwrap() >= 0.0);
    }

    #[test]
    fn diversity_is_bounded_and_scale_invariant(
        w in (2usize..6).prop_flat_map(|n| vec(vec(vec(0.05f64..1.0, 4), n), 1..4)),
        scale in 0.1f64..10.0,
    ) {
        let d = diversity_loss(&w).unwrap();
        prop_assert!((-1.0..=1.0).contains(&d));
        let scaled: Vec<Vec<Vec<f64>>> = w.iter().map(|l| l.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect()).collect();
        prop_assert!((diversity_loss(&scaled).unwrap() - d).abs() <= 1e-12);
    }

    #[test]
    fn convex_recurrence_stays_within_hull(
        pairs in vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..16),
    ) {
        let alpha: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let gamma: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let beta: Vec<f64> = gamma.iter().map(|g| 1.0 - g).collect();
        let prev: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        for (i, w) in update_weights(&alpha, &gamma, &beta, &prev).into_iter().enumerate() {
            prop_assert!(w >= alpha[i].min(prev[i]) - 1e-15 && w <= alpha[i].max(prev[i]) + 1e-15);
        }
    }

    #[test]
    fn patch_masks_are_bounded(points in vec((0.0f64..63.0, 0.0f64..63.0), 68)) {
        let lm = LandmarkSet::new(points, 64, 64).unwrap();
        let stack = render_gaussian_masks(&lm, &region_groups(), 0.25);
        let patches = project_to_patches(&stack, 16).unwrap();
        prop_assert!(patches.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
