use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salat_det::eval::{average_precision, match_detections, Interpolation, MatchMode, Verdict};
use salat_det::oracle::{perturbed_detections, random_annotation};
use salat_det::selfcheck::ap_oracle_gap;

const C: usize = 4;

fn records(dets: &[salat_det::postprocess::Detection], gt: &salat_det::dataset::ImageAnnotation, thr: f64, class: usize) -> Vec<(f64, bool)> {
    match_detections(dets, gt, thr, MatchMode::VocStandard)
        .unwrap()
        .detections
        .iter()
        .filter(|d| d.class_id == class)
        .map(|d| (d.score, d.verdict == Verdict::TruePositive))
        .collect()
}

#[test]
fn counts_partition_ground_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..500 {
        let gt = random_annotation(&mut rng, C, 6);
        let dets = perturbed_detections(&mut rng, &gt, C, 10);
        let thr = rng.gen_range(0.3..0.95);
        let mut num_gt = [0usize; C];
        let mut num_det = [0usize; C];
        gt.boxes.iter().for_each(|l| num_gt[l.class_id] += 1);
        dets.iter().for_each(|d| num_det[d.class_id] += 1);

        let v = match_detections(&dets, &gt, thr, MatchMode::VocStandard).unwrap();
        for (k, c) in v.counts_per_class(C).iter().enumerate() {
            assert_eq!(c.tp + c.fn_, num_gt[k]);
            assert_eq!(c.tp + c.fp, num_det[k]);
            assert_eq!(c.misclassified, 0);
        }
        let p = match_detections(&dets, &gt, thr, MatchMode::PaperLiteral).unwrap();
        for (k, c) in p.counts_per_class(C).iter().enumerate() {
            assert_eq!(c.tp + c.fn_ + c.misclassified, num_gt[k]);
        }
        // each ground truth is claimed at most once
        for o in [&v, &p] {
            let mut seen = vec![false; gt.boxes.len()];
            for m in o.detections.iter().filter_map(|d| d.matched_gt) {
                assert!(!seen[m]);
                seen[m] = true;
            }
        }
    }
}

#[test]
fn ap_matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut checked = 0;
    while checked < 500 {
        if let Some(gap) = ap_oracle_gap(&mut rng, 6, 4) {
            assert!(gap <= 1e-9, "gap {gap}");
            checked += 1;
        }
    }
}

#[test]
fn raising_threshold_never_raises_tp_or_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..300 {
        let gt = random_annotation(&mut rng, 1, 4);
        let dets = perturbed_detections(&mut rng, &gt, 1, 8);
        let mut last = (usize::MAX, f64::INFINITY);
        for thr in [0.5, 0.6, 0.7, 0.8, 0.9] {
            let r = records(&dets, &gt, thr, 0);
            let tp = r.iter().filter(|x| x.1).count();
            let ap = average_precision(&r, gt.boxes.len(), Interpolation::AllPoint).unwrap();
            assert!(tp <= last.0 && ap <= last.1 + 1e-12);
            last = (tp, ap);
        }
    }
}

#[test]
fn ap_invariant_under_monotone_score_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..300 {
        let gt = random_annotation(&mut rng, 1, 4);
        let dets = perturbed_detections(&mut rng, &gt, 1, 8);
        let r = records(&dets, &gt, 0.5, 0);
        let squashed: Vec<(f64, bool)> = r.iter().map(|&(s, t)| (s * s * 0.5 + 0.1, t)).collect();
        for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
            assert_eq!(
                average_precision(&r, gt.boxes.len(), interp),
                average_precision(&squashed, gt.boxes.len(), interp)
            );
        }
    }
}

#[test]
fn ap_bounded_and_pr_recall_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..300 {
        let gt = random_annotation(&mut rng, 1, 5);
        let dets = perturbed_detections(&mut rng, &gt, 1, 12);
        let r = records(&dets, &gt, 0.5, 0);
        for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
            let ap = average_precision(&r, gt.boxes.len(), interp).unwrap();
            assert!((0.0..=1.0).contains(&ap));
        }
        let curve = salat_det::eval::pr_curve(&r, gt.boxes.len());
        assert!(curve.windows(2).all(|w| w[1].recall >= w[0].recall));
    }
}
