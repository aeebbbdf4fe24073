use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn entry(rng: &mut impl Rng, d: usize, p: usize, identity: usize, camera: usize) -> GalleryEntry {
    let mut v = || (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
    let cls_feature = v();
    let part_features = (0..p).map(|_| v()).collect();
    GalleryEntry {
        cls_feature,
        part_features,
        visibility: (0..p).map(|_| rng.gen_range(0.01f32..0.99)).collect(),
        identity,
        camera,
    }
}

/// Rank of each positive by counting entries that precede it.
fn oracle(dist: &[Vec<f64>], q: &[Label], g: &[Label], k: usize) -> (f64, Vec<f64>, usize) {
    let (mut aps, mut firsts, mut skipped) = (vec![], vec![], 0);
    for (qi, ql) in q.iter().enumerate() {
        let valid = |j: usize| !(g[j].identity == ql.identity && g[j].camera == ql.camera);
        let before = |a: usize, b: usize| dist[qi][a] < dist[qi][b] || (dist[qi][a] == dist[qi][b] && a < b);
        let pos: Vec<usize> = (0..g.len()).filter(|&j| valid(j) && g[j].identity == ql.identity).collect();
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        let mut precisions = vec![];
        let mut best = usize::MAX;
        for &j in &pos {
            let rank = (0..g.len()).filter(|&i| valid(i) && before(i, j)).count() + 1;
            let pos_at_or_before = pos.iter().filter(|&&i| i == j || before(i, j)).count();
            precisions.push(pos_at_or_before as f64 / rank as f64);
            best = best.min(rank);
        }
        aps.push(precisions.iter().sum::<f64>() / pos.len() as f64);
        firsts.push(best);
    }
    let n = aps.len().max(1) as f64;
    let cmc = (1..=k).map(|r| firsts.iter().filter(|&&f| f <= r).count() as f64 / n).collect();
    (aps.iter().sum::<f64>() / n, cmc, skipped)
}

#[test]
fn hand_computed_average_precision() {
    // ranked [neg, pos, pos]
    let dist = vec![vec![0.1, 0.2, 0.3]];
    let q = [Label { identity: 0, camera: 0 }];
    let g = [
        Label { identity: 1, camera: 1 },
        Label { identity: 0, camera: 1 },
        Label { identity: 0, camera: 1 },
    ];
    let r = evaluate_distances(&dist, &q, &g, 3).unwrap();
    assert!((r.map - 7.0 / 12.0).abs() < 1e-12);
    assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
}

#[test]
fn same_camera_positives_are_skipped() {
    let dist = vec![vec![0.1, 0.2], vec![0.1, 0.2]];
    let q = [Label { identity: 0, camera: 0 }, Label { identity: 2, camera: 0 }];
    let g = [Label { identity: 0, camera: 0 }, Label { identity: 1, camera: 1 }];
    let r = evaluate_distances(&dist, &q, &g, 1).unwrap();
    assert_eq!(r.skipped_queries, 2);
    assert_eq!(r.per_query_ap, vec![None, None]);
    assert!(evaluate_distances(&[], &[], &g, 1).is_err());
}

#[test]
fn copies_at_other_cameras_are_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let queries: Vec<_> = (0..6).map(|i| entry(&mut rng, 8, 3, i, 0)).collect();
    let gallery: Vec<_> = queries.iter().map(|q| GalleryEntry { camera: 1, ..q.clone() }).collect();
    let r = evaluate(&queries, &gallery, VisibilityMode::AsIs, 5).unwrap();
    assert_eq!((r.map, r.rank1()), (1.0, 1.0));
}

#[test]
fn all_visible_reduces_to_cls_plus_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut a = entry(&mut rng, 6, 4, 0, 0);
    let mut b = entry(&mut rng, 6, 4, 1, 1);
    a.visibility = vec![1.0; 4];
    b.visibility = vec![1.0; 4];
    let mean = (0..4)
        .map(|p| normalized_euclidean(&a.part_features[p], &b.part_features[p]))
        .sum::<f64>()
        / 4.0;
    let expect = normalized_euclidean(&a.cls_feature, &b.cls_feature) + mean;
    assert!((pair_distance(&a, &b, VisibilityMode::AsIs) - expect).abs() < 1e-12);
    assert_eq!(pair_distance(&a, &a, VisibilityMode::AsIs), 0.0);
}

#[test]
fn zero_weight_part_drops_from_both_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut a = entry(&mut rng, 5, 3, 0, 0);
    let b = entry(&mut rng, 5, 3, 1, 1);
    a.visibility[1] = 0.0;
    let w: Vec<f64> = (0..3).map(|p| a.visibility[p] as f64 * b.visibility[p] as f64).collect();
    let dp: Vec<f64> = (0..3)
        .map(|p| normalized_euclidean(&a.part_features[p], &b.part_features[p]))
        .collect();
    let expect = normalized_euclidean(&a.cls_feature, &b.cls_feature)
        + (w[0] * dp[0] + w[2] * dp[2]) / (w[0] + w[2]);
    assert!((pair_distance(&a, &b, VisibilityMode::AsIs) - expect).abs() < 1e-12);
}

#[test]
fn no_covisible_part_falls_back_to_cls() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut a = entry(&mut rng, 5, 3, 0, 0);
    let mut b = entry(&mut rng, 5, 3, 1, 1);
    a.visibility = vec![1.0, 0.0, 1e-4];
    b.visibility = vec![0.0, 1.0, 1e-4];
    let d_cls = normalized_euclidean(&a.cls_feature, &b.cls_feature);
    assert_eq!(pair_distance(&a, &b, VisibilityMode::AsIs), d_cls);
    assert_eq!(pair_distance(&a, &b, VisibilityMode::ROUND), d_cls);
    assert!(pair_distance(&a, &b, VisibilityMode::Off) > d_cls);
}

#[test]
fn off_mode_equals_forcing_visibility_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q: Vec<_> = (0..5).map(|i| entry(&mut rng, 6, 3, i % 3, 0)).collect();
    let g: Vec<_> = (0..9).map(|i| entry(&mut rng, 6, 3, i % 3, 1)).collect();
    let ones = |v: &[GalleryEntry]| -> Vec<GalleryEntry> {
        v.iter().map(|e| GalleryEntry { visibility: vec![1.0; 3], ..e.clone() }).collect()
    };
    let off = evaluate(&q, &g, VisibilityMode::Off, 5).unwrap();
    let forced = evaluate(&ones(&q), &ones(&g), VisibilityMode::AsIs, 5).unwrap();
    assert_eq!(off, forced);
    let ab = ablate_visibility(&q, &g, 5).unwrap();
    assert_eq!(ab.iter().map(|(m, _)| m.name()).collect::<Vec<_>>(), ["as-is", "off", "round"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluate_matches_brute_force(seed in 0u64..10_000, nq in 1usize..6, ng in 1usize..15, coarse in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<Label> = (0..nq).map(|_| Label { identity: rng.gen_range(0..4), camera: rng.gen_range(0..2) }).collect();
        let g: Vec<Label> = (0..ng).map(|_| Label { identity: rng.gen_range(0..4), camera: rng.gen_range(0..2) }).collect();
        // coarse distances force ties
        let dist: Vec<Vec<f64>> = (0..nq)
            .map(|_| (0..ng).map(|_| if coarse { rng.gen_range(0..3) as f64 } else { rng.gen() }).collect())
            .collect();
        let r = evaluate_distances(&dist, &q, &g, 5).unwrap();
        let (map, cmc, skipped) = oracle(&dist, &q, &g, 5);
        prop_assert!((r.map - map).abs() < 1e-12);
        prop_assert_eq!(&r.cmc, &cmc);
        prop_assert_eq!(r.skipped_queries, skipped);
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&r.map));
        // shifting every distance keeps the ranking
        let shifted: Vec<Vec<f64>> = dist.iter().map(|row| row.iter().map(|d| d + 3.0).collect()).collect();
        prop_assert_eq!(evaluate_distances(&shifted, &q, &g, 5).unwrap(), r);
    }

    #[test]
    fn distance_symmetry_and_scale_invariance(seed in 0u64..10_000, scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = entry(&mut rng, 8, 4, 0, 0);
        let b = entry(&mut rng, 8, 4, 1, 1);
        for mode in [VisibilityMode::AsIs, VisibilityMode::Off, VisibilityMode::ROUND] {
            prop_assert_eq!(pair_distance(&a, &b, mode), pair_distance(&b, &a, mode));
        }
        let s = |e: &GalleryEntry| GalleryEntry { visibility: e.visibility.iter().map(|v| v * scale).collect(), ..e.clone() };
        let d0 = pair_distance(&a, &b, VisibilityMode::AsIs);
        let d1 = pair_distance(&s(&a), &s(&b), VisibilityMode::AsIs);
        prop_assert!((d0 - d1).abs() <= 1e-6 * d0.max(1.0));
    }
}
