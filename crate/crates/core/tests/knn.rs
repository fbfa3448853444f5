mod common;

use common::brute_knn;
use pointunet::knn::{build_knn, KdTree};
use pointunet::rng::seeded;
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn collinear_middle_point_takes_lower_index_on_tie() {
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
    let nbr = build_knn(&pts, 2).unwrap();
    assert_eq!(nbr.neighbors(1), &[1, 0]);
    assert_eq!(nbr.distances2(1), &[0.0, 1.0]);
}

#[test]
fn k_one_is_self() {
    let mut rng = seeded(3);
    let pts: Vec<[f64; 3]> = (0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let nbr = build_knn(&pts, 1).unwrap();
    for i in 0..pts.len() {
        assert_eq!(nbr.neighbors(i), &[i]);
    }
}

#[test]
fn random_200_points_k16_match_brute_force() {
    let mut rng = seeded(11);
    let pts: Vec<[f64; 3]> = (0..200).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let nbr = build_knn(&pts, 16).unwrap();
    let oracle = brute_knn(&pts, &pts, 16);
    for (i, want) in oracle.iter().enumerate() {
        assert_eq!(nbr.neighbors(i), want.as_slice(), "point {i}");
        assert!(nbr.distances2(i).windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn grid_ties_match_brute_force() {
    // A full lattice is the worst case for ties.
    let mut pts = Vec::new();
    for z in 0..6 {
        for y in 0..5 {
            for x in 0..7 {
                pts.push([z as f64 / 6.0, y as f64 / 5.0, x as f64 / 7.0]);
            }
        }
    }
    let nbr = build_knn(&pts, 16).unwrap();
    let oracle = brute_knn(&pts, &pts, 16);
    for (i, want) in oracle.iter().enumerate() {
        assert_eq!(nbr.neighbors(i), want.as_slice(), "point {i}");
    }
}

#[test]
fn too_few_points_or_zero_k_is_an_error() {
    let pts = [[0.0; 3], [1.0, 0.0, 0.0]];
    assert!(build_knn(&pts, 3).is_err());
    assert!(build_knn(&pts, 0).is_err());
    assert!(KdTree::new(&[]).nearest([0.0; 3]).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_brute_force_on_integer_grids(
        seed in any::<u64>(),
        n in 1usize..500,
        k in 1usize..20,
        extent in 2u32..12,
    ) {
        let mut rng = seeded(seed);
        // Small integer lattices produce many exact ties.
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [0, 1, 2].map(|_| f64::from(rng.gen_range(0..extent)) / f64::from(extent)))
            .collect();
        let queries: Vec<[f64; 3]> = (0..20).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let tree = KdTree::new(&pts);
        let oracle = brute_knn(&pts, &queries, k);
        for (q, want) in queries.iter().zip(&oracle) {
            let got: Vec<usize> = tree.k_nearest(*q, k).into_iter().map(|(_, i)| i).collect();
            prop_assert_eq!(&got, want);
        }
        let self_oracle = brute_knn(&pts, &pts, k.min(n));
        for (i, want) in self_oracle.iter().enumerate() {
            let got: Vec<usize> = tree.k_nearest(pts[i], k).into_iter().map(|(_, j)| j).collect();
            prop_assert_eq!(&got, want);
        }
    }
}
