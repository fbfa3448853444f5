mod common;

use pointunet::saliency::SaliencyMap;
use pointunet::sampling::*;
use pointunet::volume::{flat_index, generate_phantom, voxel_count, LabelVolume, PhantomSpec, Volume};
use pointunet::Error;
use proptest::prelude::*;

fn ramp_volume(dims: [usize; 3]) -> Volume {
    let n = voxel_count(dims);
    Volume::new(2, dims, [1.0; 3], (0..2 * n).map(|i| i as f64).collect()).unwrap()
}

#[test]
fn five_salient_voxels_in_four_cubed() {
    let vol = ramp_volume([4, 4, 4]);
    let salient = [0usize, 7, 21, 42, 63];
    let prob: Vec<f64> = (0..64).map(|v| if salient.contains(&v) { 0.95 } else { 0.3 }).collect();
    let sal = SaliencyMap::new([4, 4, 4], prob).unwrap();
    let cfg = SamplerConfig { threshold: 0.9, points: 16, seed: 9 };
    let pc = context_aware_sample(&vol, &sal, &cfg).unwrap();
    assert_eq!(pc.len(), 16);
    assert_eq!(pc.foreground_count(), 5);
    let idx = pc.voxel_indices();
    assert_eq!(&idx[..5], &salient);
    let mut sorted = idx.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 16);
    assert!(idx[5..].iter().all(|v| !salient.contains(v)));
}

#[test]
fn degenerate_saliency() {
    let vol = ramp_volume([4, 4, 4]);
    let zero = SaliencyMap::new([4, 4, 4], vec![0.0; 64]).unwrap();
    let pc = context_aware_sample(&vol, &zero, &SamplerConfig { points: 10, ..SamplerConfig::default() }).unwrap();
    assert_eq!((pc.len(), pc.foreground_count()), (10, 0));
    let one = SaliencyMap::new([4, 4, 4], vec![1.0; 64]).unwrap();
    let pc = context_aware_sample(&vol, &one, &SamplerConfig { points: 64, ..SamplerConfig::default() }).unwrap();
    assert_eq!(pc.voxel_indices(), (0..64).collect::<Vec<_>>());
    assert_eq!(pc.foreground_count(), 64);
}

#[test]
fn overflow_and_budget_errors() {
    let vol = ramp_volume([4, 4, 4]);
    let one = SaliencyMap::new([4, 4, 4], vec![1.0; 64]).unwrap();
    let err = context_aware_sample(&vol, &one, &SamplerConfig { points: 10, ..SamplerConfig::default() }).unwrap_err();
    assert!(matches!(err, Error::ForegroundOverflow { fg: 64, budget: 10 }));
    assert!(random_sample(&vol, &SamplerConfig { points: 65, ..SamplerConfig::default() }).is_err());
    for threshold in [0.0, 1.0, -0.5] {
        assert!(SamplerConfig { threshold, ..SamplerConfig::default() }.validate().is_err());
    }
}

#[test]
fn random_sampling_examples() {
    let vol = ramp_volume([4, 4, 4]);
    let all = random_sample(&vol, &SamplerConfig { points: 64, ..SamplerConfig::default() }).unwrap();
    assert_eq!(all.voxel_indices(), (0..64).collect::<Vec<_>>());
    assert!(all.origin().iter().all(|&o| o == Origin::Background));
    let cfg = SamplerConfig { points: 20, seed: 3, ..SamplerConfig::default() };
    assert_eq!(random_sample(&vol, &cfg).unwrap(), random_sample(&vol, &cfg).unwrap());
}

#[test]
fn single_point_draws_are_uniform() {
    let vol = ramp_volume([4, 4, 4]);
    let draws = 10_000;
    let mut counts = [0usize; 64];
    for seed in 0..draws {
        let pc = random_sample(&vol, &SamplerConfig { points: 1, seed, ..SamplerConfig::default() }).unwrap();
        counts[pc.voxel_indices()[0]] += 1;
    }
    let p = 1.0 / 64.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (v, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma + 1.0, "voxel {v}: {c} vs {mean}");
    }
}

#[test]
fn random_passes_are_disjoint_and_cover() {
    let vol = ramp_volume([4, 4, 4]);
    let cfg = SamplerConfig { points: 15, seed: 1, ..SamplerConfig::default() };
    let passes = random_passes(&vol, &cfg, 10).unwrap();
    assert_eq!(passes.len(), 5);
    assert_eq!(passes[0], random_sample(&vol, &cfg).unwrap());
    let mut all: Vec<usize> = passes.iter().flat_map(|p| p.voxel_indices()).collect();
    assert_eq!(all.len(), 64);
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 64);
    let mut union = std::collections::HashSet::new();
    let mut coverage = vec![];
    for p in &passes {
        union.extend(p.voxel_indices());
        coverage.push(union.len());
    }
    assert!(coverage.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(coverage, vec![15, 30, 45, 60, 64]);
}

#[test]
fn fuse_examples() {
    let dims = [4, 4, 4];
    let pc = PointCloud::new(dims, vec![[1, 1, 1]], 1, vec![0.0], Some(vec![2]), vec![Origin::Foreground]).unwrap();
    let fused = fuse_to_volume(&pc, 3, FusePolicy::ForegroundOnly).unwrap();
    let mut want = vec![0u8; 64];
    want[flat_index(dims, [1, 1, 1])] = 2;
    assert_eq!(fused, LabelVolume::new(dims, 3, want).unwrap());

    let coords = vec![[0, 0, 0], [3, 3, 3], [2, 1, 0]];
    let origin = vec![Origin::Foreground, Origin::Background, Origin::Foreground];
    let zeros = PointCloud::new(dims, coords.clone(), 0, vec![], Some(vec![0; 3]), origin.clone()).unwrap();
    assert_eq!(fuse_to_volume(&zeros, 3, FusePolicy::ForegroundOnly).unwrap(), LabelVolume::zeros(dims, 3));

    let bg_label = PointCloud::new(dims, coords, 0, vec![], Some(vec![1, 2, 1]), origin).unwrap();
    let fg_only = fuse_to_volume(&bg_label, 3, FusePolicy::ForegroundOnly).unwrap();
    assert_eq!(fg_only.get(flat_index(dims, [3, 3, 3])), 0);
    let all = fuse_to_volume(&bg_label, 3, FusePolicy::AllPoints).unwrap();
    assert_eq!(all.get(flat_index(dims, [3, 3, 3])), 2);

    let unlabeled = PointCloud::new(dims, vec![[0, 0, 0]], 0, vec![], None, vec![Origin::Foreground]).unwrap();
    assert!(fuse_to_volume(&unlabeled, 3, FusePolicy::ForegroundOnly).is_err());
    assert!(PointCloud::new(dims, vec![[0, 0, 0], [0, 0, 0]], 0, vec![], None, vec![Origin::Foreground; 2]).is_err());
}

#[test]
fn ground_truth_saliency_round_trips_labels() {
    for seed in 0..5 {
        let p = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
        let sal = SaliencyMap::from_mask(&p.labels);
        let cfg = SamplerConfig { threshold: 0.5, points: 4096, seed };
        let pc = context_aware_sample(&p.volume, &sal, &cfg).unwrap().with_labels(&p.labels).unwrap();
        let fused = fuse_to_volume(&pc, 4, FusePolicy::ForegroundOnly).unwrap();
        assert_eq!(fused, p.labels);
    }
}

#[test]
fn first_pass_wins_when_fusing_many() {
    let dims = [2, 1, 1];
    let a = PointCloud::new(dims, vec![[0, 0, 0]], 0, vec![], Some(vec![1]), vec![Origin::Background]).unwrap();
    let b = PointCloud::new(dims, vec![[0, 0, 0], [1, 0, 0]], 0, vec![], Some(vec![2, 2]), vec![Origin::Background; 2]).unwrap();
    let fused = fuse_many(&[a, b], 3, FusePolicy::AllPoints).unwrap();
    assert_eq!(fused.labels(), &[1, 2]);
}

#[test]
fn deterministic_per_seed() {
    let p = generate_phantom(&PhantomSpec::default()).unwrap();
    let sal = SaliencyMap::from_mask(&p.labels);
    let cfg = SamplerConfig { threshold: 0.5, points: 3000, seed: 17 };
    let a = context_aware_sample(&p.volume, &sal, &cfg).unwrap();
    let b = context_aware_sample(&p.volume, &sal, &cfg).unwrap();
    assert_eq!(point_cloud_bytes(&a), point_cloud_bytes(&b));
    let c = context_aware_sample(&p.volume, &sal, &SamplerConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sampler_invariants(seed in any::<u64>()) {
        common::check_sampler_instance(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn file_round_trip(seed in any::<u64>(), points in 1usize..60) {
        let vol = ramp_volume([3, 4, 5]);
        let pc = random_sample(&vol, &SamplerConfig { points, seed, ..SamplerConfig::default() }).unwrap();
        let labels = (0..pc.len()).map(|i| (i % 3) as u8).collect();
        let mut labeled = pc.clone();
        labeled.set_labels(labels).unwrap();
        for cloud in [pc, labeled] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.ppc");
            write_point_cloud(&path, &cloud).unwrap();
            prop_assert_eq!(read_point_cloud(&path).unwrap(), cloud);
        }
    }
}
