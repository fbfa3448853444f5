mod common;

use common::{brute_knn, gradcheck, random_tensor};
use pointunet::knn::build_knn;
use pointunet::pointseg::*;
use pointunet::rng::seeded;
use pointunet::saliency::SaliencyMap;
use pointunet::sampling::{context_aware_sample, Origin, PointCloud, SamplerConfig};
use pointunet::tensor::{Graph, Tensor, LEAKY_SLOPE};
use pointunet::train::TrainConfig;
use pointunet::volume::{generate_phantom, PhantomSpec};
use rand::seq::SliceRandom;
use rand::Rng as _;

fn small_config() -> PointSegConfig {
    PointSegConfig {
        k: 4,
        widths: vec![8, 16],
        ratios: vec![4, 4],
        stem_width: 4,
        head_widths: [8, 8],
        ..PointSegConfig::default()
    }
}

/// Cloud of `n` distinct random voxels in a `dims` grid with random features.
fn random_cloud(n: usize, dims: [usize; 3], features: usize, seed: u64) -> PointCloud {
    let mut rng = seeded(seed);
    let total = dims.iter().product();
    let voxels = rand::seq::index::sample(&mut rng, total, n).into_vec();
    let coords = voxels.iter().map(|&v| [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]]).collect();
    let feats = (0..n * features).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..4u8)).collect();
    PointCloud::new(dims, coords, features, feats, Some(labels), vec![Origin::Background; n]).unwrap()
}

fn zero_params(net: &mut PointSegNet, keep: impl Fn(&str) -> bool) {
    let store = net.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !keep(store.name(id)) {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

#[test]
fn gdl_hand_examples() {
    let truth = [1.0, 0.0, 0.0, 1.0];
    let p = ClassProbabilities::new(2, vec![0.8, 0.2, 0.4, 0.6]).unwrap();
    assert!((gdl_loss(&p, &truth, false).unwrap() - 0.3).abs() < 1e-12);
    let exact = ClassProbabilities::new(2, truth.to_vec()).unwrap();
    assert_eq!(gdl_loss(&exact, &truth, false).unwrap(), 0.0);
    let wrong = ClassProbabilities::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(gdl_loss(&wrong, &truth, false).unwrap(), 1.0);
    assert!(gdl_loss(&p, &[1.0, 1.0, 0.0, 1.0], false).is_err());
    assert!(gdl_loss(&p, &[0.5, 0.5, 0.0, 1.0], false).is_err());
}

#[test]
fn gdl_graph_agrees_with_direct_formula() {
    let mut rng = seeded(4);
    for squared in [false, true] {
        let labels: Vec<u8> = (0..30).map(|_| rng.gen_range(0..3u8)).collect();
        let raw: Vec<f64> = (0..90).map(|_| rng.gen_range(0.01..1.0)).collect();
        let data: Vec<f64> = raw.chunks(3).flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        }).collect();
        let probs = ClassProbabilities::new(3, data.clone()).unwrap();
        let truth = one_hot(&labels, 3).unwrap();
        let direct = gdl_loss(&probs, truth.data(), squared).unwrap();
        let mut g = Graph::inference();
        let p = g.constant(Tensor::from_vec(vec![30, 3], data).unwrap());
        let l = gdl_graph(&mut g, p, &labels, squared).unwrap();
        assert!((g.value(l).item() - direct).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&direct));
    }
}

#[test]
fn gdl_ignores_absent_classes() {
    // Class 2 never occurs; its predicted mass must not change the loss.
    let truth = one_hot(&[0, 1], 3).unwrap();
    let a = ClassProbabilities::new(3, vec![0.8, 0.2, 0.0, 0.4, 0.6, 0.0]).unwrap();
    let b = ClassProbabilities::new(3, vec![0.6, 0.2, 0.2, 0.4, 0.4, 0.2]).unwrap();
    let la = gdl_loss(&a, truth.data(), false).unwrap();
    let lb = gdl_loss(&b, truth.data(), false).unwrap();
    assert!((la - 0.3).abs() < 1e-12);
    assert!(lb > la);
}

#[test]
fn gdl_and_cross_entropy_gradients_match_finite_differences() {
    let labels = [0u8, 2, 1, 1, 0, 2, 2];
    let mut rng = seeded(9);
    let logits = random_tensor(&[7, 3], &mut rng, -2.0, 2.0);
    for squared in [false, true] {
        let f = move |g: &mut Graph, v: &[pointunet::tensor::Var]| {
            let p = g.softmax(v[0], 1)?;
            gdl_graph(g, p, &labels, squared)
        };
        assert!(gradcheck(&f, &[logits.clone()]) < 1e-6);
    }
    let ce = |g: &mut Graph, v: &[pointunet::tensor::Var]| cross_entropy_graph(g, v[0], &labels);
    assert!(gradcheck(&ce, &[logits]) < 1e-6);
}

#[test]
fn attentive_pool_examples() {
    let mut g = Graph::inference();
    // K = 1: the single neighbour passes through.
    let f = g.constant(Tensor::from_vec(vec![2, 1, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
    let w = g.constant(random_tensor(&[3, 3], &mut seeded(1), -1.0, 1.0));
    let out = attentive_pool(&mut g, f, w).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]);
    // Identical neighbours: output equals the shared feature.
    let same = g.constant(Tensor::from_vec(vec![1, 3, 2], vec![0.7, -1.5, 0.7, -1.5, 0.7, -1.5]).unwrap());
    let w2 = g.constant(random_tensor(&[2, 2], &mut seeded(2), -3.0, 3.0));
    let out = attentive_pool(&mut g, same, w2).unwrap();
    for (a, b) in g.value(out).data().iter().zip([0.7, -1.5]) {
        assert!((a - b).abs() < 1e-12);
    }
    // Zero scores, K = 2: plain mean.
    let two = g.constant(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 4.0, 3.0, -2.0]).unwrap());
    let zero = g.constant(Tensor::zeros(&[2, 2]));
    let out = attentive_pool(&mut g, two, zero).unwrap();
    assert_eq!(g.value(out).data(), &[2.0, 1.0]);
    let empty = g.constant(Tensor::zeros(&[2, 0, 2]));
    assert!(attentive_pool(&mut g, empty, zero).is_err());
}

#[test]
fn local_spatial_encoding_layout() {
    let pc = random_cloud(40, [8, 8, 8], 3, 5);
    let pos = pc.normalized_coords();
    let knn = build_knn(&pos, 5).unwrap();
    let feats = Tensor::from_vec(vec![40, 3], pc.feats().to_vec()).unwrap();
    let enc = local_spatial_encoding(&pos, &knn, &feats).unwrap();
    assert_eq!(enc.shape(), &[40, 5, GEO_CHANNELS + 3]);
    let row = |i: usize, k: usize| &enc.data()[(i * 5 + k) * 13..(i * 5 + k + 1) * 13];
    for i in 0..40 {
        // The first neighbour is the point itself.
        let r = row(i, 0);
        assert_eq!(&r[6..10], &[0.0; 4]);
        assert_eq!(&r[10..], &pc.feats()[i * 3..i * 3 + 3]);
    }
    // Translating every position leaves the relative channels unchanged.
    let shifted: Vec<[f64; 3]> = pos.iter().map(|p| [p[0] + 3.0, p[1] - 1.0, p[2] + 0.5]).collect();
    let enc2 = local_spatial_encoding(&shifted, &knn, &feats).unwrap();
    for (a, b) in enc.data().chunks(13).zip(enc2.data().chunks(13)) {
        for c in 6..13 {
            assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }
    let bad = Tensor::zeros(&[39, 3]);
    assert!(local_spatial_encoding(&pos, &knn, &bad).is_err());
}

#[test]
fn output_rows_are_distributions() {
    let net = PointSegNet::new(small_config(), 1).unwrap();
    let pc = random_cloud(300, [16, 16, 16], 4, 2);
    let probs = net.predict(&pc).unwrap();
    assert_eq!(probs.len(), 300);
    for i in 0..probs.len() {
        let row = probs.row(i);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
    }
    assert!(ClassProbabilities::new(probs.num_classes(), probs.data().to_vec()).is_ok());
}

#[test]
fn zeroed_final_layer_gives_uniform_rows() {
    let cfg = PointSegConfig { num_classes: 2, ..small_config() };
    let mut net = PointSegNet::new(cfg, 3).unwrap();
    zero_params(&mut net, |name| !name.starts_with("head2"));
    let probs = net.predict(&random_cloud(100, [10, 10, 10], 4, 3)).unwrap();
    assert!(probs.data().iter().all(|&p| p == 0.5));
}

#[test]
fn chunked_inference_matches_single_pass() {
    let pc = random_cloud(500, [16, 16, 16], 4, 7);
    let whole = PointSegNet::new(PointSegConfig { chunk: 10_000, ..small_config() }, 4).unwrap();
    let chunked = PointSegNet::new(PointSegConfig { chunk: 37, ..small_config() }, 4).unwrap();
    let a = whole.predict(&pc).unwrap();
    let b = chunked.predict(&pc).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn permuting_points_permutes_outputs() {
    // Sparse points in a large grid, with dims chosen so distances rarely tie;
    // the check below makes sure no K-boundary tie remains.
    let cfg = PointSegConfig { k: 6, ..small_config() };
    let mut seed = 0;
    let pc = loop {
        let pc = random_cloud(200, [61, 53, 47], 4, 100 + seed);
        let pos = pc.normalized_coords();
        let order = brute_knn(&pos, &pos, pos.len());
        let d2 = |i: usize, j: usize| (0..3).map(|a| (pos[i][a] - pos[j][a]).powi(2)).sum::<f64>();
        let tie_free = order.iter().enumerate().all(|(i, o)| o.windows(2).take(cfg.k).all(|w| d2(i, w[0]) < d2(i, w[1])));
        if tie_free {
            break pc;
        }
        seed += 1;
    };
    let net = PointSegNet::new(cfg, 5).unwrap();
    let base = net.predict(&pc).unwrap();
    let mut perm: Vec<usize> = (0..pc.len()).collect();
    perm.shuffle(&mut seeded(6));
    let permuted = pc.select(&perm).unwrap();
    let out = net.predict(&permuted).unwrap();
    for (new_row, &old_row) in perm.iter().enumerate() {
        for (a, b) in out.row(new_row).iter().zip(base.row(old_row)) {
            assert!((a - b).abs() < 1e-12, "row {new_row}");
        }
    }
}

#[test]
fn ratio_one_keeps_every_point_in_order() {
    let cfg = PointSegConfig { ratios: vec![1, 1], ..small_config() };
    let net = PointSegNet::new(cfg, 0).unwrap();
    let plan = net.plan(&random_cloud(50, [8, 8, 8], 4, 1)).unwrap();
    for level in &plan.levels {
        let id: Vec<usize> = (0..50).collect();
        assert_eq!(level.keep, id);
        assert_eq!(level.up, id);
    }
}

#[test]
fn upsampling_takes_nearest_coarse_point() {
    let net = PointSegNet::new(small_config(), 0).unwrap();
    let plan = net.plan(&random_cloud(64, [8, 8, 8], 4, 8)).unwrap();
    assert_eq!(plan.sizes(), vec![64, 16]);
    assert_eq!(plan.levels[1].keep.len(), 4);
    for level in &plan.levels {
        let coarse: Vec<[f64; 3]> = level.keep.iter().map(|&i| level.positions[i]).collect();
        let oracle = brute_knn(&coarse, &level.positions, 1);
        let want: Vec<usize> = oracle.into_iter().map(|v| v[0]).collect();
        assert_eq!(level.up, want);
    }
}

#[test]
fn zeroed_block_reduces_to_shortcut() {
    let mut net = PointSegNet::new(small_config(), 2).unwrap();
    zero_params(&mut net, |name| !name.starts_with("enc0.") || name.starts_with("enc0.shortcut"));
    let pc = random_cloud(64, [8, 8, 8], 4, 9);
    let plan = net.plan(&pc).unwrap();
    let x = random_tensor(&[64, 4], &mut seeded(3), -1.0, 1.0);
    let out = net.encode_level(&plan, 0, &x).unwrap();
    let store = net.params();
    let w = store.get(store.find("enc0.shortcut.w").unwrap());
    assert!(store.find("enc0.shortcut.b").is_none());
    // Oracle: lrelu of the column-standardized projection x W.
    let proj: Vec<f64> = (0..64 * 8)
        .map(|e| (0..4).map(|i| x.data()[(e / 8) * 4 + i] * w.data()[i * 8 + e % 8]).sum())
        .collect();
    for j in 0..8 {
        let col: Vec<f64> = (0..64).map(|n| proj[n * 8 + j]).collect();
        let mean = col.iter().sum::<f64>() / 64.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        for n in 0..64 {
            let s = (col[n] - mean) / (var + 1e-5).sqrt();
            let want = if s > 0.0 { s } else { LEAKY_SLOPE * s };
            assert!((out.data()[n * 8 + j] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn rejects_bad_inputs_and_configs() {
    let net = PointSegNet::new(small_config(), 0).unwrap();
    // 30 points shrink to 7 and then 1, fewer than K = 4.
    assert!(net.predict(&random_cloud(30, [8, 8, 8], 4, 0)).is_err());
    assert!(net.predict(&random_cloud(100, [8, 8, 8], 3, 0)).is_err());
    let empty = PointCloud::new([4, 4, 4], vec![], 4, vec![], None, vec![]).unwrap();
    assert!(net.predict(&empty).is_err());
    for cfg in [
        PointSegConfig { k: 0, ..small_config() },
        PointSegConfig { widths: vec![16, 8], ..small_config() },
        PointSegConfig { ratios: vec![4], ..small_config() },
        PointSegConfig { keep_prob: 0.0, ..small_config() },
        PointSegConfig { num_classes: 1, ..small_config() },
    ] {
        assert!(PointSegNet::new(cfg, 0).is_err());
    }
}

#[test]
fn training_reduces_loss_on_phantom_clouds() {
    let clouds: Vec<PointCloud> = (0..2)
        .map(|s| {
            let p = generate_phantom(&PhantomSpec { dims: [16, 16, 16], outer_radius: (4.0, 6.0), seed: s, ..PhantomSpec::default() }).unwrap();
            let sal = SaliencyMap::from_mask(&p.labels);
            context_aware_sample(&p.volume, &sal, &SamplerConfig { points: 1536, seed: s, ..SamplerConfig::default() })
                .unwrap()
                .with_labels(&p.labels)
                .unwrap()
        })
        .collect();
    for loss in [SegLoss::Gdl, SegLoss::CrossEntropy] {
        let mut net = PointSegNet::new(PointSegConfig { loss, ..PointSegConfig::default() }, 0).unwrap();
        let cfg = TrainConfig { epochs: 15, lr: 0.3, batch_size: 1, ..TrainConfig::default() };
        let mut seen = 0;
        let curve = train_segmentation(&mut net, &clouds, &cfg, |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 15);
        let first = curve[0].loss;
        let last = curve.last().unwrap().loss;
        assert!(last < 0.5 * first, "{loss:?}: {first} -> {last}");
    }
}

#[test]
fn training_needs_labels() {
    let mut net = PointSegNet::new(small_config(), 0).unwrap();
    let mut pc = random_cloud(100, [8, 8, 8], 4, 0);
    pc = PointCloud::new(pc.dims(), pc.coords().to_vec(), 4, pc.feats().to_vec(), None, pc.origin().to_vec()).unwrap();
    assert!(train_segmentation(&mut net, &[pc], &TrainConfig::default(), |_, _| Ok(())).is_err());
    assert!(train_segmentation(&mut net, &[], &TrainConfig::default(), |_, _| Ok(())).is_err());
}

#[test]
fn network_gradients_match_finite_differences() {
    for loss in [SegLoss::Gdl, SegLoss::CrossEntropy] {
        let cfg = PointSegConfig { loss, ..small_config() };
        let mut net = PointSegNet::new(cfg, 7).unwrap();
        let pc = random_cloud(80, [8, 8, 8], 4, 12);
        let plan = net.plan(&pc).unwrap();
        let (_, grads) = net.loss_and_grads(&pc, &plan, &mut seeded(0)).unwrap();
        let mut rng = seeded(1);
        let ids: Vec<_> = net.params().ids().collect();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (pi, &id) in ids.iter().enumerate() {
            let len = net.params().get(id).numel();
            for _ in 0..2 {
                let j = rng.gen_range(0..len);
                let orig = net.params().get(id).data()[j];
                let mut eval = |v: f64| {
                    net.params_mut().get_mut(id).data_mut()[j] = v;
                    net.loss_and_grads(&pc, &plan, &mut seeded(0)).unwrap().0
                };
                let h = 1e-5;
                let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                net.params_mut().get_mut(id).data_mut()[j] = orig;
                let analytic = grads.0[pi][j];
                diff += (numeric - analytic).powi(2);
                norm += analytic.powi(2);
            }
        }
        assert!(diff.sqrt() / norm.sqrt().max(1e-10) < 1e-4, "{loss:?}: {} vs {}", diff.sqrt(), norm.sqrt());
    }
}
