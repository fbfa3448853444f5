//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use pointunet::rng::Rng;
use pointunet::tensor::{Graph, Tensor, Var};
use pointunet::Result;
use rand::Rng as _;

/// Builds a scalar from the given inputs on `g`.
pub type Objective<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

pub fn random_tensor(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so kinks of piecewise ops are never straddled
/// by a finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn evaluate(f: &Objective, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars).expect("objective failed");
    g.value(out).item()
}

/// Analytic gradients from `backward`.
pub fn analytic(f: &Objective, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("objective failed");
    g.backward(out).expect("backward failed");
    vars.iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect()
}

/// Central differences with step `h` on every input element.
pub fn numeric(f: &Objective, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].numel()];
        for j in 0..grad.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = evaluate(f, &work);
            work[i].data_mut()[j] = orig - h;
            let down = evaluate(f, &work);
            work[i].data_mut()[j] = orig;
            grad[j] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// `||a - n|| / max(||a||, ||n||, floor)` over all inputs jointly.
pub fn rel_error(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(n.iter().flatten()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nn += y * y;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-10)
}

pub fn gradcheck(f: &Objective, inputs: &[Tensor]) -> f64 {
    rel_error(&analytic(f, inputs), &numeric(f, inputs, 1e-5))
}

/// `sum(out * w)` for a fixed random `w`: turns any op into a scalar whose
/// gradient is a vector-Jacobian product with `w`.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = pointunet::rng::seeded(seed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(random_tensor(&shape, &mut rng, -1.0, 1.0));
    let m = g.mul(out, w)?;
    g.sum(m)
}

/// Sorted brute-force K nearest neighbours with ties broken by lower index.
pub fn brute_knn(points: &[[f64; 3]], queries: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let mut all: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let d = (0..3).map(|a| (p[a] - q[a]) * (p[a] - q[a])).sum::<f64>();
                    (d, i)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, i)| i).collect()
        })
        .collect()
}

/// One differentiable operation under test: a name, input shapes with a
/// generator, and the objective.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Box<dyn Fn(&mut Rng) -> Vec<Tensor>>,
    pub objective: Box<Objective<'static>>,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut Rng) -> Vec<Tensor> + 'static,
    objective: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs: Box::new(inputs),
        objective: Box::new(objective),
    }
}

fn uni(shape: &'static [usize]) -> impl Fn(&mut Rng) -> Vec<Tensor> {
    move |rng| vec![random_tensor(shape, rng, -1.0, 1.0)]
}

fn two(a: &'static [usize], b: &'static [usize]) -> impl Fn(&mut Rng) -> Vec<Tensor> {
    move |rng| vec![random_tensor(a, rng, -1.0, 1.0), random_tensor(b, rng, -1.0, 1.0)]
}

/// Every differentiable op of the engine, each wrapped in a random projection.
pub fn op_cases() -> Vec<OpCase> {
    use pointunet::tensor::Conv3dGeom;
    vec![
        case("add", two(&[3, 4], &[3, 4]), |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 1)
        }),
        case("sub", two(&[3, 4], &[3, 4]), |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 2)
        }),
        case("mul", two(&[3, 4], &[3, 4]), |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 3)
        }),
        case(
            "div",
            |rng| vec![random_tensor(&[5], rng, -1.0, 1.0), random_tensor(&[5], rng, 0.5, 2.0)],
            |g, v| {
                let y = g.div(v[0], v[1])?;
                project(g, y, 4)
            },
        ),
        case("scale+add_scalar", uni(&[6]), |g, v| {
            let y = g.scale(v[0], -1.7)?;
            let y = g.add_scalar(y, 0.3)?;
            project(g, y, 5)
        }),
        case("add_row", two(&[4, 3], &[3]), |g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y, 6)
        }),
        case("scale_channels", two(&[3, 2, 2, 2], &[3]), |g, v| {
            let y = g.scale_channels(v[0], v[1])?;
            project(g, y, 7)
        }),
        case("matmul", two(&[3, 4], &[4, 5]), |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 8)
        }),
        case("conv3d", |rng| {
            vec![
                random_tensor(&[2, 5, 4, 6], rng, -1.0, 1.0),
                random_tensor(&[3, 2, 3, 3, 3], rng, -1.0, 1.0),
                random_tensor(&[3], rng, -1.0, 1.0),
            ]
        }, |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), Conv3dGeom { stride: 1, dilation: 1, padding: 1 })?;
            project(g, y, 9)
        }),
        case("conv3d dilated", two(&[2, 6, 6, 6], &[2, 2, 3, 3, 3]), |g, v| {
            let y = g.conv3d(v[0], v[1], None, Conv3dGeom { stride: 1, dilation: 2, padding: 2 })?;
            project(g, y, 10)
        }),
        case("conv3d strided", two(&[2, 6, 5, 6], &[2, 2, 3, 3, 3]), |g, v| {
            let y = g.conv3d(v[0], v[1], None, Conv3dGeom { stride: 2, dilation: 1, padding: 1 })?;
            project(g, y, 11)
        }),
        case("upsample_nearest", uni(&[2, 2, 3, 2]), |g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            project(g, y, 12)
        }),
        case("concat", two(&[2, 3, 2], &[2, 1, 2]), |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            project(g, y, 13)
        }),
        case("sigmoid", uni(&[7]), |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, 14)
        }),
        case("leaky_relu", |rng| vec![away_from_zero(&[8], rng)], |g, v| {
            let y = g.leaky_relu(v[0], 0.01)?;
            project(g, y, 15)
        }),
        case(
            "log",
            |rng| vec![random_tensor(&[5], rng, 0.2, 2.0)],
            |g, v| {
                let y = g.log(v[0])?;
                project(g, y, 16)
            },
        ),
        case("softmax", uni(&[2, 4, 3]), |g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y, 17)
        }),
        case("log_softmax", uni(&[3, 5]), |g, v| {
            let y = g.log_softmax(v[0], 1)?;
            project(g, y, 18)
        }),
        case("global_avg_pool", uni(&[3, 2, 2, 3]), |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, 19)
        }),
        case("gather_rows", uni(&[4, 3]), |g, v| {
            let y = g.gather_rows(v[0], &[3, 0, 3, 1, 1, 2])?;
            project(g, y, 20)
        }),
        case(
            "neighbor_max",
            |rng| {
                // Distinct values spaced well beyond the FD step.
                let mut vals: Vec<f64> = (0..2 * 3 * 2).map(|i| i as f64 * 0.1).collect();
                use rand::seq::SliceRandom;
                vals.shuffle(rng);
                vec![Tensor::from_vec(vec![2, 3, 2], vals).unwrap()]
            },
            |g, v| {
                let y = g.neighbor_max(v[0])?;
                project(g, y, 21)
            },
        ),
        case("normalize_columns", uni(&[6, 3]), |g, v| {
            let y = g.normalize_columns(v[0], 1e-3)?;
            project(g, y, 30)
        }),
        case("dropout (fixed mask)", uni(&[10]), |g, v| {
            let mut rng = pointunet::rng::seeded(99);
            let y = g.dropout(v[0], 0.6, true, &mut rng)?;
            project(g, y, 22)
        }),
        case("sum", uni(&[3, 3]), |g, v| {
            let y = g.scale(v[0], 2.0)?;
            g.sum(y)
        }),
        case("mean", uni(&[3, 3]), |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }),
        case("sum_axis", uni(&[2, 3, 4]), |g, v| {
            let y = g.sum_axis(v[0], 1)?;
            project(g, y, 23)
        }),
        case("reshape", uni(&[2, 6]), |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let y = g.softmax(y, 1)?;
            project(g, y, 24)
        }),
    ]
}

/// One randomized sampler instance: random dims, channels, saliency, two
/// thresholds and a feasible budget. Checks foreground completeness,
/// uniqueness, exact budget and that lowering the threshold never shrinks the
/// foreground set.
pub fn check_sampler_instance(seed: u64) -> std::result::Result<(), String> {
    use pointunet::saliency::SaliencyMap;
    use pointunet::sampling::{context_aware_sample, Origin, SamplerConfig};
    use pointunet::volume::{flat_index, Volume};
    use std::collections::HashSet;

    let mut rng = pointunet::rng::seeded(seed);
    let dims = [rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7)];
    let n: usize = dims.iter().product();
    let channels = rng.gen_range(1..4);
    let data = (0..channels * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vol = Volume::new(channels, dims, [1.0; 3], data).unwrap();
    // Mix of exact 0/1 values and continuous ones, so ties with the threshold occur.
    let prob: Vec<f64> = (0..n)
        .map(|_| match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            2 => rng.gen_range(0..=10) as f64 / 10.0,
            _ => rng.gen::<f64>(),
        })
        .collect();
    let sal = SaliencyMap::new(dims, prob.clone()).unwrap();
    let hi = rng.gen_range(0.05..0.99);
    let lo = rng.gen_range(0.01..=hi);
    let fg_lo = prob.iter().filter(|&&p| p >= lo).count();
    let points = rng.gen_range(fg_lo.max(1)..=n);
    let mut sets = Vec::new();
    for tau in [hi, lo] {
        let cfg = SamplerConfig { threshold: tau, points, seed };
        let pc = context_aware_sample(&vol, &sal, &cfg).map_err(|e| e.to_string())?;
        if pc.len() != points {
            return Err(format!("{} points, budget {points}", pc.len()));
        }
        let voxels: Vec<usize> = pc.coords().iter().map(|&c| flat_index(dims, c)).collect();
        let unique: HashSet<usize> = voxels.iter().copied().collect();
        if unique.len() != voxels.len() {
            return Err("duplicate voxel".into());
        }
        let fg: HashSet<usize> = voxels
            .iter()
            .zip(pc.origin())
            .filter(|(_, &o)| o == Origin::Foreground)
            .map(|(&v, _)| v)
            .collect();
        let expected: HashSet<usize> = (0..n).filter(|&v| prob[v] >= tau).collect();
        if fg != expected {
            return Err(format!("foreground set at tau {tau} differs from thresholding"));
        }
        for (i, &v) in voxels.iter().enumerate() {
            let want: Vec<f64> = vol.features_at(v).collect();
            if pc.feats()[i * channels..(i + 1) * channels] != want[..] {
                return Err("features do not match the voxel".into());
            }
        }
        sets.push(fg);
    }
    if !sets[0].is_subset(&sets[1]) {
        return Err("lowering the threshold lost foreground voxels".into());
    }
    Ok(())
}

/// All-pairs Dice over explicit coordinate sets.
pub fn brute_dice(pred: &pointunet::volume::LabelVolume, truth: &pointunet::volume::LabelVolume, class: u8) -> f64 {
    use std::collections::BTreeSet;
    let set = |l: &pointunet::volume::LabelVolume| -> BTreeSet<usize> {
        l.labels().iter().enumerate().filter(|(_, &x)| x == class).map(|(i, _)| i).collect()
    };
    let (a, b) = (set(pred), set(truth));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// O(|A||B|) HD95 with the inclusive linear-interpolation percentile.
pub fn brute_hd95(a: &[[f64; 3]], b: &[[f64; 3]]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let mut d: Vec<f64> = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let e = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = 0.95 * (d.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = (lo + 1).min(d.len() - 1);
        d[lo] + (rank - lo as f64) * (d[hi] - d[lo])
    };
    Some(directed(a, b).max(directed(b, a)))
}

/// World coordinates of the voxels labelled `class`, by plain iteration.
pub fn brute_points(l: &pointunet::volume::LabelVolume, class: u8, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let [d, h, w] = l.dims();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if l.labels()[(z * h + y) * w + x] == class {
                    out.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                }
            }
        }
    }
    out
}

/// Labels in `0..classes`, foreground with probability `density`.
pub fn random_labels(dims: [usize; 3], classes: u8, density: f64, seed: u64) -> pointunet::volume::LabelVolume {
    let mut rng = pointunet::rng::seeded(seed);
    let n = dims.iter().product();
    let l = (0..n)
        .map(|_| if rng.gen_bool(density) { rng.gen_range(1..classes) } else { 0 })
        .collect();
    pointunet::volume::LabelVolume::new(dims, classes as usize, l).unwrap()
}
