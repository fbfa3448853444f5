use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{IterationDice, MetricsReport, StageStats};
use super::{dice, measure_peak, score_cases, tracking_active};
use crate::par::par_map;
use crate::error::{Error, Result};
use crate::pipeline::{
    infer_case, sample_case, split, train_saliency_stage, train_segmentation_stage, training_clouds, Case,
    PipelineConfig, Sampling, Trained,
};
use crate::pointseg::{PointSegConfig, PointSegNet, SegLoss};
use crate::saliency::SaliencyNet;
use crate::sampling::{fuse_many, fuse_to_volume, random_passes, FusePolicy};
use crate::volume::{voxel_count, Dims, LabelVolume, Volume};

/// Ablation variants. D and E (voxel U-Net baselines) are recognised but out
/// of scope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Saliency-guided sampling and GDL; the default pipeline.
    A,
    /// Random sampling, no saliency network.
    B,
    /// Cross-entropy in place of GDL.
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::A, Variant::B, Variant::C];

    pub fn sampling(self) -> Sampling {
        match self {
            Variant::B => Sampling::Random,
            Variant::A | Variant::C => Sampling::ContextAware,
        }
    }

    pub fn loss(self) -> SegLoss {
        match self {
            Variant::C => SegLoss::CrossEntropy,
            Variant::A | Variant::B => SegLoss::Gdl,
        }
    }

    pub fn segmentation_config(self, base: &PointSegConfig) -> PointSegConfig {
        PointSegConfig {
            loss: self.loss(),
            ..base.clone()
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::A => "full",
            Variant::B => "random sampling",
            Variant::C => "cross-entropy loss",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            v @ ("D" | "E") => Err(Error::Config(format!(
                "ablation variant {v} is a voxel U-Net baseline and is not implemented"
            ))),
            other => Err(Error::Config(format!("unknown ablation variant `{other}`"))),
        }
    }
}

/// Single-pass inference and scoring of the holdout cases.
pub fn evaluate_holdout(
    cfg: &PipelineConfig,
    cases: &[Case],
    saliency: Option<&SaliencyNet>,
    seg: &PointSegNet,
    sampling: Sampling,
    tau: f64,
    jobs: usize,
) -> Result<MetricsReport> {
    let (ntrain, _) = split(cfg, cases);
    let indices: Vec<usize> = (ntrain..cases.len()).collect();
    let preds = par_map(&indices, jobs, |&i| {
        Ok(infer_case(cfg, i, &cases[i].volume, saliency, seg, sampling, tau)?.labels)
    })?;
    let pairs: Vec<_> = indices
        .iter()
        .zip(&preds)
        .map(|(&i, p)| (cases[i].name.as_str(), p, &cases[i].labels, cases[i].volume.spacing()))
        .collect();
    Ok(MetricsReport::from_scores(score_cases(&pairs, jobs)?))
}

/// One trained and scored ablation variant.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub trained: Trained,
    pub report: MetricsReport,
}

/// Trains and scores each variant on the same cases, seeds and point budget.
/// Context-aware variants share one saliency network.
pub fn run_ablation(cfg: &PipelineConfig, cases: &[Case], variants: &[Variant], jobs: usize) -> Result<Vec<AblationRun>> {
    let (ntrain, _) = split(cfg, cases);
    let train = &cases[..ntrain];
    let saliency = if variants.iter().any(|v| v.sampling() == Sampling::ContextAware) {
        Some(train_saliency_stage(cfg, train, |_, _| Ok(()))?)
    } else {
        None
    };
    let mut runs = Vec::new();
    for &variant in variants {
        let sampling = variant.sampling();
        let (net, curve) = match (sampling, &saliency) {
            (Sampling::ContextAware, Some((n, c))) => (Some(n.clone()), c.clone()),
            _ => (None, Vec::new()),
        };
        let clouds = training_clouds(cfg, train, net.as_ref(), sampling)?;
        let seg_cfg = variant.segmentation_config(&cfg.segmentation);
        let (seg, seg_curve) = train_segmentation_stage(cfg, seg_cfg, &clouds, |_, _| Ok(()))?;
        let report = evaluate_holdout(cfg, cases, net.as_ref(), &seg, sampling, cfg.sampler.threshold, jobs)?;
        runs.push(AblationRun {
            variant,
            trained: Trained {
                saliency: net,
                saliency_curve: curve,
                segmentation: seg,
                segmentation_curve: seg_curve,
            },
            report,
        });
    }
    Ok(runs)
}

/// Holdout scores at one sampling threshold. A threshold that overflows the
/// point budget yields a row carrying the sampler error instead of scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    /// Mean Dice per foreground class, class 1 first.
    pub dice: Vec<f64>,
    pub mean_dice: Option<f64>,
    pub error: Option<String>,
}

/// Re-runs holdout inference with trained models at each threshold.
pub fn run_threshold_sweep(
    cfg: &PipelineConfig,
    cases: &[Case],
    saliency: &SaliencyNet,
    seg: &PointSegNet,
    taus: &[f64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    taus.iter()
        .map(|&tau| {
            cfg.sampler_for(0, tau).validate()?;
            match evaluate_holdout(cfg, cases, Some(saliency), seg, Sampling::ContextAware, tau, jobs) {
                Ok(r) => Ok(SweepRow {
                    tau,
                    dice: r.per_class.iter().map(|c| c.mean_dice).collect(),
                    mean_dice: Some(r.mean_dice),
                    error: None,
                }),
                Err(e @ Error::ForegroundOverflow { .. }) => Ok(SweepRow {
                    tau,
                    dice: Vec::new(),
                    mean_dice: None,
                    error: Some(e.to_string()),
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// `tau,dice_1..dice_{C-1},mean_dice,error`, one row per threshold.
pub fn sweep_csv(rows: &[SweepRow], num_classes: usize) -> String {
    let mut out = String::from("tau");
    for c in 1..num_classes {
        let _ = write!(out, ",dice_{c}");
    }
    out.push_str(",mean_dice,error\n");
    for r in rows {
        let _ = write!(out, "{}", r.tau);
        for c in 0..num_classes - 1 {
            let _ = write!(out, ",{}", r.dice.get(c).map(|d| d.to_string()).unwrap_or_default());
        }
        let mean = r.mean_dice.map(|d| d.to_string()).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(out, ",{mean},{err}");
    }
    out
}

fn mean_fg_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    let classes = truth.num_classes();
    let mut s = 0.0;
    for c in 1..classes as u8 {
        s += dice(pred, truth, c)?;
    }
    Ok(s / (classes - 1) as f64)
}

/// Multi-pass random-sampling inference on the holdout cases. Entry `m - 1`
/// fuses the first `m` passes (each point network pass labels fresh voxels);
/// values are averaged over cases. Once a case is fully covered its last value
/// carries forward.
pub fn random_pass_series(
    cfg: &PipelineConfig,
    cases: &[Case],
    seg: &PointSegNet,
    passes: usize,
    jobs: usize,
) -> Result<Vec<IterationDice>> {
    let (ntrain, _) = split(cfg, cases);
    let indices: Vec<usize> = (ntrain..cases.len()).collect();
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no holdout cases".into()));
    }
    let classes = seg.config().num_classes;
    let per_case = par_map(&indices, jobs, |&i| {
        let case = &cases[i];
        let sc = cfg.sampler_for(i, cfg.sampler.threshold);
        let mut clouds = random_passes(&case.volume, &sc, passes)?;
        for pc in &mut clouds {
            let probs = seg.predict(pc)?;
            pc.set_labels(probs.argmax())?;
        }
        let total = case.volume.voxel_count() as f64;
        let mut series = Vec::with_capacity(passes);
        let mut covered = 0usize;
        for m in 1..=passes {
            if m <= clouds.len() {
                covered += clouds[m - 1].len();
                let fused = fuse_many(&clouds[..m], classes, FusePolicy::AllPoints)?;
                series.push((covered as f64 / total, mean_fg_dice(&fused, &case.labels)?));
            } else {
                let last = *series.last().expect("at least one pass");
                series.push(last);
            }
        }
        Ok(series)
    })?;
    let n = per_case.len() as f64;
    Ok((0..passes)
        .map(|m| IterationDice {
            iterations: m + 1,
            coverage: per_case.iter().map(|s| s[m].0).sum::<f64>() / n,
            mean_dice: per_case.iter().map(|s| s[m].1).sum::<f64>() / n,
        })
        .collect())
}

/// `mode,iterations,coverage,mean_dice`: the single context-aware pass, then
/// the random-sampling series.
pub fn series_csv(context_aware: &IterationDice, random: &[IterationDice]) -> String {
    let mut out = String::from("mode,iterations,coverage,mean_dice\n");
    let _ = writeln!(
        out,
        "context_aware,{},{},{}",
        context_aware.iterations, context_aware.coverage, context_aware.mean_dice
    );
    for r in random {
        let _ = writeln!(out, "random,{},{},{}", r.iterations, r.coverage, r.mean_dice);
    }
    out
}

/// Bytes of one `f64` feature buffer of `width` channels over every voxel.
pub fn dense_feature_bytes(dims: Dims, width: usize) -> usize {
    voxel_count(dims) * width * std::mem::size_of::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub stage: String,
    pub run: usize,
    pub wall_s: f64,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub rows: Vec<BenchRow>,
    pub stages: Vec<StageStats>,
    /// Points in the context-aware cloud.
    pub points: usize,
    /// Widest per-point feature of the point network.
    pub feature_width: usize,
    /// [`dense_feature_bytes`] for the volume at `feature_width`.
    pub dense_buffer_bytes: usize,
    /// False when the tracking allocator is not installed; peaks are then 0.
    pub memory_tracked: bool,
}

impl Benchmark {
    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

pub const BENCH_STAGES: [&str; 4] = ["saliency_forward", "sampling", "point_forward", "fuse"];

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64, usize)> {
    let start = Instant::now();
    let (out, peak) = measure_peak(f);
    let wall = start.elapsed().as_secs_f64();
    Ok((out?, wall, peak))
}

/// Times and measures each inference stage on one volume, `repeat` times, on
/// the calling thread.
#[allow(clippy::too_many_arguments)]
pub fn benchmark(
    cfg: &PipelineConfig,
    index: usize,
    volume: &Volume,
    saliency: &SaliencyNet,
    seg: &PointSegNet,
    tau: f64,
    repeat: usize,
) -> Result<Benchmark> {
    if repeat == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one run".into()));
    }
    let mut rows = Vec::new();
    let mut points = 0;
    for run in 1..=repeat {
        let (map, t0, m0) = timed(|| saliency.predict(volume))?;
        let (mut cloud, t1, m1) = timed(|| sample_case(cfg, index, volume, Some(&map), Sampling::ContextAware, tau))?;
        let (probs, t2, m2) = timed(|| seg.predict(&cloud))?;
        let (_, t3, m3) = timed(|| {
            cloud.set_labels(probs.argmax())?;
            fuse_to_volume(&cloud, seg.config().num_classes, FusePolicy::ForegroundOnly)
        })?;
        points = cloud.len();
        for (stage, wall_s, peak_bytes) in BENCH_STAGES.iter().zip([t0, t1, t2, t3]).zip([m0, m1, m2, m3]).map(|((s, t), m)| (s, t, m)) {
            rows.push(BenchRow {
                stage: stage.to_string(),
                run,
                wall_s,
                peak_bytes,
            });
        }
    }
    let stages = BENCH_STAGES
        .iter()
        .map(|&stage| {
            let r: Vec<&BenchRow> = rows.iter().filter(|r| r.stage == stage).collect();
            let n = r.len() as f64;
            let wall = r.iter().map(|x| x.wall_s).sum::<f64>() / n;
            let var = r.iter().map(|x| (x.wall_s - wall).powi(2)).sum::<f64>() / n;
            StageStats {
                stage: stage.to_string(),
                runs: r.len(),
                wall_s: wall,
                wall_s_std: var.sqrt(),
                peak_bytes: r.iter().map(|x| x.peak_bytes as f64).sum::<f64>() / n,
            }
        })
        .collect();
    let feature_width = seg.config().max_feature_width();
    Ok(Benchmark {
        rows,
        stages,
        points,
        feature_width,
        dense_buffer_bytes: dense_feature_bytes(volume.dims(), feature_width),
        memory_tracked: tracking_active(),
    })
}

/// `stage,run,wall_s,peak_bytes`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("stage,run,wall_s,peak_bytes\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.stage, r.run, r.wall_s, r.peak_bytes);
    }
    out
}
