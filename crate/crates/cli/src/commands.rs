use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use pointunet::metrics::{
    bench_csv, benchmark, dice_labels, evaluate_holdout, random_pass_series, run_ablation, run_threshold_sweep,
    score_cases, series_csv, sweep_csv, IterationDice, MetricsReport, Variant,
};
use pointunet::par::par_map;
use pointunet::pipeline::{generate_dataset, infer_case, sample_case, split, train_saliency_stage, train_segmentation_stage, PipelineConfig, Sampling};
use pointunet::pointseg::{self, PointSegNet};
use pointunet::sampling::{fuse_to_volume, read_point_cloud, write_point_cloud, PointCloud};
use pointunet::saliency::{self, SaliencyMap};
use pointunet::tensor::write_checkpoint;
use pointunet::train::EpochStats;
use pointunet::volume::{read_labels, voxel_count, write_labels, write_volume};
use serde::Serialize;

use crate::failure::{Failure, Kind, Tag as _};
use crate::layout::*;
use crate::{load_config, Cli, Command, SamplerArgs};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    let jobs = cli.jobs.max(1);
    match &cli.command {
        Command::GenData { out } => gen_data(&mut cfg, out.as_deref()),
        Command::TrainSaliency { epochs, out } => train_saliency(&mut cfg, *epochs, out.as_deref()),
        Command::Sample { sampler, sampling, out } => {
            apply_sampler(&mut cfg, sampler)?;
            sample(&mut cfg, (*sampling).into(), out.as_deref())
        }
        Command::TrainSeg {
            epochs,
            sampling,
            clouds,
            out,
        } => train_seg(&mut cfg, *epochs, (*sampling).into(), clouds.as_deref(), out.as_deref()),
        Command::Infer {
            sampler,
            sampling,
            oracle,
            out,
        } => {
            apply_sampler(&mut cfg, sampler)?;
            infer(&mut cfg, (*sampling).into(), *oracle, out.as_deref(), jobs)
        }
        Command::Evaluate {
            sampling,
            predictions,
            out,
        } => evaluate(&mut cfg, (*sampling).into(), predictions.as_deref(), out.as_deref(), jobs),
        Command::SweepThreshold { taus, points, out } => {
            apply_sampler(&mut cfg, &SamplerArgs { threshold: None, points: *points })?;
            sweep(&mut cfg, taus, out.as_deref(), jobs)
        }
        Command::Ablate {
            variants,
            epochs,
            points,
            out,
        } => {
            apply_sampler(&mut cfg, &SamplerArgs { threshold: None, points: *points })?;
            if let Some(e) = epochs {
                cfg.segmentation_training.epochs = *e;
                cfg.validate().tag(Kind::Config)?;
            }
            ablate(&mut cfg, variants, out.as_deref(), jobs)
        }
        Command::Bench {
            repeat,
            passes,
            sampler,
            out,
        } => {
            apply_sampler(&mut cfg, sampler)?;
            bench(&mut cfg, *repeat, *passes, out.as_deref(), jobs)
        }
    }
}

fn apply_sampler(cfg: &mut PipelineConfig, args: &SamplerArgs) -> Result<(), Failure> {
    if let Some(t) = args.threshold {
        cfg.sampler.threshold = t;
    }
    if let Some(n) = args.points {
        cfg.sampler.points = n;
    }
    cfg.validate().tag(Kind::Config)
}

fn sampling_name(s: Sampling) -> &'static str {
    match s {
        Sampling::ContextAware => "context_aware",
        Sampling::Random => "random",
    }
}

fn report_suffix(s: Sampling) -> &'static str {
    match s {
        Sampling::ContextAware => "",
        Sampling::Random => "_random",
    }
}

fn holdout_names(manifest: &Manifest) -> &[String] {
    &manifest.cases[manifest.cases.len() - manifest.holdout..]
}

fn gen_data(cfg: &mut PipelineConfig, out: Option<&Path>) -> Result<(), Failure> {
    if let Some(dir) = out {
        cfg.paths.data = dir.to_path_buf();
    }
    let cases = generate_dataset(cfg)?;
    let dir = &cfg.paths.data;
    fs::create_dir_all(dir)?;
    for c in &cases {
        write_volume(volume_path(dir, &c.name), &c.volume)?;
        write_labels(labels_path(dir, &c.name), &c.labels)?;
    }
    let manifest = Manifest {
        seed: cfg.seed,
        cases: cases.iter().map(|c| c.name.clone()).collect(),
        holdout: cfg.dataset.holdout,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    eprintln!("wrote {} cases to {}", cases.len(), dir.display());
    Ok(())
}

/// Per-epoch log entry; wall time stays on stderr so reports are reproducible.
#[derive(Serialize)]
struct EpochLog {
    epoch: usize,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    holdout_dice: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct TrainingLog {
    epochs: Vec<EpochLog>,
}

fn progress(stage: &str, s: &EpochStats) {
    eprintln!("{stage} epoch {} loss {:.5} ({:.1}s)", s.epoch, s.loss, s.wall_s);
}

fn train_saliency(cfg: &mut PipelineConfig, epochs: Option<usize>, out: Option<&Path>) -> Result<(), Failure> {
    if let Some(e) = epochs {
        cfg.saliency_training.epochs = e;
        cfg.validate().tag(Kind::Config)?;
    }
    let (_, cases) = load_dataset(cfg)?;
    let (ntrain, _) = split(cfg, &cases);
    let (net, curve) = train_saliency_stage(cfg, &cases[..ntrain], |s, _| {
        progress("saliency", s);
        Ok(())
    })?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.checkpoints.clone());
    fs::create_dir_all(&dir)?;
    write_checkpoint(saliency_checkpoint(&dir), net.params())?;
    let log = TrainingLog {
        epochs: curve
            .iter()
            .map(|s| EpochLog {
                epoch: s.epoch,
                loss: s.loss,
                holdout_dice: None,
            })
            .collect(),
    };
    write_json(&cfg.paths.reports.join("saliency_training.json"), &log)
}

#[derive(Serialize)]
struct CloudInfo {
    name: String,
    points: usize,
    foreground_points: usize,
}

#[derive(Serialize)]
struct SamplingLog {
    sampling: &'static str,
    threshold: f64,
    points: usize,
    clouds: Vec<CloudInfo>,
}

fn sample(cfg: &mut PipelineConfig, sampling: Sampling, out: Option<&Path>) -> Result<(), Failure> {
    let (_, cases) = load_dataset(cfg)?;
    let net = match sampling {
        Sampling::ContextAware => Some(load_saliency(cfg)?),
        Sampling::Random => None,
    };
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| clouds_dir(cfg, sampling));
    fs::create_dir_all(&dir)?;
    let mut clouds = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let map = net.as_ref().map(|n| n.predict(&c.volume)).transpose()?;
        let cloud = sample_case(cfg, i, &c.volume, map.as_ref(), sampling, cfg.sampler.threshold)?.with_labels(&c.labels)?;
        write_point_cloud(cloud_path(&dir, &c.name), &cloud)?;
        if let Some(m) = &map {
            write_volume(saliency_map_path(&dir, &c.name), &m.to_volume(c.volume.spacing())?)?;
        }
        clouds.push(CloudInfo {
            name: c.name.clone(),
            points: cloud.len(),
            foreground_points: cloud.foreground_count(),
        });
    }
    eprintln!("wrote {} clouds to {}", clouds.len(), dir.display());
    write_json(
        &dir.join("sampling.json"),
        &SamplingLog {
            sampling: sampling_name(sampling),
            threshold: cfg.sampler.threshold,
            points: cfg.sampler.points,
            clouds,
        },
    )
}

fn read_cloud(dir: &Path, name: &str) -> Result<PointCloud, Failure> {
    let path = cloud_path(dir, name);
    read_point_cloud(&path)
        .map_err(|e| anyhow!("{}: {e} (run sample first)", path.display()))
        .tag(Kind::Data)
}

/// Per-class Dice over the points of one labelled cloud, class 1 first.
fn point_dice(net: &PointSegNet, cloud: &PointCloud) -> Result<Vec<f64>, Failure> {
    let truth = cloud
        .labels()
        .ok_or_else(|| anyhow!("holdout cloud has no labels"))
        .tag(Kind::Data)?;
    let pred = net.predict(cloud)?.argmax();
    (1..net.config().num_classes as u8)
        .map(|c| dice_labels(&pred, truth, c).map_err(Failure::from))
        .collect()
}

fn train_seg(
    cfg: &mut PipelineConfig,
    epochs: Option<usize>,
    sampling: Sampling,
    clouds: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if let Some(e) = epochs {
        cfg.segmentation_training.epochs = e;
        cfg.validate().tag(Kind::Config)?;
    }
    let manifest = read_manifest(cfg)?;
    let dir = clouds.map(Path::to_path_buf).unwrap_or_else(|| clouds_dir(cfg, sampling));
    let ntrain = manifest.cases.len() - manifest.holdout;
    let train = manifest.cases[..ntrain]
        .iter()
        .map(|n| read_cloud(&dir, n))
        .collect::<Result<Vec<_>, _>>()?;
    let probe = holdout_names(&manifest)
        .first()
        .map(|n| cloud_path(&dir, n))
        .filter(|p| p.exists())
        .map(|p| read_point_cloud(p).tag(Kind::Data))
        .transpose()?;
    let mut probe_net = PointSegNet::new(cfg.segmentation.clone(), 0)?;
    let mut log = Vec::new();
    let mut probe_err = None;
    let (net, _) = train_segmentation_stage(cfg, cfg.segmentation.clone(), &train, |s, params| {
        progress("segmentation", s);
        let holdout_dice = match &probe {
            Some(cloud) => {
                probe_net.params_mut().load_from(params)?;
                match point_dice(&probe_net, cloud) {
                    Ok(d) => Some(d),
                    Err(f) => {
                        probe_err = Some(f);
                        None
                    }
                }
            }
            None => None,
        };
        log.push(EpochLog {
            epoch: s.epoch,
            loss: s.loss,
            holdout_dice,
        });
        Ok(())
    })?;
    if let Some(f) = probe_err {
        return Err(f);
    }
    let ckpt_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.checkpoints.clone());
    fs::create_dir_all(&ckpt_dir)?;
    write_checkpoint(segmentation_checkpoint(&ckpt_dir, sampling), net.params())?;
    write_json(
        &cfg.paths.reports.join(format!("segmentation_training{}.json", report_suffix(sampling))),
        &TrainingLog { epochs: log },
    )
}

#[derive(Serialize)]
struct InferLog {
    sampling: &'static str,
    threshold: f64,
    points: usize,
    oracle: bool,
    cases: Vec<CloudInfo>,
    saliency_forwards: usize,
    segmentation_forwards: usize,
}

fn infer(cfg: &mut PipelineConfig, sampling: Sampling, oracle: bool, out: Option<&Path>, jobs: usize) -> Result<(), Failure> {
    let (manifest, cases) = load_dataset(cfg)?;
    let (saliency_net, seg) = if oracle {
        (None, None)
    } else {
        let s = match sampling {
            Sampling::ContextAware => Some(load_saliency(cfg)?),
            Sampling::Random => None,
        };
        (s, Some(load_segmentation(cfg, sampling)?))
    };
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| predictions_dir(cfg, sampling));
    fs::create_dir_all(&dir)?;
    let ntrain = manifest.cases.len() - manifest.holdout;
    let indices: Vec<usize> = (ntrain..cases.len()).collect();
    let before = (saliency::prediction_count(), pointseg::prediction_count());
    let tau = cfg.sampler.threshold;
    let cfg_ref = &*cfg;
    let infos = par_map(&indices, jobs, |&i| {
        let case = &cases[i];
        let (cloud, labels) = match &seg {
            Some(seg) => {
                let r = infer_case(cfg_ref, i, &case.volume, saliency_net.as_ref(), seg, sampling, tau)?;
                (r.cloud, r.labels)
            }
            None => {
                let map = SaliencyMap::from_mask(&case.labels);
                let cloud = sample_case(cfg_ref, i, &case.volume, Some(&map), sampling, tau)?.with_labels(&case.labels)?;
                let labels = fuse_to_volume(&cloud, case.labels.num_classes(), sampling.fuse_policy())?;
                (cloud, labels)
            }
        };
        write_labels(prediction_path(&dir, &case.name), &labels)?;
        Ok(CloudInfo {
            name: case.name.clone(),
            points: cloud.len(),
            foreground_points: cloud.foreground_count(),
        })
    })?;
    let log = InferLog {
        sampling: sampling_name(sampling),
        threshold: tau,
        points: cfg.sampler.points,
        oracle,
        cases: infos,
        saliency_forwards: saliency::prediction_count() - before.0,
        segmentation_forwards: pointseg::prediction_count() - before.1,
    };
    eprintln!(
        "wrote {} predictions to {} ({} saliency and {} segmentation forwards)",
        log.cases.len(),
        dir.display(),
        log.saliency_forwards,
        log.segmentation_forwards
    );
    write_json(&dir.join("infer.json"), &log)
}

fn print_report(report: &MetricsReport) {
    for c in &report.per_class {
        match c.mean_hd95 {
            Some(h) => println!("class {}: dice {:.4} hd95 {:.3}", c.class, c.mean_dice, h),
            None => println!("class {}: dice {:.4} hd95 undefined", c.class, c.mean_dice),
        }
    }
    println!("mean dice {:.4}", report.mean_dice);
}

fn evaluate(
    cfg: &mut PipelineConfig,
    sampling: Sampling,
    predictions: Option<&Path>,
    out: Option<&Path>,
    jobs: usize,
) -> Result<(), Failure> {
    let (manifest, cases) = load_dataset(cfg)?;
    let dir = predictions.map(Path::to_path_buf).unwrap_or_else(|| predictions_dir(cfg, sampling));
    let ntrain = manifest.cases.len() - manifest.holdout;
    let preds = cases[ntrain..]
        .iter()
        .map(|c| {
            let path = prediction_path(&dir, &c.name);
            read_labels(&path)
                .map_err(|e| anyhow!("{}: {e} (run infer first)", path.display()))
                .tag(Kind::Data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<_> = cases[ntrain..]
        .iter()
        .zip(&preds)
        .map(|(c, p)| (c.name.as_str(), p, &c.labels, c.volume.spacing()))
        .collect();
    let report = MetricsReport::from_scores(score_cases(&pairs, jobs).tag(Kind::Data)?);
    print_report(&report);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.reports.clone());
    report.write(&out, &format!("evaluation{}", report_suffix(sampling)))?;
    Ok(())
}

fn sweep(cfg: &mut PipelineConfig, taus: &[f64], out: Option<&Path>, jobs: usize) -> Result<(), Failure> {
    let (_, cases) = load_dataset(cfg)?;
    let sal = load_saliency(cfg)?;
    let seg = load_segmentation(cfg, Sampling::ContextAware)?;
    let rows = run_threshold_sweep(cfg, &cases, &sal, &seg, taus, jobs).tag(Kind::Config)?;
    for r in &rows {
        match (&r.mean_dice, &r.error) {
            (Some(d), _) => println!("tau {}: mean dice {:.4}", r.tau, d),
            (None, Some(e)) => println!("tau {}: {e}", r.tau),
            (None, None) => {}
        }
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.reports.clone());
    write_text(&out.join("threshold_sweep.csv"), &sweep_csv(&rows, cfg.segmentation.num_classes))?;
    write_json(&out.join("threshold_sweep.json"), &rows)
}

fn ablate(cfg: &mut PipelineConfig, variants: &[String], out: Option<&Path>, jobs: usize) -> Result<(), Failure> {
    let variants = variants
        .iter()
        .map(|v| v.parse::<Variant>().map_err(Failure::from))
        .collect::<Result<Vec<_>, _>>()?;
    let (_, cases) = load_dataset(cfg)?;
    let runs = run_ablation(cfg, &cases, &variants, jobs)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.reports.clone());
    let classes = cfg.segmentation.num_classes;
    let mut csv = String::from("variant,description,mean_dice");
    for c in 1..classes {
        csv.push_str(&format!(",dice_{c}"));
    }
    csv.push('\n');
    for r in &runs {
        csv.push_str(&format!("{},{},{}", r.variant, r.variant.description(), r.report.mean_dice));
        for c in 1..classes as u8 {
            csv.push_str(&format!(",{}", r.report.class_dice(c).unwrap_or(f64::NAN)));
        }
        csv.push('\n');
        println!("{} ({}): mean dice {:.4}", r.variant, r.variant.description(), r.report.mean_dice);
        r.report.write(&out, &format!("ablation_{}", r.variant))?;
    }
    write_text(&out.join("ablation.csv"), &csv)
}

fn bench(cfg: &mut PipelineConfig, repeat: usize, passes: usize, out: Option<&Path>, jobs: usize) -> Result<(), Failure> {
    if repeat == 0 || passes == 0 {
        return Err(Failure::new(Kind::Config, anyhow!("--repeat and --passes must be positive")));
    }
    let (_, cases) = load_dataset(cfg)?;
    let sal = load_saliency(cfg)?;
    let seg = load_segmentation(cfg, Sampling::ContextAware)?;
    let (ntrain, _) = split(cfg, &cases);
    let tau = cfg.sampler.threshold;
    let b = benchmark(cfg, ntrain, &cases[ntrain].volume, &sal, &seg, tau, repeat)?;
    for s in &b.stages {
        println!(
            "{}: {:.4}s ± {:.4}s, peak {:.0} bytes",
            s.stage, s.wall_s, s.wall_s_std, s.peak_bytes
        );
    }
    println!(
        "dense {}-wide feature buffer: {} bytes",
        b.feature_width, b.dense_buffer_bytes
    );
    let out: PathBuf = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.reports.clone());
    write_text(&out.join("bench.csv"), &bench_csv(&b.rows))?;
    write_json(&out.join("bench.json"), &b)?;

    let mut report = evaluate_holdout(cfg, &cases, Some(&sal), &seg, Sampling::ContextAware, tau, jobs)?;
    report.stages = b.stages.clone();
    let ca = IterationDice {
        iterations: 1,
        coverage: cfg.sampler.points as f64 / voxel_count(cases[ntrain].volume.dims()) as f64,
        mean_dice: report.mean_dice,
    };
    let random_ckpt = segmentation_checkpoint(&cfg.paths.checkpoints, Sampling::Random);
    if random_ckpt.exists() {
        let seg_r = load_segmentation(cfg, Sampling::Random)?;
        let series = random_pass_series(cfg, &cases, &seg_r, passes, jobs)?;
        for s in &series {
            println!(
                "random x{}: coverage {:.3}, mean dice {:.4}",
                s.iterations, s.coverage, s.mean_dice
            );
        }
        println!("context-aware x1: mean dice {:.4}", ca.mean_dice);
        write_text(&out.join("series.csv"), &series_csv(&ca, &series))?;
        report.iterations = std::iter::once(ca).chain(series).collect();
    } else {
        eprintln!(
            "{} not found; skipping the random-pass series",
            random_ckpt.display()
        );
        report.iterations = vec![ca];
    }
    report.write(&out, "bench_report")?;
    Ok(())
}
