//! The two-stage pipeline wired end to end: phantom dataset, saliency
//! training, context-aware sampling, point network training and single-pass
//! inference.
//!
//! Every seed is derived from [`PipelineConfig::seed`]; the `seed` fields of
//! the nested configurations are overwritten.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointseg::{train_segmentation, ClassProbabilities, PointSegConfig, PointSegNet};
use crate::rng::derive;
use crate::saliency::{train_saliency, SaliencyConfig, SaliencyMap, SaliencyNet};
use crate::sampling::{
    context_aware_sample, fuse_to_volume, random_sample, FusePolicy, PointCloud, SamplerConfig,
};
use crate::tensor::ParamStore;
use crate::train::{EpochStats, TrainConfig};
use crate::volume::{generate_phantom, LabelVolume, PhantomSpec, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub volumes: usize,
    /// The last `holdout` volumes are never trained on.
    pub holdout: usize,
    pub phantom: PhantomSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            volumes: 16,
            holdout: 4,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream; required.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub saliency: SaliencyConfig,
    #[serde(default = "saliency_training")]
    pub saliency_training: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub segmentation: PointSegConfig,
    #[serde(default = "segmentation_training")]
    pub segmentation_training: TrainConfig,
}

fn saliency_training() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        lr: 0.05,
        ..TrainConfig::default()
    }
}

fn segmentation_training() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        lr: 0.3,
        ..TrainConfig::default()
    }
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        PipelineConfig {
            seed,
            paths: Paths::default(),
            dataset: DatasetConfig::default(),
            saliency: SaliencyConfig::default(),
            saliency_training: saliency_training(),
            sampler: SamplerConfig::default(),
            segmentation: PointSegConfig::default(),
            segmentation_training: segmentation_training(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.holdout == 0 || d.holdout >= d.volumes {
            return Err(Error::Config(format!(
                "dataset needs 1..{} holdout volumes, got {}",
                d.volumes, d.holdout
            )));
        }
        d.phantom.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.saliency.validate()?;
        self.saliency.check_dims(d.phantom.dims).map_err(|e| Error::Config(e.to_string()))?;
        self.saliency_training.validate()?;
        self.sampler.validate()?;
        self.segmentation.validate()?;
        self.segmentation.check_points(self.sampler.points).map_err(|e| Error::Config(e.to_string()))?;
        self.segmentation_training.validate()?;
        if self.saliency.in_channels != d.phantom.channels || self.segmentation.in_features != d.phantom.channels {
            return Err(Error::Config(format!(
                "phantoms have {} channels; saliency expects {}, segmentation {}",
                d.phantom.channels, self.saliency.in_channels, self.segmentation.in_features
            )));
        }
        if self.segmentation.num_classes != d.phantom.num_classes {
            return Err(Error::Config(format!(
                "phantoms have {} classes, segmentation predicts {}",
                d.phantom.num_classes, self.segmentation.num_classes
            )));
        }
        Ok(())
    }

    fn stream(&self, tag: u64) -> u64 {
        derive(self.seed, tag)
    }

    /// Sampler settings for case `index`, at threshold `tau`.
    pub fn sampler_for(&self, index: usize, tau: f64) -> SamplerConfig {
        SamplerConfig {
            threshold: tau,
            seed: derive(self.stream(3), index as u64),
            ..self.sampler.clone()
        }
    }
}

/// One phantom volume with its ground truth.
#[derive(Clone, Debug)]
pub struct Case {
    pub name: String,
    pub volume: Volume,
    pub labels: LabelVolume,
}

pub fn case_name(index: usize) -> String {
    format!("case_{index:03}")
}

/// Generates the phantom dataset; the first `volumes - holdout` cases train.
pub fn generate_dataset(cfg: &PipelineConfig) -> Result<Vec<Case>> {
    (0..cfg.dataset.volumes)
        .map(|i| {
            let spec = PhantomSpec {
                seed: derive(cfg.stream(1), i as u64),
                ..cfg.dataset.phantom.clone()
            };
            let p = generate_phantom(&spec)?;
            Ok(Case {
                name: case_name(i),
                volume: p.volume,
                labels: p.labels,
            })
        })
        .collect()
}

pub fn split(cfg: &PipelineConfig, cases: &[Case]) -> (usize, usize) {
    let train = cases.len().saturating_sub(cfg.dataset.holdout);
    (train, cases.len() - train)
}

pub fn train_saliency_stage(
    cfg: &PipelineConfig,
    train: &[Case],
    mut after_epoch: impl FnMut(&EpochStats, &ParamStore) -> Result<()>,
) -> Result<(SaliencyNet, Vec<EpochStats>)> {
    let mut net = SaliencyNet::new(cfg.saliency.clone(), cfg.stream(10))?;
    let data: Vec<(Volume, LabelVolume)> = train.iter().map(|c| (c.volume.clone(), c.labels.clone())).collect();
    let tc = TrainConfig {
        seed: cfg.stream(11),
        ..cfg.saliency_training.clone()
    };
    let curve = train_saliency(&mut net, &data, &tc, &mut after_epoch)?;
    Ok((net, curve))
}

/// How the point clouds of a run are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Saliency-thresholded foreground plus random background.
    ContextAware,
    /// Uniform random voxels; every point is fused back.
    Random,
}

impl Sampling {
    pub fn fuse_policy(self) -> FusePolicy {
        match self {
            Sampling::ContextAware => FusePolicy::ForegroundOnly,
            Sampling::Random => FusePolicy::AllPoints,
        }
    }
}

/// The cloud for case `index`. Context-aware sampling needs `saliency`.
pub fn sample_case(
    cfg: &PipelineConfig,
    index: usize,
    volume: &Volume,
    saliency: Option<&SaliencyMap>,
    sampling: Sampling,
    tau: f64,
) -> Result<PointCloud> {
    let sc = cfg.sampler_for(index, tau);
    match (sampling, saliency) {
        (Sampling::ContextAware, Some(sal)) => context_aware_sample(volume, sal, &sc),
        (Sampling::ContextAware, None) => Err(Error::InvalidArgument(
            "context-aware sampling needs a saliency map".into(),
        )),
        (Sampling::Random, _) => random_sample(volume, &sc),
    }
}

pub fn train_segmentation_stage(
    cfg: &PipelineConfig,
    seg: PointSegConfig,
    clouds: &[PointCloud],
    after_epoch: impl FnMut(&EpochStats, &ParamStore) -> Result<()>,
) -> Result<(PointSegNet, Vec<EpochStats>)> {
    let mut net = PointSegNet::new(seg, cfg.stream(20))?;
    let tc = TrainConfig {
        seed: cfg.stream(21),
        ..cfg.segmentation_training.clone()
    };
    let curve = train_segmentation(&mut net, clouds, &tc, after_epoch)?;
    Ok((net, curve))
}

/// Everything a single inference pass produces.
#[derive(Clone, Debug)]
pub struct Inference {
    pub saliency: Option<SaliencyMap>,
    pub cloud: PointCloud,
    pub probs: ClassProbabilities,
    pub labels: LabelVolume,
}

/// One saliency forward (context-aware only), one sampling draw, one point
/// network forward, then fuse back.
pub fn infer_case(
    cfg: &PipelineConfig,
    index: usize,
    volume: &Volume,
    saliency: Option<&SaliencyNet>,
    seg: &PointSegNet,
    sampling: Sampling,
    tau: f64,
) -> Result<Inference> {
    let map = match (sampling, saliency) {
        (Sampling::ContextAware, Some(net)) => Some(net.predict(volume)?),
        (Sampling::ContextAware, None) => {
            return Err(Error::InvalidArgument("context-aware inference needs a saliency network".into()))
        }
        (Sampling::Random, _) => None,
    };
    let mut cloud = sample_case(cfg, index, volume, map.as_ref(), sampling, tau)?;
    let probs = seg.predict(&cloud)?;
    cloud.set_labels(probs.argmax())?;
    let labels = fuse_to_volume(&cloud, seg.config().num_classes, sampling.fuse_policy())?;
    Ok(Inference {
        saliency: map,
        cloud,
        probs,
        labels,
    })
}

/// Labelled training clouds for the first `cases.len()` indices, drawn at the
/// configured threshold.
pub fn training_clouds(
    cfg: &PipelineConfig,
    cases: &[Case],
    saliency: Option<&SaliencyNet>,
    sampling: Sampling,
) -> Result<Vec<PointCloud>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let map = match (sampling, saliency) {
                (Sampling::ContextAware, Some(net)) => Some(net.predict(&c.volume)?),
                _ => None,
            };
            sample_case(cfg, i, &c.volume, map.as_ref(), sampling, cfg.sampler.threshold)?.with_labels(&c.labels)
        })
        .collect()
}

/// Both trained stages of one run. Random sampling needs no saliency network.
#[derive(Clone, Debug)]
pub struct Trained {
    pub saliency: Option<SaliencyNet>,
    pub saliency_curve: Vec<EpochStats>,
    pub segmentation: PointSegNet,
    pub segmentation_curve: Vec<EpochStats>,
}

/// Trains the saliency network (context-aware only) and then the point network
/// on clouds drawn from the training cases.
pub fn train_pipeline(cfg: &PipelineConfig, cases: &[Case], sampling: Sampling, seg: PointSegConfig) -> Result<Trained> {
    let (ntrain, _) = split(cfg, cases);
    let train = &cases[..ntrain];
    let (saliency, saliency_curve) = match sampling {
        Sampling::ContextAware => {
            let (net, curve) = train_saliency_stage(cfg, train, |_, _| Ok(()))?;
            (Some(net), curve)
        }
        Sampling::Random => (None, Vec::new()),
    };
    let clouds = training_clouds(cfg, train, saliency.as_ref(), sampling)?;
    let (segmentation, segmentation_curve) = train_segmentation_stage(cfg, seg, &clouds, |_, _| Ok(()))?;
    Ok(Trained {
        saliency,
        saliency_curve,
        segmentation,
        segmentation_curve,
    })
}
