//! Turning a volume into a point cloud and point labels back into a volume.
//!
//! [`context_aware_sample`] keeps every voxel whose saliency reaches the
//! threshold (foreground points) and fills the rest of the budget with a
//! uniform draw from the remaining voxels (background points). Because every
//! salient voxel is present exactly once, one pass of the segmentation network
//! labels the whole region of interest and [`fuse_to_volume`] writes the labels
//! back without any interpolation.
//!
//! ```
//! use pointunet::sampling::{context_aware_sample, fuse_to_volume, FusePolicy, SamplerConfig};
//! use pointunet::saliency::SaliencyMap;
//! use pointunet::volume::{generate_phantom, PhantomSpec};
//!
//! let p = generate_phantom(&PhantomSpec { seed: 3, ..PhantomSpec::default() })?;
//! let sal = SaliencyMap::from_mask(&p.labels);
//! let cfg = SamplerConfig { threshold: 0.5, points: 4096, seed: 1 };
//! let cloud = context_aware_sample(&p.volume, &sal, &cfg)?.with_labels(&p.labels)?;
//! let fused = fuse_to_volume(&cloud, 4, FusePolicy::ForegroundOnly)?;
//! assert_eq!(fused, p.labels);
//! # Ok::<(), pointunet::Error>(())
//! ```

mod format;

pub use format::{point_cloud_bytes, read_point_cloud, write_point_cloud};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, seeded};
use crate::saliency::SaliencyMap;
use crate::volume::{coord_of, flat_index, voxel_count, Dims, LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    /// Selected because its saliency reached the threshold.
    Foreground,
    /// Random context fill.
    Background,
}

/// Points at distinct voxels of a grid, with one feature row per point.
///
/// Coordinates are voxel indices in the crate's `[z, y, x]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dims: Dims,
    coords: Vec<[usize; 3]>,
    num_features: usize,
    feats: Vec<f64>,
    labels: Option<Vec<u8>>,
    origin: Vec<Origin>,
}

impl PointCloud {
    pub fn new(
        dims: Dims,
        coords: Vec<[usize; 3]>,
        num_features: usize,
        feats: Vec<f64>,
        labels: Option<Vec<u8>>,
        origin: Vec<Origin>,
    ) -> Result<Self> {
        let n = coords.len();
        if feats.len() != n * num_features || origin.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{n} points need {} features and {n} origin flags, got {} and {}",
                n * num_features,
                feats.len(),
                origin.len()
            )));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::InvalidArgument(format!("{n} points but a different number of labels")));
        }
        if feats.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidArgument("point features must be finite".into()));
        }
        let mut seen = vec![false; voxel_count(dims)];
        for c in &coords {
            if c.iter().zip(&dims).any(|(x, d)| x >= d) {
                return Err(Error::InvalidArgument(format!("point {c:?} outside dims {dims:?}")));
            }
            let v = flat_index(dims, *c);
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidArgument(format!("voxel {c:?} sampled twice")));
            }
        }
        Ok(PointCloud {
            dims,
            coords,
            num_features,
            feats,
            labels,
            origin,
        })
    }

    /// Cloud over the given flat voxel indices, with the volume's intensities
    /// as features.
    fn from_voxels(vol: &Volume, voxels: &[usize], origin: Vec<Origin>) -> Self {
        let f = vol.channels();
        let mut feats = Vec::with_capacity(voxels.len() * f);
        for &v in voxels {
            feats.extend(vol.features_at(v));
        }
        PointCloud {
            dims: vol.dims(),
            coords: voxels.iter().map(|&v| coord_of(vol.dims(), v)).collect(),
            num_features: f,
            feats,
            labels: None,
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn coords(&self) -> &[[usize; 3]] {
        &self.coords
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Row-major `N x F` features.
    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn origin(&self) -> &[Origin] {
        &self.origin
    }

    pub fn foreground_count(&self) -> usize {
        self.origin.iter().filter(|&&o| o == Origin::Foreground).count()
    }

    pub fn voxel_indices(&self) -> Vec<usize> {
        self.coords.iter().map(|&c| flat_index(self.dims, c)).collect()
    }

    /// Coordinates divided by the grid extent, so every axis lies in `[0, 1)`.
    pub fn normalized_coords(&self) -> Vec<[f64; 3]> {
        let d = self.dims.map(|x| x as f64);
        self.coords
            .iter()
            .map(|c| [c[0] as f64 / d[0], c[1] as f64 / d[1], c[2] as f64 / d[2]])
            .collect()
    }

    /// Attaches per-point labels.
    pub fn set_labels(&mut self, labels: Vec<u8>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} points",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// Copies ground-truth labels from a label grid onto the points.
    pub fn with_labels(mut self, truth: &LabelVolume) -> Result<Self> {
        if truth.dims() != self.dims {
            return Err(Error::InvalidArgument(format!(
                "labels {:?} vs cloud dims {:?}",
                truth.dims(),
                self.dims
            )));
        }
        let labels = self.voxel_indices().into_iter().map(|v| truth.get(v)).collect();
        self.labels = Some(labels);
        Ok(self)
    }

    /// Sub-cloud made of the points at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let f = self.num_features;
        let mut feats = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            feats.extend_from_slice(&self.feats[i * f..(i + 1) * f]);
        }
        PointCloud::new(
            self.dims,
            idx.iter().map(|&i| self.coords[i]).collect(),
            f,
            feats,
            self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            idx.iter().map(|&i| self.origin[i]).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Saliency threshold for foreground points.
    pub threshold: f64,
    /// Total point budget.
    pub points: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            threshold: 0.9,
            points: 4096,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "sampling threshold {} must lie strictly between 0 and 1",
                self.threshold
            )));
        }
        if self.points == 0 {
            return Err(Error::Config("point budget must be positive".into()));
        }
        Ok(())
    }

    fn check_budget(&self, dims: Dims) -> Result<()> {
        self.validate()?;
        let n = voxel_count(dims);
        if self.points > n {
            return Err(Error::InvalidArgument(format!(
                "point budget {} exceeds the {n} voxels of {dims:?}",
                self.points
            )));
        }
        Ok(())
    }
}

/// Voxels with saliency at or above `threshold`, in index order.
pub fn foreground_voxels(sal: &SaliencyMap, threshold: f64) -> Vec<usize> {
    (0..sal.prob().len()).filter(|&v| sal.prob()[v] >= threshold).collect()
}

/// Every voxel at or above the threshold plus a uniform background fill, for
/// exactly `cfg.points` points. Foreground points come first; both groups are
/// in voxel index order.
pub fn context_aware_sample(vol: &Volume, sal: &SaliencyMap, cfg: &SamplerConfig) -> Result<PointCloud> {
    if sal.dims() != vol.dims() {
        return Err(Error::InvalidArgument(format!(
            "saliency dims {:?} vs volume dims {:?}",
            sal.dims(),
            vol.dims()
        )));
    }
    cfg.check_budget(vol.dims())?;
    let fg = foreground_voxels(sal, cfg.threshold);
    if fg.len() > cfg.points {
        return Err(Error::ForegroundOverflow {
            fg: fg.len(),
            budget: cfg.points,
        });
    }
    let mut is_fg = vec![false; vol.voxel_count()];
    for &v in &fg {
        is_fg[v] = true;
    }
    let rest: Vec<usize> = (0..vol.voxel_count()).filter(|&v| !is_fg[v]).collect();
    let mut bg = draw(&rest, cfg.points - fg.len(), cfg.seed);
    bg.sort_unstable();
    let mut origin = vec![Origin::Foreground; fg.len()];
    origin.resize(cfg.points, Origin::Background);
    let mut voxels = fg;
    voxels.extend(bg);
    Ok(PointCloud::from_voxels(vol, &voxels, origin))
}

/// `amount` distinct elements of `pool`, uniformly.
fn draw(pool: &[usize], amount: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed);
    index::sample(&mut rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Uniform sample of `cfg.points` voxels without replacement, all marked as
/// background. The threshold is ignored.
pub fn random_sample(vol: &Volume, cfg: &SamplerConfig) -> Result<PointCloud> {
    Ok(random_passes(vol, cfg, 1)?.remove(0))
}

/// Successive random clouds for multi-pass inference. Pass `m` draws from the
/// voxels no earlier pass covered, with a seed derived from `cfg.seed` and
/// `m`; the last pass may be smaller when fewer voxels remain. Stops early once
/// every voxel is covered.
pub fn random_passes(vol: &Volume, cfg: &SamplerConfig, passes: usize) -> Result<Vec<PointCloud>> {
    cfg.check_budget(vol.dims())?;
    if passes == 0 {
        return Err(Error::InvalidArgument("at least one pass is required".into()));
    }
    let mut covered = vec![false; vol.voxel_count()];
    let mut out = Vec::new();
    for m in 0..passes {
        let pool: Vec<usize> = (0..covered.len()).filter(|&v| !covered[v]).collect();
        if pool.is_empty() {
            break;
        }
        let seed = if m == 0 { cfg.seed } else { derive(cfg.seed, m as u64) };
        let mut voxels = draw(&pool, cfg.points.min(pool.len()), seed);
        voxels.sort_unstable();
        for &v in &voxels {
            covered[v] = true;
        }
        out.push(PointCloud::from_voxels(vol, &voxels, vec![Origin::Background; voxels.len()]));
    }
    Ok(out)
}

/// Which points write their label into the fused volume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusePolicy {
    /// Only foreground-origin points; the context-aware pipeline.
    #[default]
    ForegroundOnly,
    /// Every point; needed for purely random clouds.
    AllPoints,
}

/// Writes point labels into a zero label grid. Voxels without a contributing
/// point stay background.
pub fn fuse_to_volume(pc: &PointCloud, num_classes: usize, policy: FusePolicy) -> Result<LabelVolume> {
    fuse_many(std::slice::from_ref(pc), num_classes, policy)
}

/// Fuses several clouds of one grid. A voxel keeps the label of the first
/// cloud that covers it.
pub fn fuse_many(clouds: &[PointCloud], num_classes: usize, policy: FusePolicy) -> Result<LabelVolume> {
    let dims = clouds
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?
        .dims;
    let mut out = vec![0u8; voxel_count(dims)];
    let mut written = vec![false; out.len()];
    for pc in clouds {
        if pc.dims != dims {
            return Err(Error::InvalidArgument("clouds of different grids".into()));
        }
        let labels = pc
            .labels()
            .ok_or_else(|| Error::InvalidArgument("cloud has no labels to fuse".into()))?;
        let mut seen = vec![false; out.len()];
        for ((&c, &l), &o) in pc.coords.iter().zip(labels).zip(&pc.origin) {
            let v = flat_index(dims, c);
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidArgument(format!("duplicate point at {c:?}")));
            }
            if policy == FusePolicy::ForegroundOnly && o != Origin::Foreground {
                continue;
            }
            if !std::mem::replace(&mut written[v], true) {
                out[v] = l;
            }
        }
    }
    LabelVolume::new(dims, num_classes, out)
}
