//! Synthetic multi-modality volumes with nested ellipsoidal lesions.
//!
//! Class 1 ellipsoids are placed in the grid; every class `l > 1` gets one
//! ellipsoid strictly inside each class `l - 1` ellipsoid, so inner classes are
//! smaller and contained in outer ones. A voxel takes the innermost class whose
//! ellipsoid contains it.
//!
//! Class `l` in channel `c` has mean intensity `((l + c) mod C) / (C - 1)`, so
//! any two classes differ by at least `1 / (C - 1)` in every channel. Gaussian
//! noise with standard deviation `noise` is added on top.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{coord_of, voxel_count, Dims, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub channels: usize,
    /// Class count including background.
    pub num_classes: usize,
    /// Inclusive range for the number of outermost lesions.
    pub lesions: (usize, usize),
    /// Inclusive range of per-axis radii (voxels) of outermost ellipsoids.
    pub outer_radius: (f64, f64),
    /// Inclusive range of the inner/outer radius ratio between nested classes.
    pub inner_scale: (f64, f64),
    /// 0 centres every ellipsoid; 1 lets it move anywhere it still fits.
    pub center_jitter: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            channels: 4,
            num_classes: 4,
            lesions: (1, 1),
            outer_radius: (5.0, 8.0),
            inner_scale: (0.55, 0.7),
            center_jitter: 1.0,
            noise: 0.08,
            spacing: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub class: u8,
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub ellipsoids: Vec<Ellipsoid>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes < 2 {
            return bad(format!("phantom needs at least 2 classes, got {}", self.num_classes));
        }
        if self.num_classes > 256 || self.channels == 0 {
            return bad("phantom needs 1.. channels and at most 256 classes".into());
        }
        if self.lesions.0 == 0 || self.lesions.0 > self.lesions.1 {
            return bad(format!("lesion count range {:?}", self.lesions));
        }
        let (r0, r1) = self.outer_radius;
        if !(r0 >= 1.0 && r0 <= r1) {
            return bad(format!("outer radius range {:?}", self.outer_radius));
        }
        let (s0, s1) = self.inner_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 < 1.0) {
            return bad(format!("inner scale range {:?}", self.inner_scale));
        }
        if !(0.0..=1.0).contains(&self.center_jitter) || !(self.noise >= 0.0) {
            return bad("center_jitter must be in [0, 1] and noise non-negative".into());
        }
        if self.dims.iter().any(|&d| 2.0 * r1 > (d as f64 - 1.0)) {
            return bad(format!(
                "ellipsoid of radius {r1} cannot fit inside dims {:?}",
                self.dims
            ));
        }
        let separation = 1.0 / (self.num_classes - 1) as f64;
        if separation < 2.0 * self.noise {
            return bad(format!(
                "class mean separation {separation:.3} is below twice the noise std {}",
                self.noise
            ));
        }
        Ok(())
    }

    pub fn class_mean(&self, class: usize, channel: usize) -> f64 {
        ((class + channel) % self.num_classes) as f64 / (self.num_classes - 1) as f64
    }
}

fn place(spec: &PhantomSpec, rng: &mut Rng) -> Vec<Ellipsoid> {
    let mut out = Vec::new();
    let count = rng.gen_range(spec.lesions.0..=spec.lesions.1);
    for _ in 0..count {
        let radii: [f64; 3] = std::array::from_fn(|_| rng.gen_range(spec.outer_radius.0..=spec.outer_radius.1));
        let center = std::array::from_fn(|i| {
            let mid = (spec.dims[i] as f64 - 1.0) / 2.0;
            let slack = mid - radii[i];
            mid + spec.center_jitter * slack * rng.gen_range(-1.0..=1.0)
        });
        let mut parent = Ellipsoid {
            class: 1,
            center,
            radii,
        };
        out.push(parent.clone());
        for class in 2..spec.num_classes {
            let s = rng.gen_range(spec.inner_scale.0..=spec.inner_scale.1);
            // In the parent's unit-ball frame the child is a ball of radius s
            // centred at `dir * t`; it stays inside whenever t + s <= 1.
            let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
            let t = spec.center_jitter * (1.0 - s) * rng.gen_range(0.0..=0.9);
            let child = Ellipsoid {
                class: class as u8,
                center: std::array::from_fn(|i| parent.center[i] + dir[i] / norm * t * parent.radii[i]),
                radii: std::array::from_fn(|i| s * parent.radii[i]),
            };
            out.push(child.clone());
            parent = child;
        }
    }
    out
}

fn rasterize(dims: Dims, num_classes: usize, ellipsoids: &[Ellipsoid]) -> LabelVolume {
    let mut lab = LabelVolume::zeros(dims, num_classes);
    for v in 0..voxel_count(dims) {
        let c = coord_of(dims, v);
        let p = [c[0] as f64, c[1] as f64, c[2] as f64];
        let class = ellipsoids
            .iter()
            .filter(|e| e.contains(p))
            .map(|e| e.class)
            .max()
            .unwrap_or(0);
        lab.set(v, class);
    }
    lab
}

/// Generates a phantom. Output depends only on `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    const ATTEMPTS: usize = 32;
    for _ in 0..ATTEMPTS {
        let ellipsoids = place(spec, &mut rng);
        let labels = rasterize(spec.dims, spec.num_classes, &ellipsoids);
        if labels.histogram()[1..].iter().any(|&n| n == 0) {
            continue;
        }
        let n = voxel_count(spec.dims);
        let mut data = vec![0.0; spec.channels * n];
        for c in 0..spec.channels {
            for v in 0..n {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data[c * n + v] = spec.class_mean(labels.get(v) as usize, c) + spec.noise * noise;
            }
        }
        let volume = Volume::new(spec.channels, spec.dims, spec.spacing, data)?;
        return Ok(Phantom {
            volume,
            labels,
            ellipsoids,
        });
    }
    Err(Error::InvalidArgument(format!(
        "no placement in {ATTEMPTS} attempts gave every class at least one voxel"
    )))
}
