//! Dense multi-channel volumes, label grids, their file formats, and a
//! synthetic phantom generator.

mod format;
mod phantom;

pub use format::{read_case, read_labels, read_volume, write_labels, write_volume, labels_bytes, volume_bytes};
pub use phantom::{generate_phantom, Ellipsoid, Phantom, PhantomSpec};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

/// Multi-channel scalar grid. `data` is channel-major, then z, y, x.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(channels: usize, dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if channels == 0 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "volume needs positive channels and dims, got {channels} x {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::InvalidArgument(format!(
                "{} values for {channels} channels of {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("volume intensities must be finite".into()));
        }
        Ok(Volume {
            channels,
            dims,
            spacing,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    /// Intensities of every channel at flat voxel index `v`.
    pub fn features_at(&self, v: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.voxel_count();
        (0..self.channels).map(move |c| self.data[c * n + v])
    }
}

/// Per-voxel class ids in `[0, num_classes)`; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if !(1..=256).contains(&num_classes) {
            return Err(Error::InvalidArgument(format!("class count {num_classes} outside 1..=256")));
        }
        if labels.len() != voxel_count(dims) {
            return Err(Error::InvalidArgument(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} not below class count {num_classes}"
            )));
        }
        Ok(LabelVolume {
            dims,
            num_classes,
            labels,
        })
    }

    pub fn zeros(dims: Dims, num_classes: usize) -> Self {
        LabelVolume {
            dims,
            num_classes,
            labels: vec![0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, v: usize) -> u8 {
        self.labels[v]
    }

    pub(crate) fn set(&mut self, v: usize, label: u8) {
        debug_assert!((label as usize) < self.num_classes);
        self.labels[v] = label;
    }

    /// Binary mask of every non-background voxel.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Number of voxels per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Flat indices of voxels carrying `class`.
    pub fn voxels_of(&self, class: u8) -> Vec<usize> {
        (0..self.labels.len()).filter(|&v| self.labels[v] == class).collect()
    }
}

pub fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

pub fn flat_index(dims: Dims, [z, y, x]: [usize; 3]) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

pub fn coord_of(dims: Dims, v: usize) -> [usize; 3] {
    let x = v % dims[2];
    let y = (v / dims[2]) % dims[1];
    let z = v / (dims[1] * dims[2]);
    [z, y, x]
}

/// Millimetre position of a voxel index.
pub fn voxel_to_world(coord: [usize; 3], dims: Dims, spacing: [f64; 3]) -> Result<[f64; 3]> {
    if coord.iter().zip(&dims).any(|(c, d)| c >= d) {
        return Err(Error::InvalidArgument(format!(
            "voxel {coord:?} outside dims {dims:?}"
        )));
    }
    Ok([
        coord[0] as f64 * spacing[0],
        coord[1] as f64 * spacing[1],
        coord[2] as f64 * spacing[2],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_coordinates() {
        assert_eq!(voxel_to_world([0, 0, 0], [4, 4, 4], [0.7, 1.1, 3.0]).unwrap(), [0.0; 3]);
        assert_eq!(voxel_to_world([1, 2, 3], [4, 4, 4], [1.0; 3]).unwrap(), [1.0, 2.0, 3.0]);
        assert_eq!(voxel_to_world([2, 2, 2], [4, 4, 4], [0.5, 0.5, 2.5]).unwrap(), [1.0, 1.0, 5.0]);
        assert!(voxel_to_world([4, 0, 0], [4, 4, 4], [1.0; 3]).is_err());
    }

    #[test]
    fn index_round_trip() {
        let dims = [3, 5, 7];
        for v in 0..voxel_count(dims) {
            assert_eq!(flat_index(dims, coord_of(dims, v)), v);
        }
    }

    #[test]
    fn validation() {
        assert!(Volume::new(1, [2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new(1, [2, 2, 2], [0.0, 1.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume::new(1, [2, 2, 2], [1.0; 3], vec![f64::NAN; 8]).is_err());
        assert!(LabelVolume::new([2, 1, 1], 2, vec![0, 2]).is_err());
        assert_eq!(LabelVolume::new([2, 1, 1], 3, vec![0, 2]).unwrap().histogram(), vec![1, 0, 1]);
    }
}
