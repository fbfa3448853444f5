//! Index bookkeeping for one cloud: neighbours, subsampling and upsampling
//! indices at every encoder level. Computed once per cloud and reused by every
//! forward pass.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::knn::{build_knn, dist2, KdTree, NeighborIndex, Point};
use crate::rng::{derive, splitmix64};
use crate::sampling::PointCloud;
use crate::tensor::Tensor;

use super::PointSegConfig;

/// Channels of the raw relative geometry: `x_i`, `x_k`, `x_i - x_k`, `|x_i - x_k|`.
pub const GEO_CHANNELS: usize = 10;

#[derive(Clone, Debug)]
pub struct LevelPlan {
    pub positions: Vec<Point>,
    /// Flat voxel index of every point; drives the subsampling hash.
    pub keys: Vec<usize>,
    pub knn: NeighborIndex,
    /// Rows kept for the next level, in increasing order.
    pub keep: Vec<usize>,
    /// For every point, the row of its nearest kept point.
    pub up: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CloudPlan {
    pub levels: Vec<LevelPlan>,
}

/// Keeps the `m` points with the smallest seeded hash of their voxel index
/// and returns their rows in increasing order. The kept set depends only on
/// which voxels are present, not on their order.
pub fn subsample(keys: &[usize], m: usize, seed: u64) -> Vec<usize> {
    let mut ranked: Vec<(u64, usize, usize)> = keys
        .iter()
        .enumerate()
        .map(|(row, &k)| (splitmix64(seed ^ k as u64), k, row))
        .collect();
    let m = m.min(ranked.len());
    if m < ranked.len() {
        ranked.select_nth_unstable(m);
    }
    let mut rows: Vec<usize> = ranked[..m].iter().map(|r| r.2).collect();
    rows.sort_unstable();
    rows
}

impl CloudPlan {
    pub fn new(pc: &PointCloud, cfg: &PointSegConfig) -> Result<Self> {
        cfg.check_points(pc.len())?;
        let mut positions = pc.normalized_coords();
        let mut keys = pc.voxel_indices();
        let mut levels = Vec::with_capacity(cfg.ratios.len());
        for (l, &ratio) in cfg.ratios.iter().enumerate() {
            let knn = build_knn(&positions, cfg.k)?;
            let keep = if ratio == 1 {
                (0..positions.len()).collect()
            } else {
                subsample(&keys, positions.len() / ratio, derive(cfg.subsample_seed, l as u64))
            };
            let next: Vec<Point> = keep.iter().map(|&i| positions[i]).collect();
            let tree = KdTree::new(&next);
            let up = positions
                .iter()
                .map(|&q| tree.nearest(q).map(|(_, i)| i))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::InvalidArgument("subsampling left no points".into()))?;
            let next_keys = keep.iter().map(|&i| keys[i]).collect();
            levels.push(LevelPlan {
                positions: std::mem::replace(&mut positions, next),
                keys: std::mem::replace(&mut keys, next_keys),
                knn,
                keep,
                up,
            });
        }
        Ok(CloudPlan { levels })
    }

    /// Point count entering every level.
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.positions.len()).collect()
    }
}

/// Raw relative geometry `[m * K, 10]` for the points in `rows`.
pub fn relative_geometry(positions: &[Point], knn: &NeighborIndex, rows: Range<usize>) -> Result<Tensor> {
    if knn.len() != positions.len() || rows.end > positions.len() {
        return Err(Error::shape(
            "relative_geometry",
            format!("{} positions, {} neighbour lists, rows {rows:?}", positions.len(), knn.len()),
        ));
    }
    let mut out = Vec::with_capacity(rows.len() * knn.k() * GEO_CHANNELS);
    for i in rows.clone() {
        let xi = positions[i];
        for &j in knn.neighbors(i) {
            let xk = positions[j];
            out.extend_from_slice(&xi);
            out.extend_from_slice(&xk);
            out.extend((0..3).map(|a| xi[a] - xk[a]));
            out.push(dist2(xi, xk).sqrt());
        }
    }
    Tensor::from_vec(vec![rows.len() * knn.k(), GEO_CHANNELS], out)
}

/// Relative geometry concatenated with the neighbour features, `[N, K, 10 + F]`.
/// `feats` is `[N, F]`.
pub fn local_spatial_encoding(positions: &[Point], knn: &NeighborIndex, feats: &Tensor) -> Result<Tensor> {
    let n = positions.len();
    let s = feats.shape();
    if s.len() != 2 || s[0] != n {
        return Err(Error::shape("local_spatial_encoding", format!("{n} points, features {s:?}")));
    }
    let f = s[1];
    let k = knn.k();
    let geo = relative_geometry(positions, knn, 0..n)?;
    let mut out = Vec::with_capacity(n * k * (GEO_CHANNELS + f));
    for (row, g) in geo.data().chunks(GEO_CHANNELS).enumerate() {
        let j = knn.indices()[row];
        out.extend_from_slice(g);
        out.extend_from_slice(&feats.data()[j * f..(j + 1) * f]);
    }
    Tensor::from_vec(vec![n, k, GEO_CHANNELS + f], out)
}
