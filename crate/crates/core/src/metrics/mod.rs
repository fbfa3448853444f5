//! Dice and HD95 scores, the report types, and the experiment drivers built on
//! them (threshold sweep, ablation, multi-pass series, benchmark).
//!
//! ```
//! use pointunet::metrics::{dice, hd95};
//! use pointunet::volume::LabelVolume;
//!
//! let mut a = vec![0u8; 27];
//! let mut b = vec![0u8; 27];
//! a[0] = 1;
//! a[1] = 1;
//! b[0] = 1;
//! let a = LabelVolume::new([3, 3, 3], 2, a).unwrap();
//! let b = LabelVolume::new([3, 3, 3], 2, b).unwrap();
//! assert!((dice(&a, &b, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
//! assert_eq!(hd95(&a, &b, 1, [1.0; 3]).unwrap(), Some(0.95));
//! ```

mod experiments;
mod memory;
mod report;

pub use experiments::{
    bench_csv, benchmark, dense_feature_bytes, AblationRun, BENCH_STAGES, evaluate_holdout, random_pass_series, run_ablation,
    run_threshold_sweep, series_csv, sweep_csv, BenchRow, Benchmark, SweepRow, Variant,
};
pub use memory::{current_bytes, measure_peak, tracking_active, TrackingAllocator};
pub use report::{ClassScore, ClassSummary, EmptyFlag, IterationDice, MetricsReport, StageStats};

use crate::error::{Error, Result};
use crate::knn::{KdTree, Point};
use crate::par::par_map;
use crate::volume::{coord_of, LabelVolume};

fn check_pair(pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::InvalidArgument(format!(
            "prediction dims {:?} differ from truth dims {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)` for the voxels of `class`. Both sets empty scores 1,
/// exactly one empty scores 0.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    check_pair(pred, truth)?;
    dice_labels(pred.labels(), truth.labels(), class)
}

/// [`dice`] over two equally long label sequences, such as per-point labels.
pub fn dice_labels(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted labels for {} true ones",
            pred.len(),
            truth.len()
        )));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (ip, it) = (p == class, t == class);
        a += usize::from(ip);
        b += usize::from(it);
        both += usize::from(ip && it);
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// The `q`-th percentile (0..=100) with inclusive linear interpolation: rank
/// `q/100 * (n-1)` in the sorted values, interpolated between neighbours.
/// `None` for an empty slice.
pub fn percentile_inclusive(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Distance from every point of `from` to its nearest point of `to`.
pub fn directed_distances(from: &[Point], to: &[Point]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.iter()
        .map(|&p| tree.nearest(p).map_or(f64::INFINITY, |(d2, _)| d2.sqrt()))
        .collect()
}

/// Symmetric HD95 between two point sets: the larger of the two directed 95th
/// percentiles. `None` when either set is empty.
pub fn hd95_points(a: &[Point], b: &[Point]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let ab = percentile_inclusive(&directed_distances(a, b), 95.0)?;
    let ba = percentile_inclusive(&directed_distances(b, a), 95.0)?;
    Some(ab.max(ba))
}

/// Millimetre positions of the voxels labelled `class`.
pub fn class_points(labels: &LabelVolume, class: u8, spacing: [f64; 3]) -> Vec<Point> {
    let dims = labels.dims();
    labels
        .voxels_of(class)
        .into_iter()
        .map(|v| {
            let c = coord_of(dims, v);
            [c[0] as f64 * spacing[0], c[1] as f64 * spacing[1], c[2] as f64 * spacing[2]]
        })
        .collect()
}

/// HD95 in millimetres between the `class` voxels of `pred` and `truth`;
/// `None` (undefined) when either set is empty.
pub fn hd95(pred: &LabelVolume, truth: &LabelVolume, class: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_pair(pred, truth)?;
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(hd95_points(&class_points(pred, class, spacing), &class_points(truth, class, spacing)))
}

/// Scores every foreground class of one case.
pub fn score_case(case: &str, pred: &LabelVolume, truth: &LabelVolume, spacing: [f64; 3]) -> Result<Vec<ClassScore>> {
    (1..truth.num_classes() as u8)
        .map(|c| score_class(case, pred, truth, c, spacing))
        .collect()
}

pub fn score_class(case: &str, pred: &LabelVolume, truth: &LabelVolume, class: u8, spacing: [f64; 3]) -> Result<ClassScore> {
    let d = dice(pred, truth, class)?;
    let h = hd95(pred, truth, class, spacing)?;
    let pred_voxels = pred.labels().iter().filter(|&&l| l == class).count();
    let truth_voxels = truth.labels().iter().filter(|&&l| l == class).count();
    Ok(ClassScore {
        case: case.to_string(),
        class,
        dice: d,
        hd95: h,
        flag: EmptyFlag::of(pred_voxels, truth_voxels),
    })
}

/// One evaluated case: name, prediction, truth, voxel spacing.
pub type ScoredPair<'a> = (&'a str, &'a LabelVolume, &'a LabelVolume, [f64; 3]);

/// Scores all `(case, foreground class)` pairs, spread over `jobs` threads.
/// Output order is case-major regardless of `jobs`.
pub fn score_cases(cases: &[ScoredPair<'_>], jobs: usize) -> Result<Vec<ClassScore>> {
    let mut tasks = Vec::new();
    for (i, (_, pred, truth, _)) in cases.iter().enumerate() {
        check_pair(pred, truth)?;
        tasks.extend((1..truth.num_classes() as u8).map(|c| (i, c)));
    }
    par_map(&tasks, jobs, |&(i, c)| {
        let (name, pred, truth, spacing) = cases[i];
        score_class(name, pred, truth, c, spacing)
    })
}
