use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Which of the two voxel sets was empty, if any. Empty sets make Dice a
/// convention and HD95 undefined, so reports carry the flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyFlag {
    None,
    BothEmpty,
    PredEmpty,
    TruthEmpty,
}

impl EmptyFlag {
    pub fn of(pred_voxels: usize, truth_voxels: usize) -> Self {
        match (pred_voxels == 0, truth_voxels == 0) {
            (false, false) => EmptyFlag::None,
            (true, true) => EmptyFlag::BothEmpty,
            (true, false) => EmptyFlag::PredEmpty,
            (false, true) => EmptyFlag::TruthEmpty,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            EmptyFlag::None => "",
            EmptyFlag::BothEmpty => "both_empty",
            EmptyFlag::PredEmpty => "pred_empty",
            EmptyFlag::TruthEmpty => "truth_empty",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub case: String,
    pub class: u8,
    pub dice: f64,
    /// Millimetres; `None` when either set is empty.
    pub hd95: Option<f64>,
    pub flag: EmptyFlag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: u8,
    pub mean_dice: f64,
    /// Mean over the cases where HD95 is defined.
    pub mean_hd95: Option<f64>,
    pub hd95_undefined: usize,
}

/// Wall time and heap high-water mark of one pipeline stage, averaged over
/// the benchmark runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub runs: usize,
    pub wall_s: f64,
    pub wall_s_std: f64,
    pub peak_bytes: f64,
}

/// Holdout score after `iterations` fused random passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationDice {
    pub iterations: usize,
    /// Fraction of voxels some pass has labelled.
    pub coverage: f64,
    pub mean_dice: f64,
}

/// Scores of one evaluation. `stages` is filled by the benchmark only and
/// `iterations` by multi-pass runs, so plain evaluations are reproducible
/// byte for byte.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scores: Vec<ClassScore>,
    pub per_class: Vec<ClassSummary>,
    /// Mean of the per-class mean Dice over foreground classes.
    pub mean_dice: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterations: Vec<IterationDice>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    pub fn from_scores(scores: Vec<ClassScore>) -> Self {
        let mut classes: Vec<u8> = scores.iter().map(|s| s.class).collect();
        classes.sort_unstable();
        classes.dedup();
        let per_class: Vec<ClassSummary> = classes
            .into_iter()
            .map(|c| {
                let of = || scores.iter().filter(move |s| s.class == c);
                ClassSummary {
                    class: c,
                    mean_dice: mean(of().map(|s| s.dice)).unwrap_or(0.0),
                    mean_hd95: mean(of().filter_map(|s| s.hd95)),
                    hd95_undefined: of().filter(|s| s.hd95.is_none()).count(),
                }
            })
            .collect();
        let mean_dice = mean(per_class.iter().map(|c| c.mean_dice)).unwrap_or(0.0);
        MetricsReport {
            scores,
            per_class,
            mean_dice,
            stages: Vec::new(),
            iterations: Vec::new(),
        }
    }

    /// Mean Dice of one class, if it was scored.
    pub fn class_dice(&self, class: u8) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class).map(|c| c.mean_dice)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::Error::InvalidArgument(format!("report json: {e}")))
    }

    /// One row per case and class, then a `mean` summary row. Undefined HD95
    /// is an empty cell.
    pub fn to_csv(&self) -> String {
        let cell = |h: Option<f64>| h.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("case,class,dice,hd95,flag\n");
        for s in &self.scores {
            let _ = writeln!(out, "{},{},{},{},{}", s.case, s.class, s.dice, cell(s.hd95), s.flag.as_str());
        }
        let hd = mean(self.per_class.iter().filter_map(|c| c.mean_hd95));
        let _ = writeln!(out, "mean,all,{},{},", self.mean_dice, cell(hd));
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`, creating it.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}
