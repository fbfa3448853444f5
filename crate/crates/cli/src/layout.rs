//! Where each stage reads and writes.
//!
//! ```text
//! <data>/manifest.json              case names and holdout count
//! <data>/case_000.pvol, .plab       phantom volume and labels
//! <data>/clouds[_random]/           case_000.ppc, case_000.sal.pvol
//! <checkpoints>/saliency.ckpt
//! <checkpoints>/segmentation[_random].ckpt
//! <reports>/predictions[_random]/   case_012.pred.plab, infer.json
//! <reports>/*.json, *.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use pointunet::pipeline::{Case, PipelineConfig, Sampling};
use pointunet::pointseg::PointSegNet;
use pointunet::saliency::SaliencyNet;
use pointunet::tensor::read_checkpoint;
use pointunet::volume::read_case;
use serde::{Deserialize, Serialize};

use crate::failure::{Failure, Kind, Tag as _};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub cases: Vec<String>,
    /// The last `holdout` cases are never trained on.
    pub holdout: usize,
}

fn suffix(sampling: Sampling) -> &'static str {
    match sampling {
        Sampling::ContextAware => "",
        Sampling::Random => "_random",
    }
}

pub fn volume_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.pvol"))
}

pub fn labels_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.plab"))
}

pub fn cloud_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ppc"))
}

pub fn saliency_map_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.sal.pvol"))
}

pub fn prediction_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.pred.plab"))
}

pub fn clouds_dir(cfg: &PipelineConfig, sampling: Sampling) -> PathBuf {
    cfg.paths.data.join(format!("clouds{}", suffix(sampling)))
}

pub fn predictions_dir(cfg: &PipelineConfig, sampling: Sampling) -> PathBuf {
    cfg.paths.reports.join(format!("predictions{}", suffix(sampling)))
}

pub fn saliency_checkpoint(dir: &Path) -> PathBuf {
    dir.join("saliency.ckpt")
}

pub fn segmentation_checkpoint(dir: &Path, sampling: Sampling) -> PathBuf {
    dir.join(format!("segmentation{}.ckpt", suffix(sampling)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).tag(Kind::Other)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(cfg: &PipelineConfig) -> Result<Manifest, Failure> {
    let path = cfg.paths.data.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| anyhow!("{}: {e} (run gen-data first)", path.display()))
        .tag(Kind::Data)?;
    serde_json::from_str(&text)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
        .tag(Kind::Data)
}

/// Loads every case named in the manifest, and makes the config's split match
/// it.
pub fn load_dataset(cfg: &mut PipelineConfig) -> Result<(Manifest, Vec<Case>), Failure> {
    let manifest = read_manifest(cfg)?;
    cfg.dataset.volumes = manifest.cases.len();
    cfg.dataset.holdout = manifest.holdout;
    let cases = manifest
        .cases
        .iter()
        .map(|name| {
            let (volume, labels) = read_case(volume_path(&cfg.paths.data, name)).tag(Kind::Data)?;
            let labels = labels
                .ok_or_else(|| anyhow!("{name} has no labels"))
                .tag(Kind::Data)?;
            Ok(Case {
                name: name.clone(),
                volume,
                labels,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    Ok((manifest, cases))
}

fn missing(path: &Path, stage: &str) -> Failure {
    Failure::new(
        Kind::Model,
        anyhow!("{} not found (run {stage} first)", path.display()),
    )
}

pub fn load_saliency(cfg: &PipelineConfig) -> Result<SaliencyNet, Failure> {
    let path = saliency_checkpoint(&cfg.paths.checkpoints);
    if !path.exists() {
        return Err(missing(&path, "train-saliency"));
    }
    let store = read_checkpoint(&path).tag(Kind::Model)?;
    SaliencyNet::from_params(cfg.saliency.clone(), &store)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
        .tag(Kind::Model)
}

pub fn load_segmentation(cfg: &PipelineConfig, sampling: Sampling) -> Result<PointSegNet, Failure> {
    let path = segmentation_checkpoint(&cfg.paths.checkpoints, sampling);
    if !path.exists() {
        let stage = match sampling {
            Sampling::ContextAware => "train-seg",
            Sampling::Random => "train-seg --sampling random",
        };
        return Err(missing(&path, stage));
    }
    let store = read_checkpoint(&path).tag(Kind::Model)?;
    PointSegNet::from_params(cfg.segmentation.clone(), &store)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
        .tag(Kind::Model)
}
