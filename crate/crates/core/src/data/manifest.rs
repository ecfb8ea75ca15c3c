//! KITTI-style directory layout:
//!
//! ```text
//! root/image_2/<stem>.ppm       camera image
//! root/velodyne/<stem>.bin      point cloud
//! root/calib/<stem>.txt         calibration
//! root/gt_image_2/<stem>.ppm    road label (also <a>_road_<b>.ppm for stem <a>_<b>)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, DataError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Guesses the split from the directory name, defaulting to train.
    pub fn from_dir(root: &Path) -> Self {
        match root.file_name().and_then(|n| n.to_str()) {
            Some("val") | Some("validation") => Split::Val,
            Some("test") | Some("testing") => Split::Test,
            _ => Split::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub stem: String,
    pub image: PathBuf,
    pub cloud: PathBuf,
    pub calib: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn label_candidates(dir: &Path, stem: &str) -> Vec<PathBuf> {
    let mut v = vec![
        dir.join(format!("{stem}.ppm")),
        dir.join(format!("{stem}.pgm")),
    ];
    if let Some((a, b)) = stem.rsplit_once('_') {
        v.push(dir.join(format!("{a}_road_{b}.ppm")));
        v.push(dir.join(format!("{a}_road_{b}.pgm")));
    }
    v
}

/// Lists every stem that has all four files, in lexicographic order.
/// Incomplete stems are skipped with a warning.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let image_dir = root.join("image_2");
    let mut stems: Vec<String> = fs::read_dir(&image_dir)
        .map_err(io_err(&image_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    stems.sort();
    let mut entries = Vec::new();
    for stem in stems {
        let cloud = root.join("velodyne").join(format!("{stem}.bin"));
        let calib = root.join("calib").join(format!("{stem}.txt"));
        let label = label_candidates(&root.join("gt_image_2"), &stem)
            .into_iter()
            .find(|p| p.is_file());
        let missing: Vec<&str> = [
            (!cloud.is_file()).then_some("point cloud"),
            (!calib.is_file()).then_some("calibration"),
            label.is_none().then_some("label"),
        ]
        .into_iter()
        .flatten()
        .collect();
        if !missing.is_empty() {
            log::warn!("skipping {stem}: missing {}", missing.join(", "));
            continue;
        }
        entries.push(ManifestEntry {
            image: image_dir.join(format!("{stem}.ppm")),
            stem,
            cloud,
            calib,
            label: label.unwrap(),
        });
    }
    if entries.is_empty() {
        return Err(DataError::EmptyDataset(root.display().to_string()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: Split::from_dir(root),
        entries,
    })
}
