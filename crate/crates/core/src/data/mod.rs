//! Dataset ingestion, preprocessing and the synthetic scene generator.

mod manifest;
mod pnm;
mod synth;

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{
    self, compute_adi, knn_densify, normalize_adi, project_points, Calibration, PointCloud,
};
use crate::raster::{Image, Mask, RasterError};
use crate::tensor::{Element, Tensor};

pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split};
pub use pnm::{quantize, read_image, read_mask, write_image, write_mask, Pnm};
pub use synth::{synth_generate, Obstacle, SceneSpec, SynthSample};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Pnm { path: String, reason: String },
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("no complete samples under {0}")]
    EmptyDataset(String),
    #[error("target size {height}x{width} must be positive multiples of 16")]
    TargetSize { height: usize, width: usize },
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("samples disagree: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Aligned network inputs and label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Image,
    /// `[1, H, W]` in `[0, 1]`.
    pub adi: Image,
    pub mask: Mask,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn check_aligned(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let ok = self.rgb.channels() == 3
            && self.adi.channels() == 1
            && (self.rgb.height(), self.rgb.width()) == (h, w)
            && (self.adi.height(), self.adi.width()) == (h, w);
        if !ok {
            return Err(DataError::Inconsistent(format!(
                "{}: rgb {}x{}x{}, adi {}x{}x{}, mask {h}x{w}",
                self.id,
                self.rgb.channels(),
                self.rgb.height(),
                self.rgb.width(),
                self.adi.channels(),
                self.adi.height(),
                self.adi.width()
            )));
        }
        Ok(())
    }
}

/// A batch of samples as network tensors plus flattened targets.
pub struct Batch<T> {
    pub rgb: Tensor<T>,
    pub adi: Tensor<T>,
    pub mask: Vec<u8>,
}

/// Stacks equally sized samples along the batch axis.
pub fn collate<T: Element>(samples: &[&Sample]) -> Result<Batch<T>> {
    let first = samples
        .first()
        .ok_or_else(|| DataError::Inconsistent("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let n = samples.len();
    let mut rgb = Vec::with_capacity(n * 3 * h * w);
    let mut adi = Vec::with_capacity(n * h * w);
    let mut mask = Vec::with_capacity(n * h * w);
    for s in samples {
        s.check_aligned()?;
        if (s.height(), s.width()) != (h, w) {
            return Err(DataError::Inconsistent(format!(
                "{} is {}x{}, batch is {h}x{w}",
                s.id,
                s.height(),
                s.width()
            )));
        }
        rgb.extend(s.rgb.data().iter().map(|&v| T::from_f64(v as f64)));
        adi.extend(s.adi.data().iter().map(|&v| T::from_f64(v as f64)));
        mask.extend_from_slice(s.mask.data());
    }
    Ok(Batch {
        rgb: Tensor::new(&[n, 3, h, w], rgb).expect("sizes match"),
        adi: Tensor::new(&[n, 1, h, w], adi).expect("sizes match"),
        mask,
    })
}

/// Preprocessing knobs shared by disk and synthetic samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub width: usize,
    pub height: usize,
    pub adi_radius: usize,
    pub adi_clip: f64,
    /// Fill blank projected pixels before computing the ADI (sparse clouds).
    pub densify: bool,
    pub knn_k: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            adi_radius: 2,
            adi_clip: 2.0,
            densify: false,
            knn_k: 3,
        }
    }
}

impl PreprocessConfig {
    fn check(&self) -> Result<()> {
        if self.width == 0
            || self.height == 0
            || !self.width.is_multiple_of(16)
            || !self.height.is_multiple_of(16)
        {
            return Err(DataError::TargetSize {
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }
}

/// Normalized ADI of `cloud` rendered at `width x height` through `calib`.
pub fn adi_image(cloud: &PointCloud, calib: &Calibration, cfg: &PreprocessConfig) -> Result<Image> {
    let mut map = project_points(cloud, calib, cfg.width, cfg.height)?;
    if cfg.densify {
        map = knn_densify(&map, cfg.knn_k)?;
    }
    let adi = compute_adi(&map, cfg.adi_radius)?;
    Ok(normalize_adi(&adi, cfg.adi_clip)?)
}

/// Resizes camera image and label to the target and builds the ADI. `calib`
/// describes the camera at the original image size.
pub fn preprocess(
    id: &str,
    rgb: &Image,
    mask: &Mask,
    cloud: &PointCloud,
    calib: &Calibration,
    cfg: &PreprocessConfig,
) -> Result<Sample> {
    cfg.check()?;
    let sx = cfg.width as f64 / rgb.width() as f64;
    let sy = cfg.height as f64 / rgb.height() as f64;
    let adi = adi_image(cloud, &calib.scaled(sx, sy), cfg)?;
    let sample = Sample {
        id: id.to_string(),
        rgb: rgb.resize_bilinear(cfg.height, cfg.width),
        adi,
        mask: mask.resize_nearest(cfg.height, cfg.width),
    };
    sample.check_aligned()?;
    Ok(sample)
}

/// Label images mark road in the blue channel (magenta road on red
/// background); single-channel labels mark road as bright pixels.
pub fn label_to_mask(label: &Pnm) -> Mask {
    let c = label.channels;
    let road_channel = if c == 3 { 2 } else { 0 };
    let data = label
        .data
        .chunks_exact(c)
        .map(|px| (px[road_channel] > 127) as u8)
        .collect();
    Mask::new(label.height, label.width, data).expect("binary values")
}

pub fn mask_to_label(mask: &Mask) -> Pnm {
    let data = mask
        .data()
        .iter()
        .flat_map(|&v| if v == 1 { [255, 0, 255] } else { [255, 0, 0] })
        .collect();
    Pnm {
        channels: 3,
        width: mask.width(),
        height: mask.height(),
        data,
    }
}

pub fn load_sample(entry: &ManifestEntry, cfg: &PreprocessConfig) -> Result<Sample> {
    cfg.check()?;
    let image = Pnm::read(&entry.image)?;
    if image.channels != 3 {
        return Err(DataError::Pnm {
            path: entry.image.display().to_string(),
            reason: "camera image must be a PPM".into(),
        });
    }
    let label = label_to_mask(&Pnm::read(&entry.label)?);
    let rgb = image.to_image();
    if (label.height(), label.width()) != (rgb.height(), rgb.width()) {
        return Err(DataError::Inconsistent(format!(
            "{}: label is {}x{}, image is {}x{}",
            entry.stem,
            label.height(),
            label.width(),
            rgb.height(),
            rgb.width()
        )));
    }
    let cloud = PointCloud::read(&entry.cloud)?;
    let calib = Calibration::read(&entry.calib)?;
    preprocess(&entry.stem, &rgb, &label, &cloud, &calib, cfg)
}

pub fn load_dataset(manifest: &DatasetManifest, cfg: &PreprocessConfig) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| load_sample(e, cfg))
        .collect()
}

/// Writes one sample in the KITTI layout under `root`.
pub fn write_kitti_sample(root: &Path, s: &SynthSample) -> Result<()> {
    for dir in ["image_2", "velodyne", "calib", "gt_image_2"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    write_image(&root.join("image_2").join(format!("{}.ppm", s.id)), &s.rgb)?;
    s.cloud
        .write(&root.join("velodyne").join(format!("{}.bin", s.id)))?;
    s.calib
        .write(&root.join("calib").join(format!("{}.txt", s.id)))?;
    mask_to_label(&s.mask).write(&root.join("gt_image_2").join(format!("{}.ppm", s.id)))
}
