//! INI run configuration: every key, its default and its meaning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use skipcross::data::{PreprocessConfig, SceneSpec};
use skipcross::model::{FusionTopology, Strategy};
use skipcross::train::{AugmentFlags, TrainConfig};

use crate::error::CliError;

/// `(section, key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str, &str)] = &[
    (
        "run",
        "seed",
        "0",
        "seed for initialization, shuffling and synthesis",
    ),
    ("run", "out", "runs/default", "output directory"),
    (
        "run",
        "deterministic",
        "false",
        "single-threaded numeric paths",
    ),
    (
        "data",
        "train_dir",
        "",
        "KITTI-layout training root; empty synthesizes [synth] train_samples",
    ),
    (
        "data",
        "val_dir",
        "",
        "validation root; empty synthesizes [synth] val_samples",
    ),
    (
        "data",
        "test_dir",
        "",
        "evaluation root for `eval`; empty falls back to the validation set",
    ),
    (
        "data",
        "width",
        "64",
        "network input width, a multiple of 16",
    ),
    (
        "data",
        "height",
        "64",
        "network input height, a multiple of 16",
    ),
    (
        "geometry",
        "adi_radius",
        "2",
        "ADI neighborhood radius in pixels",
    ),
    ("geometry", "adi_clip", "2.0", "ADI value mapped to 1.0"),
    (
        "geometry",
        "densify",
        "false",
        "fill blank pixels by k-nearest interpolation before the ADI",
    ),
    ("geometry", "knn_k", "3", "neighbors used by densification"),
    (
        "model",
        "strategy",
        "skipcross",
        "skipcross, early, middle, late, cross or camera",
    ),
    (
        "model",
        "stage_blocks",
        "2,3,3",
        "residual blocks per fusion stage",
    ),
    (
        "model",
        "stage_channels",
        "32,64,128",
        "channels per fusion stage",
    ),
    ("train", "lr", "0.001", "initial learning rate"),
    ("train", "batch_size", "4", "samples per step"),
    ("train", "max_epochs", "100", "epoch limit"),
    (
        "train",
        "plateau_patience",
        "10",
        "epochs without MaxF gain before decay",
    ),
    (
        "train",
        "lr_decay",
        "0.1",
        "learning-rate factor on plateau",
    ),
    ("train", "min_lr", "1e-6", "learning-rate floor"),
    (
        "train",
        "min_improvement",
        "1e-4",
        "MaxF gain that counts as progress",
    ),
    (
        "train",
        "multiscale",
        "true",
        "random rescale by 0.75 to 1.25",
    ),
    (
        "train",
        "crop",
        "true",
        "random crop to crop_height x crop_width",
    ),
    (
        "train",
        "brightness",
        "true",
        "random brightness factor 0.6 to 1.4",
    ),
    (
        "train",
        "road_removal",
        "true",
        "mean-fill a road rectangle with probability 0.5",
    ),
    (
        "train",
        "crop_height",
        "48",
        "training crop height, a multiple of 16",
    ),
    (
        "train",
        "crop_width",
        "48",
        "training crop width, a multiple of 16",
    ),
    ("synth", "train_samples", "40", "synthetic training samples"),
    ("synth", "val_samples", "10", "synthetic validation samples"),
    ("synth", "width", "64", "rendered image width"),
    ("synth", "height", "64", "rendered image height"),
    ("synth", "lidar_lines", "64", "LiDAR beam count"),
    (
        "synth",
        "jitter",
        "0.01",
        "point noise standard deviation in meters",
    ),
    (
        "synth",
        "brightness_corruption",
        "false",
        "darken each image by a factor in [0.3, 0.7]",
    ),
    (
        "synth",
        "terrain_roughness",
        "0.05",
        "off-road ground height noise in meters",
    ),
    (
        "synth",
        "randomize_layout",
        "true",
        "random road and obstacles per sample",
    ),
    (
        "compare",
        "strategies",
        "early,middle,late,cross,skipcross",
        "strategies trained by `compare`",
    ),
    (
        "predict",
        "threshold",
        "0.5",
        "confidence above which a pixel is road",
    ),
];

pub fn keys_help() -> String {
    let mut s = String::from("Config keys (INI sections, default in brackets):\n");
    let mut section = "";
    for &(sec, key, default, desc) in KEYS {
        if sec != section {
            writeln!(s, "  [{sec}]").unwrap();
            section = sec;
        }
        writeln!(s, "    {key:<22} [{default}] {desc}").unwrap();
    }
    s
}

/// Raw `section.key -> value` map holding every key.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    values: BTreeMap<(String, String), String>,
}

impl Default for Resolved {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|&(s, k, d, _)| ((s.to_string(), k.to_string()), d.to_string()))
            .collect();
        Self { values }
    }
}

impl Resolved {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let ini = Ini::load_from_str_noescape(text)
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let mut out = Self::default();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let Some(section) = section else {
                    return Err(CliError::Usage(format!(
                        "config key `{key}` must be inside a section"
                    )));
                };
                out.set(section, key, value)?;
            }
        }
        Ok(out)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::parse(&text)
            }
        }
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let slot = self
            .values
            .get_mut(&(section.to_string(), key.to_string()))
            .ok_or_else(|| CliError::Usage(format!("unknown config key [{section}] {key}")))?;
        *slot = value.trim().to_string();
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> &str {
        &self.values[&(section.to_string(), key.to_string())]
    }

    /// INI text with every key in table order.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for &(sec, key, _, _) in KEYS {
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                writeln!(s, "[{sec}]").unwrap();
                section = sec;
            }
            writeln!(s, "{key} = {}", self.get(sec, key)).unwrap();
        }
        s
    }

    fn typed<T: FromStr>(&self, section: &str, key: &str) -> Result<T, CliError> {
        let raw = self.get(section, key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("[{section}] {key}: cannot parse `{raw}`")))
    }

    fn list(&self, section: &str, key: &str) -> Result<Vec<usize>, CliError> {
        self.get(section, key)
            .split(',')
            .map(|v| {
                v.trim().parse().map_err(|_| {
                    CliError::Usage(format!("[{section}] {key}: `{v}` is not an integer"))
                })
            })
            .collect()
    }

    fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        let v = self.get(section, key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn to_config(&self) -> Result<RunConfig, CliError> {
        let strategy: Strategy = self
            .get("model", "strategy")
            .parse()
            .map_err(|e| CliError::Usage(format!("[model] strategy: {e}")))?;
        let topology = FusionTopology::new(
            self.list("model", "stage_blocks")?,
            self.list("model", "stage_channels")?,
            strategy,
        );
        topology
            .validate()
            .map_err(|e| CliError::Usage(format!("[model]: {e}")))?;
        let preprocess = PreprocessConfig {
            width: self.typed("data", "width")?,
            height: self.typed("data", "height")?,
            adi_radius: self.typed("geometry", "adi_radius")?,
            adi_clip: self.typed("geometry", "adi_clip")?,
            densify: self.typed("geometry", "densify")?,
            knn_k: self.typed("geometry", "knn_k")?,
        };
        let seed: u64 = self.typed("run", "seed")?;
        let train = TrainConfig {
            lr: self.typed("train", "lr")?,
            batch_size: self.typed("train", "batch_size")?,
            max_epochs: self.typed("train", "max_epochs")?,
            plateau_patience: self.typed("train", "plateau_patience")?,
            lr_decay: self.typed("train", "lr_decay")?,
            min_lr: self.typed("train", "min_lr")?,
            min_improvement: self.typed("train", "min_improvement")?,
            augment: AugmentFlags {
                multiscale: self.typed("train", "multiscale")?,
                crop: self.typed("train", "crop")?,
                brightness: self.typed("train", "brightness")?,
                road_removal: self.typed("train", "road_removal")?,
            },
            crop_size: (
                self.typed("train", "crop_height")?,
                self.typed("train", "crop_width")?,
            ),
            seed,
        };
        train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let scene = SceneSpec {
            width: self.typed("synth", "width")?,
            height: self.typed("synth", "height")?,
            lidar_lines: self.typed("synth", "lidar_lines")?,
            jitter: self.typed("synth", "jitter")?,
            brightness_corruption: self.typed("synth", "brightness_corruption")?,
            terrain_roughness: self.typed("synth", "terrain_roughness")?,
            randomize_layout: self.typed("synth", "randomize_layout")?,
            seed,
            ..SceneSpec::default()
        };
        scene
            .validate()
            .map_err(|e| CliError::Usage(format!("[synth]: {e}")))?;
        let strategies = self
            .get("compare", "strategies")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<Strategy>()
                    .map_err(|e| CliError::Usage(format!("[compare] strategies: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let threshold: f32 = self.typed("predict", "threshold")?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(CliError::Usage(
                "[predict] threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(RunConfig {
            seed,
            out: PathBuf::from(self.get("run", "out")),
            deterministic: self.typed("run", "deterministic")?,
            train_dir: self.path("data", "train_dir"),
            val_dir: self.path("data", "val_dir"),
            test_dir: self.path("data", "test_dir"),
            preprocess,
            topology,
            train,
            scene,
            train_samples: self.typed("synth", "train_samples")?,
            val_samples: self.typed("synth", "val_samples")?,
            strategies,
            threshold,
        })
    }
}

/// Typed view of a resolved configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub deterministic: bool,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub preprocess: PreprocessConfig,
    pub topology: FusionTopology,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub train_samples: usize,
    pub val_samples: usize,
    pub strategies: Vec<Strategy>,
    pub threshold: f32,
}
