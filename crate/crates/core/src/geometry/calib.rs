use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4};

use super::{io_err, GeometryError, Result};

/// Camera projection chain: `proj * rect * lidar_to_cam`, the latter two
/// embedded as 4x4 homogeneous matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub proj: Matrix3x4<f64>,
    pub rect: Matrix3<f64>,
    pub lidar_to_cam: Matrix3x4<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-4;

impl Calibration {
    pub fn new(
        proj: Matrix3x4<f64>,
        rect: Matrix3<f64>,
        lidar_to_cam: Matrix3x4<f64>,
    ) -> Result<Self> {
        let deviation = (rect.transpose() * rect - Matrix3::identity()).abs().max();
        if deviation.is_nan() || deviation > ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal { deviation });
        }
        Ok(Self {
            proj,
            rect,
            lidar_to_cam,
        })
    }

    /// Identity rectification and extrinsics.
    pub fn from_projection(proj: Matrix3x4<f64>) -> Self {
        Self {
            proj,
            rect: Matrix3::identity(),
            lidar_to_cam: Matrix3x4::identity(),
        }
    }

    pub fn composed(&self) -> Result<Matrix3x4<f64>> {
        let mut rect = Matrix4::identity();
        rect.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rect);
        let mut extr = Matrix4::identity();
        extr.fixed_view_mut::<3, 4>(0, 0)
            .copy_from(&self.lidar_to_cam);
        let m = self.proj * rect * extr;
        if m.row(2).iter().all(|&v| v == 0.0) {
            return Err(GeometryError::DegenerateCalibration);
        }
        Ok(m)
    }

    /// Rescales the pixel rows of the projection for an image resized by
    /// `sx` horizontally and `sy` vertically.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        let mut out = self.clone();
        out.proj.row_mut(0).scale_mut(sx);
        out.proj.row_mut(1).scale_mut(sy);
        out
    }

    /// Parses `P2:`, `R0_rect:` and `Tr_velo_to_cam:` lines; other keys are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut proj = None;
        let mut rect = None;
        let mut extr = None;
        for (lineno, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            let key = key.trim();
            let slot = match key {
                "P2" => &mut proj,
                "R0_rect" => &mut rect,
                "Tr_velo_to_cam" => &mut extr,
                _ => continue,
            };
            let values = rest
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| {
                    GeometryError::CalibParse(format!("line {}: {key}: {e}", lineno + 1))
                })?;
            *slot = Some((lineno + 1, values));
        }
        let take = |slot: Option<(usize, Vec<f64>)>, key: &str, n: usize| -> Result<Vec<f64>> {
            let (lineno, v) =
                slot.ok_or_else(|| GeometryError::CalibParse(format!("missing {key}")))?;
            if v.len() != n {
                return Err(GeometryError::CalibParse(format!(
                    "line {lineno}: {key} needs {n} values, found {}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let proj = take(proj, "P2", 12)?;
        let rect = take(rect, "R0_rect", 9)?;
        let extr = take(extr, "Tr_velo_to_cam", 12)?;
        Self::new(
            Matrix3x4::from_row_slice(&proj),
            Matrix3::from_row_slice(&rect),
            Matrix3x4::from_row_slice(&extr),
        )
    }

    pub fn to_text(&self) -> String {
        fn line(out: &mut String, key: &str, values: impl Iterator<Item = f64>) {
            out.push_str(key);
            out.push(':');
            for v in values {
                write!(out, " {v:e}").unwrap();
            }
            out.push('\n');
        }
        let mut out = String::new();
        line(&mut out, "P2", self.proj.transpose().iter().copied());
        line(&mut out, "R0_rect", self.rect.transpose().iter().copied());
        line(
            &mut out,
            "Tr_velo_to_cam",
            self.lidar_to_cam.transpose().iter().copied(),
        );
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }
}
