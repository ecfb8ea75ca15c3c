//! LiDAR projection into pixel space, altitude difference images and
//! sparse-map densification.

mod adi;
mod calib;
mod densify;

use std::fs;
use std::path::Path;

use thiserror::Error;

pub use adi::{compute_adi, normalize_adi, AdiImage};
pub use calib::Calibration;
pub use densify::knn_densify;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate calibration: projective row of the composed matrix is zero")]
    DegenerateCalibration,
    #[error("rectification matrix is not orthonormal (max deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
    #[error("calibration: {0}")]
    CalibParse(String),
    #[error("point cloud byte length {0} is not a multiple of 16")]
    TruncatedCloud(usize),
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("densification needs at least {needed} occupied cells, found {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GeometryError + '_ {
    move |source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// LiDAR returns `(x, y, z, intensity)` in the sensor frame, z up, meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 4]>) -> Result<Self> {
        if let Some(index) = points
            .iter()
            .position(|p| p[..3].iter().any(|v| !v.is_finite()))
        {
            return Err(GeometryError::NonFinitePoint { index });
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(16) {
            return Err(GeometryError::TruncatedCloud(bytes.len()));
        }
        let points = bytes
            .chunks_exact(16)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap());
                [f(0), f(1), f(2), f(3)]
            })
            .collect();
        Self::new(points)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.points
            .iter()
            .flat_map(|p| p.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Reads a headerless little-endian f32 quadruple file.
    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }
}

/// A projected LiDAR return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    /// Sensor-frame z of the point, meters.
    pub altitude: f64,
    /// Projective depth, meters; always positive.
    pub depth: f64,
}

/// At most one projected return per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAltitudeMap {
    width: usize,
    height: usize,
    cells: Vec<Option<Cell>>,
}

impl SparseAltitudeMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![None; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[Option<Cell>] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<Cell> {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, cell: Option<Cell>) {
        self.cells[y * self.width + x] = cell;
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Applies `f` to every stored altitude.
    pub fn map_altitude(&self, f: impl Fn(f64) -> f64) -> Self {
        let cells = self
            .cells
            .iter()
            .map(|c| {
                c.map(|c| Cell {
                    altitude: f(c.altitude),
                    depth: c.depth,
                })
            })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            cells,
        }
    }

    /// Keeps the nearer of the existing and the new return.
    fn insert_nearest(&mut self, x: usize, y: usize, cell: Cell) {
        let slot = &mut self.cells[y * self.width + x];
        match slot {
            Some(old) if old.depth <= cell.depth => {}
            _ => *slot = Some(cell),
        }
    }
}

/// Projects every point through `calib` onto a `width x height` pixel grid.
///
/// A point lands in pixel `(floor(u), floor(v))`. Points with nonpositive
/// projective depth or outside the image are dropped, and the nearest point
/// wins when several share a pixel.
pub fn project_points(
    cloud: &PointCloud,
    calib: &Calibration,
    width: usize,
    height: usize,
) -> Result<SparseAltitudeMap> {
    if width == 0 || height == 0 {
        return Err(GeometryError::InvalidArgument(format!(
            "image size must be positive, got {width}x{height}"
        )));
    }
    let m = calib.composed()?;
    let mut map = SparseAltitudeMap::empty(width, height);
    for p in &cloud.points {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let row = |r: usize| m[(r, 0)] * x + m[(r, 1)] * y + m[(r, 2)] * z + m[(r, 3)];
        let w = row(2);
        if w.is_nan() || w <= 0.0 {
            continue;
        }
        let u = row(0) / w;
        let v = row(1) / w;
        if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
            continue;
        }
        map.insert_nearest(
            u.floor() as usize,
            v.floor() as usize,
            Cell {
                altitude: z,
                depth: w,
            },
        );
    }
    Ok(map)
}
