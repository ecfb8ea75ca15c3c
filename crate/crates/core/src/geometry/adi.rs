use super::{GeometryError, Result, SparseAltitudeMap};
use crate::raster::Image;

/// Altitude difference image, row-major, one value per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct AdiImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl AdiImage {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// For every occupied pixel, the mean over occupied neighbours within the
/// `(2r+1)^2` window of `|Z - Z_n| / distance`. Pixels that are blank or have
/// no occupied neighbour get 0.
pub fn compute_adi(map: &SparseAltitudeMap, radius: usize) -> Result<AdiImage> {
    if radius == 0 {
        return Err(GeometryError::InvalidArgument(
            "ADI radius must be at least 1".into(),
        ));
    }
    let (w, h) = (map.width(), map.height());
    let r = radius as isize;
    let side = 2 * radius + 1;
    let inv_dist: Vec<f64> = (0..side * side)
        .map(|i| {
            let dy = (i / side) as f64 - radius as f64;
            let dx = (i % side) as f64 - radius as f64;
            1.0 / (dx * dx + dy * dy).sqrt()
        })
        .collect();
    let mut values = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(centre) = map.get(x, y) else {
                continue;
            };
            let mut sum = 0.0;
            let mut count = 0usize;
            let y0 = (y as isize - r).max(0) as usize;
            let y1 = (y as isize + r).min(h as isize - 1) as usize;
            let x0 = (x as isize - r).max(0) as usize;
            let x1 = (x as isize + r).min(w as isize - 1) as usize;
            for ny in y0..=y1 {
                let wy = (ny + radius - y) * side;
                for nx in x0..=x1 {
                    if nx == x && ny == y {
                        continue;
                    }
                    if let Some(n) = map.get(nx, ny) {
                        sum +=
                            (centre.altitude - n.altitude).abs() * inv_dist[wy + nx + radius - x];
                        count += 1;
                    }
                }
            }
            if count > 0 {
                values[y * w + x] = sum / count as f64;
            }
        }
    }
    Ok(AdiImage {
        width: w,
        height: h,
        values,
    })
}

/// Maps values to `[0, 1]` as `min(V, clip) / clip`.
pub fn normalize_adi(adi: &AdiImage, clip: f64) -> Result<Image> {
    if clip.is_nan() || clip <= 0.0 {
        return Err(GeometryError::InvalidArgument(format!(
            "clip must be positive, got {clip}"
        )));
    }
    let data = adi
        .values
        .iter()
        .map(|&v| (v.min(clip) / clip) as f32)
        .collect();
    Ok(Image::new(1, adi.height, adi.width, data).expect("ADI extents are positive"))
}
