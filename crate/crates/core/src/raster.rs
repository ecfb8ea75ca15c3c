//! Planar images and binary masks with the resampling used by the pipeline.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("{what}: expected {expected} values, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what}: extents must be positive, got {height}x{width}")]
    Empty {
        what: &'static str,
        height: usize,
        width: usize,
    },
    #[error("mask value {value} at index {index} is not binary")]
    NonBinary { value: u8, index: usize },
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Channel-planar float image, `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(RasterError::Empty {
                what: "image",
                height,
                width,
            });
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(RasterError::Length {
                what: "image",
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty image");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear resampling with pixel centres aligned (half-pixel convention).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys = bilinear_taps(self.height, height);
        let xs = bilinear_taps(self.width, width);
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            let src = self.plane(c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top =
                        src[y0 * self.width + x0] * (1.0 - fx) + src[y0 * self.width + x1] * fx;
                    let bot =
                        src[y1 * self.width + x0] * (1.0 - fx) + src[y1 * self.width + x1] * fx;
                    out.set(c, oy, ox, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }

    /// Copies the window `[y, y + height) x [x, x + width)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Self {
        assert!(
            y + height <= self.height && x + width <= self.width,
            "crop out of bounds"
        );
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for r in 0..height {
                let src = (c * self.height + y + r) * self.width + x;
                let dst = (c * height + r) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }
}

/// Binary mask, one byte per pixel with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(RasterError::Empty {
                what: "mask",
                height,
                width,
            });
        }
        if data.len() != height * width {
            return Err(RasterError::Length {
                what: "mask",
                expected: height * width,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(RasterError::NonBinary {
                value: data[index],
                index,
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty mask");
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, road: bool) {
        self.data[y * self.width + x] = road as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let ys = nearest_taps(self.height, height);
        let xs = nearest_taps(self.width, width);
        let mut data = Vec::with_capacity(height * width);
        for &y in &ys {
            data.extend(xs.iter().map(|&x| self.data[y * self.width + x]));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Self {
        assert!(
            y + height <= self.height && x + width <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(height * width);
        for r in y..y + height {
            data.extend_from_slice(&self.data[r * self.width + x..r * self.width + x + width]);
        }
        Self {
            height,
            width,
            data,
        }
    }
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Nearest source index for each destination pixel centre.
pub fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(src - 1))
        .collect()
}
