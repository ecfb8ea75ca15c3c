//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::fs;
use std::path::Path;

use super::{io_err, DataError, Result};
use crate::raster::{Image, Mask};

/// Raw 8-bit raster, channel-interleaved as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Pnm {
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let magic = bytes.get(..2).ok_or("missing magic")?;
        let channels = match magic {
            b"P5" => 1,
            b"P6" => 3,
            _ => {
                return Err(format!(
                    "unsupported magic {:?}, expected P5 or P6",
                    String::from_utf8_lossy(magic)
                ))
            }
        };
        pos += 2;
        let mut fields = [0usize; 3];
        for (i, field) in fields.iter_mut().enumerate() {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err("truncated header".into()),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            let name = ["width", "height", "maxval"][i];
            *field = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| format!("malformed {name}"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(format!("maxval {maxval} unsupported, expected 255"));
        }
        if width == 0 || height == 0 {
            return Err("zero extent".into());
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err("missing whitespace after header".into());
        }
        pos += 1;
        let len = width * height * channels;
        let data = bytes
            .get(pos..pos + len)
            .ok_or_else(|| {
                format!(
                    "truncated payload: expected {len} bytes, found {}",
                    bytes.len() - pos
                )
            })?
            .to_vec();
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes).map_err(|reason| DataError::Pnm {
            path: path.display().to_string(),
            reason,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(io_err(path))
    }

    /// Planar float image in `[0, 1]`.
    pub fn to_image(&self) -> Image {
        let plane = self.width * self.height;
        let mut data = vec![0.0; plane * self.channels];
        for (i, &v) in self.data.iter().enumerate() {
            data[(i % self.channels) * plane + i / self.channels] = v as f32 / 255.0;
        }
        Image::new(self.channels, self.height, self.width, data).expect("positive extents")
    }

    /// Quantizes a 1- or 3-channel image to 8 bits.
    pub fn from_image(image: &Image) -> Self {
        let (c, plane) = (image.channels(), image.height() * image.width());
        assert!(c == 1 || c == 3, "PNM stores 1 or 3 channels, got {c}");
        let mut data = vec![0u8; plane * c];
        for ch in 0..c {
            for (i, &v) in image.plane(ch).iter().enumerate() {
                data[i * c + ch] = quantize(v);
            }
        }
        Self {
            channels: c,
            width: image.width(),
            height: image.height(),
            data,
        }
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PGM or PPM as a float image.
pub fn read_image(path: &Path) -> Result<Image> {
    Ok(Pnm::read(path)?.to_image())
}

/// Writes a 1-channel image as PGM or a 3-channel image as PPM.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    Pnm::from_image(image).write(path)
}

/// Mask as PGM with values 0 and 255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    Pnm {
        channels: 1,
        width: mask.width(),
        height: mask.height(),
        data: mask.data().iter().map(|&v| v * 255).collect(),
    }
    .write(path)
}

/// Reads a PGM mask; values above 127 are road.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let pnm = Pnm::read(path)?;
    if pnm.channels != 1 {
        return Err(DataError::Pnm {
            path: path.display().to_string(),
            reason: "mask must be a single-channel PGM".into(),
        });
    }
    Ok(Mask::new(
        pnm.height,
        pnm.width,
        pnm.data.iter().map(|&v| (v > 127) as u8).collect(),
    )?)
}
