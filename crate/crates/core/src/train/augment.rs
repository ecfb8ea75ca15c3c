use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::data::Sample;
use crate::raster::Image;

pub const SCALE_RANGE: (f64, f64) = (0.75, 1.25);
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.6, 1.4);
pub const REMOVAL_PROBABILITY: f64 = 0.5;
pub const REMOVAL_AREA: (f64, f64) = (0.05, 0.15);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentFlags {
    pub multiscale: bool,
    pub crop: bool,
    pub brightness: bool,
    pub road_removal: bool,
}

impl AugmentFlags {
    pub const NONE: Self = Self {
        multiscale: false,
        crop: false,
        brightness: false,
        road_removal: false,
    };

    pub const ALL: Self = Self {
        multiscale: true,
        crop: true,
        brightness: true,
        road_removal: true,
    };
}

/// Multiplies every rgb value by `factor` and clamps to `[0, 1]`.
pub fn scale_brightness(rgb: &mut Image, factor: f32) {
    for v in rgb.data_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

/// Fills `h x w` pixels at `(y, x)` of every rgb channel with that
/// channel's mean over the whole image.
pub fn mean_fill(rgb: &mut Image, y: usize, x: usize, h: usize, w: usize) {
    let (height, width) = (rgb.height(), rgb.width());
    for c in 0..rgb.channels() {
        let plane = rgb.plane(c);
        let mean = (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32;
        for yy in y..(y + h).min(height) {
            for xx in x..(x + w).min(width) {
                rgb.set(c, yy, xx, mean);
            }
        }
    }
}

/// Applies the enabled augmentations in order: scale, crop, brightness and
/// road removal. The output is always `crop_size`; when cropping is off the
/// scaled sample is resized to it instead.
pub fn augment<R: Rng>(
    sample: &Sample,
    flags: AugmentFlags,
    crop_size: (usize, usize),
    rng: &mut R,
) -> Result<Sample> {
    let (ch, cw) = crop_size;
    let mut s = sample.clone();
    if flags.multiscale {
        let f = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let h = ((s.height() as f64 * f).round() as usize).max(1);
        let w = ((s.width() as f64 * f).round() as usize).max(1);
        s = resized(&s, h, w);
    }
    if flags.crop {
        if ch > s.height() || cw > s.width() {
            return Err(TrainError::Config(format!(
                "crop {ch}x{cw} exceeds scaled sample {}x{}",
                s.height(),
                s.width()
            )));
        }
        let y = rng.random_range(0..=s.height() - ch);
        let x = rng.random_range(0..=s.width() - cw);
        s = Sample {
            id: s.id,
            rgb: s.rgb.crop(y, x, ch, cw),
            adi: s.adi.crop(y, x, ch, cw),
            mask: s.mask.crop(y, x, ch, cw),
        };
    } else if (s.height(), s.width()) != (ch, cw) {
        s = resized(&s, ch, cw);
    }
    if flags.brightness {
        let f = rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
        scale_brightness(&mut s.rgb, f as f32);
    }
    if flags.road_removal && rng.random_bool(REMOVAL_PROBABILITY) {
        remove_road_section(&mut s, rng);
    }
    Ok(s)
}

fn resized(s: &Sample, h: usize, w: usize) -> Sample {
    Sample {
        id: s.id.clone(),
        rgb: s.rgb.resize_bilinear(h, w),
        adi: s.adi.resize_bilinear(h, w),
        mask: s.mask.resize_nearest(h, w),
    }
}

/// Mean-fills one rectangle of 5-15% of the image that contains a randomly
/// chosen road pixel. Samples without road are left alone.
fn remove_road_section<R: Rng>(s: &mut Sample, rng: &mut R) {
    let (h, w) = (s.height(), s.width());
    let road: Vec<usize> = (0..h * w).filter(|&i| s.mask.data()[i] == 1).collect();
    if road.is_empty() {
        return;
    }
    let area = rng.random_range(REMOVAL_AREA.0..=REMOVAL_AREA.1) * (h * w) as f64;
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
    let pick = road[rng.random_range(0..road.len())];
    let (py, px) = (pick / w, pick % w);
    let y = rng.random_range(py.saturating_sub(rh - 1)..=py.min(h - rh));
    let x = rng.random_range(px.saturating_sub(rw - 1)..=px.min(w - rw));
    mean_fill(&mut s.rgb, y, x, rh, rw);
}
