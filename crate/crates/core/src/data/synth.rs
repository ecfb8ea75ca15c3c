//! Ray-cast synthetic road scenes with a pinhole camera and a spinning LiDAR.
//!
//! World frame: x forward, y left, z up, ground plane at z = 0. The LiDAR
//! frame is the world frame shifted up to the sensor; the camera sits
//! slightly ahead of it looking along +x.

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{preprocess, DataError, PreprocessConfig, Result, Sample};
use crate::geometry::{Calibration, PointCloud};
use crate::raster::{Image, Mask};

const LIDAR_HEIGHT: f64 = 1.73;
const CAMERA_HEIGHT: f64 = 1.65;
const CAMERA_FORWARD: f64 = 0.27;
const HORIZONTAL_FOV_DEG: f64 = 80.0;
const HORIZON_ROW: f64 = 0.35;
const LIDAR_UP_DEG: f64 = 2.0;
const LIDAR_DOWN_DEG: f64 = -24.8;
const LIDAR_AZIMUTH_STEP_DEG: f64 = 0.4;
const LIDAR_AZIMUTH_HALF_DEG: f64 = 45.0;
const LIDAR_RANGE: f64 = 80.0;
const PIXEL_NOISE: f64 = 0.03;

/// Axis-aligned box standing on the ground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    /// Footprint centre `(x, y)` in meters.
    pub center: [f64; 2],
    /// Footprint extent along x and y in meters.
    pub footprint: [f64; 2],
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Convex road quadrilateral on the ground plane, `(x, y)` in meters.
    pub road: [[f64; 2]; 4],
    pub obstacles: Vec<Obstacle>,
    pub lidar_lines: usize,
    /// Standard deviation of per-axis point noise in meters.
    pub jitter: f64,
    /// Multiplies each camera image by a factor drawn from `[0.3, 0.7]`.
    pub brightness_corruption: bool,
    /// Standard deviation of off-road ground height in meters.
    pub terrain_roughness: f64,
    /// Draws a fresh road and 0 to 3 obstacles per sample instead of using
    /// `road` and `obstacles`.
    pub randomize_layout: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            road: [[2.0, -3.5], [40.0, -2.0], [40.0, 2.0], [2.0, 3.5]],
            obstacles: Vec::new(),
            lidar_lines: 64,
            jitter: 0.01,
            brightness_corruption: false,
            terrain_roughness: 0.05,
            randomize_layout: true,
            seed: 0,
        }
    }
}

/// One generated frame in sensor form, before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub rgb: Image,
    pub mask: Mask,
    pub cloud: PointCloud,
    pub calib: Calibration,
    pub road: [[f64; 2]; 4],
    pub obstacles: Vec<Obstacle>,
}

impl SynthSample {
    pub fn to_sample(&self, cfg: &PreprocessConfig) -> Result<Sample> {
        preprocess(
            &self.id,
            &self.rgb,
            &self.mask,
            &self.cloud,
            &self.calib,
            cfg,
        )
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Returns the polygon in counter-clockwise order, or an error if it is not
/// strictly convex.
fn check_road(road: &[[f64; 2]; 4]) -> Result<[[f64; 2]; 4]> {
    if road.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DataError::DegenerateScene(
            "road corners must be finite".into(),
        ));
    }
    let turns: Vec<f64> = (0..4)
        .map(|i| cross(road[i], road[(i + 1) % 4], road[(i + 2) % 4]))
        .collect();
    let ccw = turns.iter().all(|&t| t > 0.0);
    let cw = turns.iter().all(|&t| t < 0.0);
    if !(ccw || cw) {
        return Err(DataError::DegenerateScene(
            "road polygon must be convex with nonzero area".into(),
        ));
    }
    let mut out = *road;
    if cw {
        out.reverse();
    }
    Ok(out)
}

fn in_convex(poly: &[[f64; 2]; 4], p: [f64; 2]) -> bool {
    (0..4).all(|i| cross(poly[i], poly[(i + 1) % 4], p) >= 0.0)
}

fn check_obstacles(obstacles: &[Obstacle]) -> Result<()> {
    for (i, o) in obstacles.iter().enumerate() {
        let ok = o.height > 0.0
            && o.footprint.iter().all(|&f| f > 0.0 && f.is_finite())
            && o.height.is_finite()
            && o.center.iter().all(|c| c.is_finite());
        if !ok {
            return Err(DataError::DegenerateScene(format!(
                "obstacle {i} needs positive finite height and footprint"
            )));
        }
    }
    Ok(())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(DataError::DegenerateScene(
                "image size must be positive".into(),
            ));
        }
        if self.lidar_lines == 0 {
            return Err(DataError::DegenerateScene(
                "lidar_lines must be positive".into(),
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(DataError::DegenerateScene(
                "jitter must be finite and nonnegative".into(),
            ));
        }
        if !(self.terrain_roughness >= 0.0 && self.terrain_roughness.is_finite()) {
            return Err(DataError::DegenerateScene(
                "terrain_roughness must be finite and nonnegative".into(),
            ));
        }
        check_road(&self.road)?;
        check_obstacles(&self.obstacles)
    }

    pub fn focal(&self) -> f64 {
        self.width as f64 / 2.0 / (HORIZONTAL_FOV_DEG.to_radians() / 2.0).tan()
    }

    /// Camera calibration for the rendered image size.
    pub fn calibration(&self) -> Calibration {
        let f = self.focal();
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 * HORIZON_ROW);
        #[rustfmt::skip]
        let proj = Matrix3x4::new(
            f, 0.0, cx, 0.0,
            0.0, f, cy, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        let r = world_to_camera();
        let t = r * Vector3::new(-CAMERA_FORWARD, 0.0, LIDAR_HEIGHT - CAMERA_HEIGHT);
        let mut extr = Matrix3x4::zeros();
        extr.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        extr.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Calibration::new(proj, Matrix3::identity(), extr).expect("identity rectification")
    }
}

fn world_to_camera() -> Matrix3<f64> {
    #[rustfmt::skip]
    let r = Matrix3::new(
        0.0, -1.0, 0.0,
        0.0, 0.0, -1.0,
        1.0, 0.0, 0.0,
    );
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Sky,
    Road,
    Ground,
    /// Obstacle index and the axis of the face that was hit.
    Obstacle(usize, usize),
}

struct Hit {
    t: f64,
    point: Vector3<f64>,
    surface: Surface,
}

/// Entry distance and face axis of a ray against an axis-aligned box.
fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, usize)> {
    let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut near, mut far) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        if near > t0 {
            t0 = near;
            axis = a;
        }
        t1 = t1.min(far);
    }
    (t0 > 1e-9 && t0 <= t1).then_some((t0, axis))
}

struct Scene {
    road: [[f64; 2]; 4],
    obstacles: Vec<Obstacle>,
}

impl Scene {
    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>, max_t: f64) -> Hit {
        let mut best = Hit {
            t: max_t,
            point: Vector3::zeros(),
            surface: Surface::Sky,
        };
        if d.z < 0.0 {
            let t = -o.z / d.z;
            if t < best.t {
                let mut p = o + d * t;
                p.z = 0.0;
                let surface = if in_convex(&self.road, [p.x, p.y]) {
                    Surface::Road
                } else {
                    Surface::Ground
                };
                best = Hit {
                    t,
                    point: p,
                    surface,
                };
            }
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            let lo = [
                ob.center[0] - ob.footprint[0] / 2.0,
                ob.center[1] - ob.footprint[1] / 2.0,
                0.0,
            ];
            let hi = [
                ob.center[0] + ob.footprint[0] / 2.0,
                ob.center[1] + ob.footprint[1] / 2.0,
                ob.height,
            ];
            if let Some((t, axis)) = ray_box(o, d, lo, hi) {
                if t < best.t {
                    best = Hit {
                        t,
                        point: o + d * t,
                        surface: Surface::Obstacle(i, axis),
                    };
                }
            }
        }
        best
    }
}

fn random_layout(rng: &mut ChaCha8Rng) -> Scene {
    let near_half = rng.random_range(2.0..5.0);
    let far_half = rng.random_range(0.6..near_half * 0.8);
    let near_shift = rng.random_range(-1.5..1.5);
    let far_shift = rng.random_range(-8.0..8.0);
    let (near, far) = (rng.random_range(1.0..3.0), rng.random_range(30.0..50.0));
    let road = [
        [near, near_shift - near_half],
        [far, far_shift - far_half],
        [far, far_shift + far_half],
        [near, near_shift + near_half],
    ];
    let count = rng.random_range(0..=3);
    let obstacles = (0..count)
        .map(|_| Obstacle {
            center: [rng.random_range(5.0..25.0), rng.random_range(-6.0..6.0)],
            footprint: [rng.random_range(1.0..4.5), rng.random_range(0.8..2.0)],
            height: rng.random_range(0.5..2.0),
        })
        .collect();
    Scene { road, obstacles }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64, tint: [f64; 3]) -> [f64; 3] {
    let g = rng.random_range(lo..hi);
    tint.map(|t| (g + t * rng.random_range(0.5..1.0)).clamp(0.0, 1.0))
}

struct Palette {
    sky: [f64; 3],
    road: [f64; 3],
    ground: [f64; 3],
    obstacles: Vec<[f64; 3]>,
}

impl Palette {
    /// Road and off-road colours come from overlapping ranges so the camera
    /// alone cannot always separate them.
    fn draw(rng: &mut ChaCha8Rng, obstacles: usize) -> Self {
        let sky = color(rng, 0.6, 0.9, [-0.1, 0.0, 0.1]);
        let road = color(rng, 0.25, 0.55, [0.0, 0.0, 0.02]);
        let ground = if rng.random_bool(0.5) {
            color(rng, 0.25, 0.5, [-0.05, 0.08, -0.08])
        } else {
            color(rng, 0.35, 0.65, [0.02, 0.0, -0.02])
        };
        let obstacles = (0..obstacles)
            .map(|_| {
                [
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        Self {
            sky,
            road,
            ground,
            obstacles,
        }
    }

    fn shade(&self, s: Surface) -> [f64; 3] {
        match s {
            Surface::Sky => self.sky,
            Surface::Road => self.road,
            Surface::Ground => self.ground,
            Surface::Obstacle(i, axis) => {
                let k = [1.0, 0.8, 1.15][axis];
                self.obstacles[i].map(|c| (c * k).min(1.0))
            }
        }
    }
}

fn render(
    spec: &SceneSpec,
    scene: &Scene,
    palette: &Palette,
    rng: &mut ChaCha8Rng,
) -> (Image, Mask) {
    let (w, h) = (spec.width, spec.height);
    let f = spec.focal();
    let (cx, cy) = (w as f64 / 2.0, h as f64 * HORIZON_ROW);
    let origin = Vector3::new(CAMERA_FORWARD, 0.0, CAMERA_HEIGHT);
    let to_world = world_to_camera().transpose();
    let gain = if spec.brightness_corruption {
        rng.random_range(0.3..0.7)
    } else {
        1.0
    };
    let mut rgb = Image::zeros(3, h, w);
    let mut mask = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let d_cam = Vector3::new((x as f64 + 0.5 - cx) / f, (y as f64 + 0.5 - cy) / f, 1.0);
            let hit = scene.cast(&origin, &(to_world * d_cam), f64::INFINITY);
            mask.set(y, x, hit.surface == Surface::Road);
            let base = palette.shade(hit.surface);
            for (c, &v) in base.iter().enumerate() {
                let v = v * gain + PIXEL_NOISE * gauss(rng);
                rgb.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    (rgb, mask)
}

fn scan(spec: &SceneSpec, scene: &Scene, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let origin = Vector3::new(0.0, 0.0, LIDAR_HEIGHT);
    let steps = (2.0 * LIDAR_AZIMUTH_HALF_DEG / LIDAR_AZIMUTH_STEP_DEG).round() as usize;
    let mut points = Vec::new();
    for line in 0..spec.lidar_lines {
        let elev = if spec.lidar_lines == 1 {
            LIDAR_DOWN_DEG
        } else {
            LIDAR_UP_DEG
                + (LIDAR_DOWN_DEG - LIDAR_UP_DEG) * line as f64 / (spec.lidar_lines - 1) as f64
        }
        .to_radians();
        for a in 0..=steps {
            let az = (-LIDAR_AZIMUTH_HALF_DEG + a as f64 * LIDAR_AZIMUTH_STEP_DEG).to_radians();
            let d = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let hit = scene.cast(&origin, &d, LIDAR_RANGE);
            let (intensity, lift) = match hit.surface {
                Surface::Sky => continue,
                Surface::Road => (0.2, 0.0),
                Surface::Ground => (0.4, spec.terrain_roughness * gauss(rng)),
                Surface::Obstacle(..) => (0.6, 0.0),
            };
            let mut p = hit.point - origin;
            p.z += lift;
            if spec.jitter > 0.0 {
                for v in p.iter_mut() {
                    *v += spec.jitter * gauss(rng);
                }
            }
            points.push([p.x as f32, p.y as f32, p.z as f32, intensity]);
        }
    }
    Ok(PointCloud::new(points)?)
}

/// Generates `n` frames. Each frame draws from its own stream of the seeded
/// generator, so frame `i` does not depend on `n`.
pub fn synth_generate(spec: &SceneSpec, n: usize) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(DataError::DegenerateScene(
            "sample count must be at least 1".into(),
        ));
    }
    spec.validate()?;
    let calib = spec.calibration();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let scene = if spec.randomize_layout {
                random_layout(&mut rng)
            } else {
                Scene {
                    road: spec.road,
                    obstacles: spec.obstacles.clone(),
                }
            };
            let scene = Scene {
                road: check_road(&scene.road)?,
                obstacles: scene.obstacles,
            };
            let palette = Palette::draw(&mut rng, scene.obstacles.len());
            let (rgb, mask) = render(spec, &scene, &palette, &mut rng);
            let cloud = scan(spec, &scene, &mut rng)?;
            Ok(SynthSample {
                id: format!("synth_{i:06}"),
                rgb,
                mask,
                cloud,
                calib: calib.clone(),
                road: scene.road,
                obstacles: scene.obstacles,
            })
        })
        .collect()
}
