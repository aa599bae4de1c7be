//! Procedural paired LiDAR/camera scenes.
//!
//! A scene is a ground plane plus axis-aligned boxes, each with a
//! reflectance and an RGB tint. The LiDAR scan is ray cast along the cell
//! centers of a [`GridSpec`]; the camera is a pinhole looking at the same
//! angular window, so both sensors see the same geometry.

use crate::image::Image;
use crate::lidar::{GridSpec, Point, PointCloud};
use crate::rng::SplitMix64;

pub type CameraImage = Image;

/// Camera brightness is `min(1, SHADE_DISTANCE / hit_distance)` times albedo.
pub const SHADE_DISTANCE: f64 = 4.0;
pub const SKY_RGB: [f64; 3] = [0.55, 0.7, 0.9];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    pub n_boxes: usize,
    /// Footprint edge length range (meters).
    pub box_size: (f64, f64),
    /// Box height range (meters).
    pub box_height: (f64, f64),
    /// Horizontal distance range of box centers from the sensor (meters).
    pub box_distance: (f64, f64),
    pub ground_z: f64,
    pub sensor_height: f64,
    /// LiDAR grid; the camera covers the same angular window.
    pub grid: GridSpec,
    pub camera_height: usize,
    pub camera_width: usize,
    pub noise_std: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_boxes: 4,
            box_size: (1.0, 4.0),
            box_height: (1.0, 3.0),
            box_distance: (5.0, 25.0),
            ground_z: 0.0,
            sensor_height: 1.7,
            grid: GridSpec::desk_forward(),
            camera_height: 64,
            camera_width: 64,
            noise_std: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub reflectance: f64,
    pub tint: [f64; 3],
}

impl SceneBox {
    /// Slab-method ray intersection; entry distance if in front of the origin.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut t0, mut t1) = (
                (self.min[a] - origin[a]) * inv,
                (self.max[a] - origin[a]) * inv,
            );
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
        }
        (t_near <= t_far && t_near > 0.0).then_some(t_near)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Ground,
    Box(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub surface: Surface,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub ground_z: f64,
    pub sensor_height: f64,
    pub ground_reflectance: f64,
    pub boxes: Vec<SceneBox>,
}

/// A LiDAR return in full precision, in the sensor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Return {
    pub row: usize,
    pub col: usize,
    pub position: [f64; 3],
    pub range: f64,
    pub reflectance: f64,
    pub surface: Surface,
}

fn unit_direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    [
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ]
}

impl Scene {
    /// Draws ground reflectance, then per box: center azimuth inside the
    /// grid window, center distance, footprint, height, reflectance, tint.
    pub fn sample(params: &SceneParams, rng: &mut SplitMix64) -> Self {
        let ground_reflectance = rng.uniform(0.1, 0.3);
        let g = &params.grid;
        let margin = 0.05 * (g.azimuth_max - g.azimuth_min);
        let boxes = (0..params.n_boxes)
            .map(|_| {
                let az = rng.uniform(g.azimuth_min + margin, g.azimuth_max - margin);
                let dist = rng.uniform(params.box_distance.0, params.box_distance.1);
                let sx = rng.uniform(params.box_size.0, params.box_size.1);
                let sy = rng.uniform(params.box_size.0, params.box_size.1);
                let sz = rng.uniform(params.box_height.0, params.box_height.1);
                let reflectance = rng.uniform(0.3, 1.0);
                let tint = [
                    rng.uniform(0.4, 1.0),
                    rng.uniform(0.4, 1.0),
                    rng.uniform(0.4, 1.0),
                ];
                let (cx, cy) = (dist * az.cos(), dist * az.sin());
                SceneBox {
                    min: [cx - sx / 2.0, cy - sy / 2.0, params.ground_z],
                    max: [cx + sx / 2.0, cy + sy / 2.0, params.ground_z + sz],
                    reflectance,
                    tint,
                }
            })
            .collect();
        Self {
            ground_z: params.ground_z,
            sensor_height: params.sensor_height,
            ground_reflectance,
            boxes,
        }
    }

    pub fn sensor_origin(&self) -> [f64; 3] {
        [0.0, 0.0, self.ground_z + self.sensor_height]
    }

    /// Nearest surface hit along a ray from the sensor.
    pub fn cast(&self, dir: [f64; 3]) -> Option<Hit> {
        let origin = self.sensor_origin();
        let mut best = None::<Hit>;
        if dir[2] < 0.0 {
            let t = (self.ground_z - origin[2]) / dir[2];
            best = Some(Hit {
                t,
                surface: Surface::Ground,
            });
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some(t) = b.intersect(origin, dir) {
                if best.is_none_or(|h| t < h.t) {
                    best = Some(Hit {
                        t,
                        surface: Surface::Box(i),
                    });
                }
            }
        }
        best
    }

    pub fn reflectance(&self, surface: Surface) -> f64 {
        match surface {
            Surface::Ground => self.ground_reflectance,
            Surface::Box(i) => self.boxes[i].reflectance,
        }
    }

    fn albedo(&self, surface: Surface) -> [f64; 3] {
        match surface {
            Surface::Ground => [self.ground_reflectance; 3],
            Surface::Box(i) => {
                let b = &self.boxes[i];
                b.tint.map(|t| t * b.reflectance)
            }
        }
    }

    /// One ray per grid cell center; returns within `max_range` only.
    pub fn lidar_returns(&self, grid: &GridSpec) -> Vec<Return> {
        let mut out = Vec::new();
        for row in 0..grid.height {
            let el = grid.row_elevation(row);
            for col in 0..grid.width {
                let dir = unit_direction(grid.column_azimuth(col), el);
                let Some(hit) = self.cast(dir) else { continue };
                if hit.t > grid.max_range {
                    continue;
                }
                out.push(Return {
                    row,
                    col,
                    position: dir.map(|d| d * hit.t),
                    range: hit.t,
                    reflectance: self.reflectance(hit.surface),
                    surface: hit.surface,
                });
            }
        }
        out
    }

    pub fn lidar_scan(&self, grid: &GridSpec) -> PointCloud {
        PointCloud {
            points: self
                .lidar_returns(grid)
                .into_iter()
                .map(|r| Point {
                    x: r.position[0] as f32,
                    y: r.position[1] as f32,
                    z: r.position[2] as f32,
                    intensity: r.reflectance as f32,
                })
                .collect(),
        }
    }

    /// Ray direction through the center of camera pixel `(py, px)`. The
    /// optical axis points at the center of the grid window; columns grow
    /// with azimuth and rows shrink with elevation, as in the projection.
    pub fn camera_ray(
        grid: &GridSpec,
        height: usize,
        width: usize,
        py: usize,
        px: usize,
    ) -> [f64; 3] {
        let az_c = 0.5 * (grid.azimuth_min + grid.azimuth_max);
        let el_c = 0.5 * (grid.elevation_min + grid.elevation_max);
        let tan_h = (0.5 * (grid.azimuth_max - grid.azimuth_min)).tan();
        let tan_v = (0.5 * (grid.elevation_max - grid.elevation_min)).tan();
        let forward = unit_direction(az_c, el_c);
        let left = [-az_c.sin(), az_c.cos(), 0.0];
        let up = [
            forward[1] * left[2] - forward[2] * left[1],
            forward[2] * left[0] - forward[0] * left[2],
            forward[0] * left[1] - forward[1] * left[0],
        ];
        let u = ((px as f64 + 0.5) / width as f64) * 2.0 - 1.0;
        let v = 1.0 - ((py as f64 + 0.5) / height as f64) * 2.0;
        let mut d = [0.0; 3];
        for a in 0..3 {
            d[a] = forward[a] + u * tan_h * left[a] + v * tan_v * up[a];
        }
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d.map(|x| x / n)
    }

    /// Noise-free camera render: tinted albedo shaded by inverse distance;
    /// rays that hit nothing show the sky color.
    pub fn render_camera(&self, grid: &GridSpec, height: usize, width: usize) -> CameraImage {
        let mut img = Image::zeros(3, height, width);
        for py in 0..height {
            for px in 0..width {
                let dir = Self::camera_ray(grid, height, width, py, px);
                let rgb = match self.cast(dir) {
                    Some(hit) => {
                        let shade = (SHADE_DISTANCE / hit.t).min(1.0);
                        self.albedo(hit.surface).map(|a| a * shade)
                    }
                    None => SKY_RGB,
                };
                for (c, v) in rgb.iter().enumerate() {
                    img.set(c, py, px, *v as f32);
                }
            }
        }
        img
    }
}

/// Deterministic paired sample for `params.seed`.
pub fn generate_scene(params: &SceneParams) -> (PointCloud, CameraImage) {
    let mut rng = SplitMix64::new(params.seed);
    let scene = Scene::sample(params, &mut rng);
    let cloud = scene.lidar_scan(&params.grid);
    let mut camera = scene.render_camera(&params.grid, params.camera_height, params.camera_width);
    if params.noise_std > 0.0 {
        for v in camera.data_mut() {
            *v = (*v as f64 + params.noise_std * rng.normal()).clamp(0.0, 1.0) as f32;
        }
    }
    (cloud, camera)
}
