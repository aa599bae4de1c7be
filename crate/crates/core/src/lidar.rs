//! LiDAR ingestion and spherical projection.
//!
//! A scan is binned by azimuth (columns) and elevation (rows, top row =
//! highest elevation) into a dense 3-channel image holding intensity,
//! normalized range and normalized height of the nearest return per cell.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::image::Image;
use crate::{Error, Result};

pub const CHANNEL_NAMES: [&str; 3] = ["intensity", "range", "height"];
pub const INTENSITY: usize = 0;
pub const RANGE: usize = 1;
pub const HEIGHT: usize = 2;

const RECORD_BYTES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    pub fn azimuth(&self) -> f64 {
        (self.y as f64).atan2(self.x as f64)
    }

    pub fn elevation(&self) -> f64 {
        let (x, y) = (self.x as f64, self.y as f64);
        (self.z as f64).atan2((x * x + y * y).sqrt())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// KITTI velodyne layout: little-endian `f32` quadruples `(x, y, z, intensity)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * RECORD_BYTES);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.intensity] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Decodes a KITTI-style binary scan. Intensities are clamped to `[0, 1]`.
pub fn load_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "point stream of {} bytes is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(index, rec)| {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
            let (x, y, z, intensity) = (f(0), f(1), f(2), f(3));
            if ![x, y, z, intensity].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            Ok(Point {
                x,
                y,
                z,
                intensity: intensity.clamp(0.0, 1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PointCloud { points })
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_point_cloud(&bytes)
}

/// Projection grid. Angles in radians, distances in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    pub max_range: f64,
    /// Height mapped to 0 in the height channel.
    pub z_min: f64,
    /// Height mapped to 1 in the height channel.
    pub z_max: f64,
}

impl Default for GridSpec {
    /// 64 beams over −24.8°..+2°, full turn at 1024 columns, 80 m.
    fn default() -> Self {
        Self {
            height: 64,
            width: 1024,
            elevation_min: (-24.8f64).to_radians(),
            elevation_max: 2.0f64.to_radians(),
            azimuth_min: -PI,
            azimuth_max: PI,
            max_range: 80.0,
            z_min: -3.0,
            z_max: 7.0,
        }
    }
}

impl GridSpec {
    /// Default geometry at 32×256.
    pub fn desk() -> Self {
        Self {
            height: 32,
            width: 256,
            ..Self::default()
        }
    }

    /// 32×256 over the forward ±45° sector, matching the field of view of
    /// the synthetic pinhole camera.
    pub fn desk_forward() -> Self {
        Self {
            azimuth_min: -PI / 4.0,
            azimuth_max: PI / 4.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.elevation_min,
            self.elevation_max,
            self.azimuth_min,
            self.azimuth_max,
            self.max_range,
            self.z_min,
            self.z_max,
        ]
        .iter()
        .all(|v| v.is_finite());
        let bad = |m: &str| Err(Error::Config(format!("grid: {m}")));
        if !all_finite {
            return bad("non-finite field");
        }
        if self.height == 0 || self.width == 0 {
            return bad("height and width must be at least 1");
        }
        if self.elevation_min >= self.elevation_max {
            return bad("elevation_min must be below elevation_max");
        }
        if self.azimuth_min >= self.azimuth_max
            || self.azimuth_max - self.azimuth_min > 2.0 * PI + 1e-12
        {
            return bad("azimuth window must be non-empty and at most 2π");
        }
        if self.max_range <= 0.0 {
            return bad("max_range must be positive");
        }
        if self.z_min >= self.z_max {
            return bad("z_min must be below z_max");
        }
        Ok(())
    }

    pub fn azimuth_bin(&self) -> f64 {
        (self.azimuth_max - self.azimuth_min) / self.width as f64
    }

    pub fn elevation_bin(&self) -> f64 {
        (self.elevation_max - self.elevation_min) / self.height as f64
    }

    /// Azimuth at the center of column `col`.
    pub fn column_azimuth(&self, col: usize) -> f64 {
        self.azimuth_min + (col as f64 + 0.5) * self.azimuth_bin()
    }

    /// Elevation at the center of row `row` (row 0 is the top).
    pub fn row_elevation(&self, row: usize) -> f64 {
        self.elevation_max - (row as f64 + 0.5) * self.elevation_bin()
    }

    /// Cell containing the direction, or `None` outside the angular window.
    /// Upper window edges are inclusive.
    pub fn cell_of(&self, azimuth: f64, elevation: f64) -> Option<(usize, usize)> {
        if !(self.azimuth_min..=self.azimuth_max).contains(&azimuth)
            || !(self.elevation_min..=self.elevation_max).contains(&elevation)
        {
            return None;
        }
        let col = ((azimuth - self.azimuth_min) / self.azimuth_bin()).floor() as usize;
        let row = ((self.elevation_max - elevation) / self.elevation_bin()).floor() as usize;
        Some((row.min(self.height - 1), col.min(self.width - 1)))
    }

    pub fn normalize_height(&self, z: f64) -> f64 {
        ((z - self.z_min) / (self.z_max - self.z_min)).clamp(0.0, 1.0)
    }
}

/// Dense projection of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalImage {
    image: Image,
    occupancy: Vec<bool>,
}

impl SphericalImage {
    pub fn new(image: Image, occupancy: Vec<bool>) -> Result<Self> {
        if image.channels() != 3 || occupancy.len() != image.height() * image.width() {
            return Err(Error::shape(
                "spherical image needs 3 channels and a full occupancy plane",
            ));
        }
        Ok(Self { image, occupancy })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.occupancy[row * self.width() + col]
    }
}

/// Projects a scan onto `spec`. Points outside the angular window, beyond
/// `max_range` or at the origin are dropped. When several points share a
/// cell the nearest wins; exact range ties go to the earlier point.
pub fn spherical_project(cloud: &PointCloud, spec: &GridSpec) -> Result<SphericalImage> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    // (range, index) of the current winner per cell
    let mut winner: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for (index, p) in cloud.points.iter().enumerate() {
        let r = p.range();
        if r == 0.0 || r > spec.max_range {
            continue;
        }
        let Some((row, col)) = spec.cell_of(p.azimuth(), p.elevation()) else {
            continue;
        };
        let slot = &mut winner[row * w + col];
        let better = match *slot {
            None => true,
            Some((best_r, best_i)) => (r, index) < (best_r, best_i),
        };
        if better {
            *slot = Some((r, index));
        }
    }

    let mut image = Image::zeros(3, h, w);
    let mut occupancy = vec![false; h * w];
    for (cell, win) in winner.iter().enumerate() {
        let Some((r, index)) = *win else { continue };
        let p = &cloud.points[index];
        let (row, col) = (cell / w, cell % w);
        occupancy[cell] = true;
        image.set(INTENSITY, row, col, p.intensity.clamp(0.0, 1.0));
        image.set(RANGE, row, col, (r / spec.max_range).clamp(0.0, 1.0) as f32);
        image.set(HEIGHT, row, col, spec.normalize_height(p.z as f64) as f32);
    }
    SphericalImage::new(image, occupancy)
}

/// Text sidecar describing a projection: dimensions and grid fields.
pub fn header_text(spec: &GridSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "rows = {}", spec.height);
    let _ = writeln!(s, "cols = {}", spec.width);
    let _ = writeln!(s, "channels = {}", CHANNEL_NAMES.join(","));
    let _ = writeln!(s, "elevation_min = {}", spec.elevation_min);
    let _ = writeln!(s, "elevation_max = {}", spec.elevation_max);
    let _ = writeln!(s, "azimuth_min = {}", spec.azimuth_min);
    let _ = writeln!(s, "azimuth_max = {}", spec.azimuth_max);
    let _ = writeln!(s, "max_range = {}", spec.max_range);
    let _ = writeln!(s, "z_min = {}", spec.z_min);
    let _ = writeln!(s, "z_max = {}", spec.z_max);
    s
}

/// Writes `<stem>_<channel>.pgm` per channel, `<stem>_occupancy.pgm` and
/// the `<stem>.txt` header into `dir`.
pub fn write_projection(
    dir: &Path,
    stem: &str,
    img: &SphericalImage,
    spec: &GridSpec,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (c, name) in CHANNEL_NAMES.iter().enumerate() {
        img.image
            .save_plane(c, &dir.join(format!("{stem}_{name}.pgm")))?;
    }
    let occ = Image::from_planes(
        1,
        img.height(),
        img.width(),
        img.occupancy
            .iter()
            .map(|&o| if o { 1.0 } else { 0.0 })
            .collect(),
    )?;
    occ.save_plane(0, &dir.join(format!("{stem}_occupancy.pgm")))?;
    let header = dir.join(format!("{stem}.txt"));
    std::fs::write(&header, header_text(spec)).map_err(|e| Error::io(&header, e))
}
