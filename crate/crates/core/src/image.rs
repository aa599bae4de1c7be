//! Planar multi-channel images with values in `[0, 1]`, and their
//! export to/import from ordinary image files.

use std::path::Path;

use ::image::{ImageBuffer, Luma};

use crate::{Error, Result};

/// `channels` planes of `height × width` values, stored plane by plane,
/// each plane row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_planes(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
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

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_unit_range(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Writes one channel as a 16-bit grayscale image; the format follows
    /// the extension (`.pgm`, `.png`).
    pub fn save_plane(&self, c: usize, path: &Path) -> Result<()> {
        let plane = self.plane(c);
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let v = plane[y as usize * self.width + x as usize].clamp(0.0, 1.0);
                Luma([(v * 65535.0).round() as u16])
            });
        let is_pgm = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if is_pgm {
            // binary graymap; the generic saver would emit PAM instead
            let mut bytes = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
            bytes.extend(buf.as_raw().iter().flat_map(|v| v.to_be_bytes()));
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        } else {
            buf.save(path)?;
        }
        Ok(())
    }

    /// Writes a 3-channel image as 8-bit RGB.
    pub fn save_rgb(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::shape(format!(
                "RGB export needs 3 channels, image has {}",
                self.channels
            )));
        }
        let buf = ::image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px =
                |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            ::image::Rgb([px(0), px(1), px(2)])
        });
        buf.save(path)?;
        Ok(())
    }

    /// Reads any supported image file as a 3-channel image in `[0, 1]`.
    pub fn load_rgb(path: &Path) -> Result<Self> {
        let rgb = ::image::open(path)?.into_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Self::zeros(3, h, w);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                img.set(c, y as usize, x as usize, px.0[c].clamp(0.0, 1.0));
            }
        }
        Ok(img)
    }
}
