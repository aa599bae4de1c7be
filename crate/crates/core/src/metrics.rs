//! Structural similarity (SSIM) and its multiscale form (MSSIM).
//!
//! Filtering is "valid" (no padding) with an 11-tap Gaussian, σ = 1.5.
//! Images whose sides are too short for all five scales use only the
//! scales that fit, with the weights of the kept scales renormalized to
//! sum to one. Negative mean contrast–structure terms are clamped at zero
//! before exponentiation so fractional weights stay real.

use crate::image::Image;
use crate::{Error, Result};

pub const MSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub data_range: f64,
    pub weights: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            weights: MSSIM_WEIGHTS.to_vec(),
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    /// Number of scales usable for an `h × w` image.
    pub fn usable_scales(&self, mut h: usize, mut w: usize) -> usize {
        let mut n = 0;
        while n < self.weights.len() && h >= self.window && w >= self.window {
            n += 1;
            h /= 2;
            w /= 2;
        }
        n
    }
}

/// A borrowed single-channel image.
#[derive(Clone, Copy, Debug)]
pub struct Plane<'a> {
    pub data: &'a [f64],
    pub height: usize,
    pub width: usize,
}

/// Valid separable convolution of a plane with `kernel` along both axes.
fn filter(data: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = kernel.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, &kv) in kernel.iter().enumerate() {
            let src = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (o, &s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Mean SSIM and mean contrast–structure term of two planes.
fn ssim_and_cs(x: Plane<'_>, y: Plane<'_>, p: &SsimParams) -> Result<(f64, f64)> {
    if x.height != y.height || x.width != y.width || x.data.len() != y.data.len() {
        return Err(Error::shape("SSIM inputs must have equal shapes"));
    }
    if x.height < p.window || x.width < p.window {
        return Err(Error::TooSmall {
            height: x.height,
            width: x.width,
            window: p.window,
        });
    }
    let (h, w) = (x.height, x.width);
    let k = p.kernel();
    let xx: Vec<f64> = x.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.data.iter().zip(y.data).map(|(a, b)| a * b).collect();
    let mu_x = filter(x.data, h, w, &k);
    let mu_y = filter(y.data, h, w, &k);
    let e_xx = filter(&xx, h, w, &k);
    let e_yy = filter(&yy, h, w, &k);
    let e_xy = filter(&xy, h, w, &k);
    let (c1, c2) = (p.c1(), p.c2());
    let n = mu_x.len() as f64;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let cs = (2.0 * cov + c2) / (vx + vy + c2);
        let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        ssim_sum += lum * cs;
        cs_sum += cs;
    }
    Ok((ssim_sum / n, cs_sum / n))
}

fn downsample(data: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = 0.25
                * (data[2 * y * w + 2 * x]
                    + data[2 * y * w + 2 * x + 1]
                    + data[(2 * y + 1) * w + 2 * x]
                    + data[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, oh, ow)
}

pub fn ssim_plane(x: Plane<'_>, y: Plane<'_>, p: &SsimParams) -> Result<f64> {
    Ok(ssim_and_cs(x, y, p)?.0)
}

pub fn mssim_plane(x: Plane<'_>, y: Plane<'_>, p: &SsimParams) -> Result<f64> {
    let scales = p.usable_scales(x.height, x.width);
    if scales == 0 {
        return Err(Error::TooSmall {
            height: x.height,
            width: x.width,
            window: p.window,
        });
    }
    let total: f64 = p.weights[..scales].iter().sum();
    let (mut xs, mut ys) = (x.data.to_vec(), y.data.to_vec());
    let (mut h, mut w) = (x.height, x.width);
    let mut score = 1.0;
    for s in 0..scales {
        let (ssim, cs) = ssim_and_cs(
            Plane {
                data: &xs,
                height: h,
                width: w,
            },
            Plane {
                data: &ys,
                height: h,
                width: w,
            },
            p,
        )?;
        let term = if s + 1 == scales { ssim } else { cs };
        score *= term.max(0.0).powf(p.weights[s] / total);
        if s + 1 < scales {
            let (nx, nh, nw) = downsample(&xs, h, w);
            ys = downsample(&ys, h, w).0;
            xs = nx;
            (h, w) = (nh, nw);
        }
    }
    Ok(score)
}

fn per_channel(
    x: &Image,
    y: &Image,
    f: impl Fn(Plane<'_>, Plane<'_>) -> Result<f64>,
) -> Result<f64> {
    if (x.channels(), x.height(), x.width()) != (y.channels(), y.height(), y.width()) {
        return Err(Error::shape("images must have equal shapes"));
    }
    if x.channels() == 0 {
        return Err(Error::shape("image has no channels"));
    }
    let mut sum = 0.0;
    for c in 0..x.channels() {
        let a: Vec<f64> = x.plane(c).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.plane(c).iter().map(|&v| v as f64).collect();
        sum += f(
            Plane {
                data: &a,
                height: x.height(),
                width: x.width(),
            },
            Plane {
                data: &b,
                height: y.height(),
                width: y.width(),
            },
        )?;
    }
    Ok(sum / x.channels() as f64)
}

/// Single-scale SSIM averaged over channels.
pub fn ssim(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    per_channel(x, y, |a, b| ssim_plane(a, b, p))
}

/// Multiscale SSIM averaged over channels.
pub fn mssim(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    per_channel(x, y, |a, b| mssim_plane(a, b, p))
}
