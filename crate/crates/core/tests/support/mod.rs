//! Independent oracles shared by the integration tests. Nothing here
//! calls into the implementation it is used to check.
#![allow(dead_code)]

pub mod fd;
pub mod mae;
pub mod mssim;
pub mod raycast;

use masked_fusion::image::Image;
use masked_fusion::rng::SplitMix64;
use masked_fusion::tensor::Tensor;

pub fn random_image(c: usize, h: usize, w: usize, rng: &mut SplitMix64) -> Image {
    Image::from_planes(
        c,
        h,
        w,
        (0..c * h * w).map(|_| rng.next_f64() as f32).collect(),
    )
    .unwrap()
}

pub fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| scale * rng.normal()).collect(),
    )
}

/// `Σ out ⊙ weights`, a scalar probe loss with a known output gradient.
pub fn dot(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}
