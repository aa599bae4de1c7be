//! Token-to-sequence cross-attention fusion.
//!
//! The LiDAR class token is the only query. Keys and values come from the
//! class token stacked on top of the camera patch tokens, and the
//! attention output is added back onto the class token:
//!
//! ```text
//! kv    = [cls; camera]                      (n + 1) × d
//! fused = cls + W_o · softmax(q Kᵀ/√d_h) V   per head, q = cls·W_q
//! ```
//!
//! With bias-free key/value projections, all-zero camera tokens produce
//! exactly-zero value rows, so their contribution to the output vanishes
//! even though they still receive softmax weight.

use std::time::Instant;

use crate::flops;
use crate::nn::{
    join, AttentionCache, MultiHeadAttention, Parameters, TokenPosition, TokenSequence,
};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub bias_free_kv: bool,
}

impl FusionConfig {
    /// 64 wide, 2 blocks, 4 heads, bias-free keys and values.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            depth: 2,
            n_heads: 4,
            bias_free_kv: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(
                "fusion: embed_dim must be divisible by n_heads".into(),
            ));
        }
        if self.depth == 0 {
            return Err(Error::Config("fusion: depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stack of unshared cross-attention blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion<T> {
    pub blocks: Vec<MultiHeadAttention<T>>,
}

#[derive(Clone, Debug)]
pub struct FusionCache<T> {
    blocks: Vec<AttentionCache<T>>,
    n_camera: usize,
}

impl<T> FusionCache<T> {
    pub fn attention(&self, block: usize) -> &AttentionCache<T> {
        &self.blocks[block]
    }
}

fn stack_kv<T: Scalar>(cls: &Tensor<T>, camera: &Tensor<T>) -> Tensor<T> {
    let d = cls.cols();
    let mut data = Vec::with_capacity((camera.rows() + 1) * d);
    data.extend_from_slice(cls.data());
    data.extend_from_slice(camera.data());
    Tensor::matrix(camera.rows() + 1, d, data)
}

impl<T: Scalar> Fusion<T> {
    pub fn new(cfg: &FusionConfig, rng: &mut SplitMix64) -> Self {
        Self {
            blocks: (0..cfg.depth)
                .map(|_| {
                    MultiHeadAttention::new(
                        cfg.embed_dim,
                        cfg.n_heads,
                        true,
                        !cfg.bias_free_kv,
                        rng,
                    )
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].dim()
    }

    fn check(&self, cls: &Tensor<T>, camera: &Tensor<T>) -> Result<()> {
        let d = self.dim();
        if cls.rows() != 1 || cls.cols() != d || (camera.rows() > 0 && camera.cols() != d) {
            return Err(Error::shape(format!(
                "fusion expects a 1x{d} class token and n x {d} camera tokens, got {:?} and {:?}",
                cls.shape(),
                camera.shape()
            )));
        }
        Ok(())
    }

    /// Fuses a `1 × d` class token with `n × d` camera tokens.
    pub fn forward(
        &self,
        cls: &Tensor<T>,
        camera: &Tensor<T>,
    ) -> Result<(Tensor<T>, FusionCache<T>)> {
        self.check(cls, camera)?;
        let mut cur = cls.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, attn) in self.blocks.iter().enumerate() {
            let kv = stack_kv(&cur, camera);
            let (a, cache) = attn.forward(&cur, &kv);
            cur.add_assign(&a);
            if !cur.all_finite() {
                return Err(Error::Numerical {
                    path: format!("fusion.block{i}"),
                });
            }
            caches.push(cache);
        }
        Ok((
            cur,
            FusionCache {
                blocks: caches,
                n_camera: camera.rows(),
            },
        ))
    }

    /// Same result as [`Fusion::forward`] without retaining caches.
    pub fn infer(&self, cls: &Tensor<T>, camera: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(cls, camera)?;
        let mut cur = cls.clone();
        for attn in &self.blocks {
            let kv = stack_kv(&cur, camera);
            let a = attn.infer(&cur, &kv);
            cur.add_assign(&a);
        }
        Ok(cur)
    }

    /// Returns `(dL/dcls, dL/dcamera)`.
    pub fn backward(
        &self,
        cache: &FusionCache<T>,
        dfused: &Tensor<T>,
        grads: &mut Self,
    ) -> (Tensor<T>, Tensor<T>) {
        let d = self.dim();
        let n = cache.n_camera;
        let mut dcur = dfused.clone();
        let mut dcamera = Tensor::zeros(&[n, d]);
        for (i, attn) in self.blocks.iter().enumerate().rev() {
            let (dq, dkv) = attn.backward(&cache.blocks[i], &dcur, &mut grads.blocks[i]);
            // skip connection + query path + first key/value row
            dcur.add_assign(&dq);
            for (g, &v) in dcur.data_mut().iter_mut().zip(dkv.row(0)) {
                *g += v;
            }
            for (g, &v) in dcamera.data_mut().iter_mut().zip(&dkv.data()[d..]) {
                *g += v;
            }
        }
        (dcur, dcamera)
    }
}

impl<T: Scalar> Parameters<T> for Fusion<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}.attn")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}.attn")), f);
        }
    }
}

/// Fuses one class-token vector with camera tokens; returns the fused vector.
pub fn cross_attention_fuse<T: Scalar>(
    lidar_cls: &[T],
    camera_tokens: &Tensor<T>,
    fusion: &Fusion<T>,
) -> Result<Vec<T>> {
    let cls = Tensor::matrix(1, lidar_cls.len(), lidar_cls.to_vec());
    Ok(fusion.infer(&cls, camera_tokens)?.into_data())
}

/// Replaces the class-token slot of `decoder_tokens` with its fusion
/// output. Patch tokens pass through untouched. Tokens must already be at
/// fusion width.
pub fn fuse_into_sequence<T: Scalar>(
    decoder_tokens: &TokenSequence<T>,
    camera_tokens: &Tensor<T>,
    fusion: &Fusion<T>,
) -> Result<TokenSequence<T>> {
    if !decoder_tokens.has_class_token
        || decoder_tokens.positions.first() != Some(&TokenPosition::Class)
    {
        return Err(Error::contract(
            "fuse_into_sequence",
            "decoder sequence has no class token",
        ));
    }
    let fused = cross_attention_fuse(decoder_tokens.tokens.row(0), camera_tokens, fusion)?;
    let mut out = decoder_tokens.clone();
    out.tokens.row_mut(0).copy_from_slice(&fused);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    /// One class token attends to `n + 1` keys.
    TokenToSequence,
    /// `n` queries attend to `n` keys.
    SequenceToSequence,
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::TokenToSequence => "token_to_sequence",
            Mechanism::SequenceToSequence => "sequence_to_sequence",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub mechanism: Mechanism,
    pub mean_ns: f64,
    pub std_ns: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln(mean time)` against `ln(n)`.
    pub token_to_sequence_slope: f64,
    pub sequence_to_sequence_slope: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,mechanism,mean_ns,std_ns,flops\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.1},{:.1},{}\n",
                r.n,
                r.mechanism.name(),
                r.mean_ns,
                r.std_ns,
                r.flops
            ));
        }
        s
    }

    pub fn mean(&self, n: usize, mechanism: Mechanism) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.mechanism == mechanism)
            .map(|r| r.mean_ns)
    }
}

pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn time_runs(reps: usize, mut f: impl FnMut()) -> (f64, f64) {
    f(); // warm-up
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var =
        samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (reps.max(2) - 1) as f64;
    (mean, var.sqrt())
}

/// Times token-to-sequence fusion against an `n`-query cross-attention
/// baseline at each camera sequence length in `n_values`.
pub fn bench_fusion_complexity(
    n_values: &[usize],
    cfg: &FusionConfig,
    reps: usize,
) -> Result<BenchReport> {
    cfg.validate()?;
    if n_values.len() < 2 || n_values.windows(2).any(|w| w[0] >= w[1]) || reps == 0 {
        return Err(Error::Config(
            "benchmark needs ascending sequence lengths and at least one repetition".into(),
        ));
    }
    let mut rng = SplitMix64::new(0xBE7C);
    let fusion = Fusion::<f32>::new(cfg, &mut rng);
    // the baseline uses the same projections as the first fusion block
    let baseline = fusion.blocks[0].clone();
    let d = cfg.embed_dim;
    let random = |rows: usize, rng: &mut SplitMix64| {
        Tensor::matrix(
            rows,
            d,
            (0..rows * d).map(|_| rng.normal() as f32).collect(),
        )
    };
    let cls = random(1, &mut rng);
    let mut rows = Vec::new();
    for &n in n_values {
        let camera = random(n, &mut rng);
        let queries = random(n, &mut rng);

        let (_, t2s_flops) = flops::measure(|| fusion.infer(&cls, &camera));
        let (mean, std) = time_runs(reps, || {
            std::hint::black_box(fusion.infer(&cls, &camera).unwrap());
        });
        rows.push(BenchRow {
            n,
            mechanism: Mechanism::TokenToSequence,
            mean_ns: mean,
            std_ns: std,
            flops: t2s_flops.total,
        });

        let (_, s2s_flops) = flops::measure(|| baseline.infer(&queries, &camera));
        let (mean, std) = time_runs(reps, || {
            std::hint::black_box(baseline.infer(&queries, &camera));
        });
        rows.push(BenchRow {
            n,
            mechanism: Mechanism::SequenceToSequence,
            mean_ns: mean,
            std_ns: std,
            flops: s2s_flops.total,
        });
    }
    let slope = |m: Mechanism| {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.mechanism == m)
            .map(|r| (r.n as f64, r.mean_ns))
            .collect();
        log_log_slope(&pts)
    };
    Ok(BenchReport {
        token_to_sequence_slope: slope(Mechanism::TokenToSequence),
        sequence_to_sequence_slope: slope(Mechanism::SequenceToSequence),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor<f64> {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    }

    fn cfg(depth: usize, heads: usize) -> FusionConfig {
        FusionConfig {
            embed_dim: 8,
            depth,
            n_heads: heads,
            bias_free_kv: true,
        }
    }

    fn scaled(fusion: &mut Fusion<f64>) {
        fusion.visit_mut("", &mut |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v *= 25.0)
        });
    }

    /// Direct float64 evaluation of one fusion block from the formula.
    fn oracle_block(attn: &MultiHeadAttention<f64>, cls: &[f64], camera: &Tensor<f64>) -> Vec<f64> {
        let d = cls.len();
        let hd = d / attn.n_heads;
        let lin = |l: &crate::nn::Linear<f64>, x: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|j| {
                    l.bias.as_ref().map_or(0.0, |b| b.data()[j])
                        + (0..d)
                            .map(|i| x[i] * l.weight.data()[i * d + j])
                            .sum::<f64>()
                })
                .collect()
        };
        let mut rows: Vec<Vec<f64>> = vec![cls.to_vec()];
        rows.extend((0..camera.rows()).map(|r| camera.row(r).to_vec()));
        let q = lin(&attn.w_q, cls);
        let ks: Vec<_> = rows.iter().map(|r| lin(&attn.w_k, r)).collect();
        let vs: Vec<_> = rows.iter().map(|r| lin(&attn.w_v, r)).collect();
        let mut att = vec![0.0; d];
        for h in 0..attn.n_heads {
            let s: Vec<f64> = ks
                .iter()
                .map(|k| {
                    (0..hd).map(|i| q[h * hd + i] * k[h * hd + i]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for (j, v) in vs.iter().enumerate() {
                for i in 0..hd {
                    att[h * hd + i] += (s[j] - mx).exp() / z * v[h * hd + i];
                }
            }
        }
        let o = lin(&attn.w_o, &att);
        cls.iter().zip(o).map(|(a, b)| a + b).collect()
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = SplitMix64::new(10);
        let mut fusion = Fusion::<f64>::new(&cfg(1, 1), &mut rng);
        scaled(&mut fusion);
        let cls = random(1, 8, &mut rng);
        let camera = random(4, 8, &mut rng);
        let got = cross_attention_fuse(cls.data(), &camera, &fusion).unwrap();
        let want = oracle_block(&fusion.blocks[0], cls.data(), &camera);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_two_iterates_the_single_block_oracle() {
        let mut rng = SplitMix64::new(11);
        let mut fusion = Fusion::<f64>::new(&cfg(2, 2), &mut rng);
        scaled(&mut fusion);
        let cls = random(1, 8, &mut rng);
        let camera = random(5, 8, &mut rng);
        let got = cross_attention_fuse(cls.data(), &camera, &fusion).unwrap();
        let once = oracle_block(&fusion.blocks[0], cls.data(), &camera);
        let twice = oracle_block(&fusion.blocks[1], &once, &camera);
        for (a, b) in got.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn zero_camera_contributes_nothing_but_keeps_weight() {
        let mut rng = SplitMix64::new(12);
        let mut fusion = Fusion::<f64>::new(&cfg(1, 2), &mut rng);
        scaled(&mut fusion);
        let cls = random(1, 8, &mut rng);
        let camera = Tensor::zeros(&[6, 8]);
        let (fused, cache) = fusion.forward(&cls, &camera).unwrap();
        let attn = &fusion.blocks[0];
        // output = cls + W_o(w₀ · V₀) per head
        let v0 = attn.w_v.forward(&cls);
        let hd = 4;
        let mut weighted = Tensor::zeros(&[1, 8]);
        for h in 0..2 {
            let w0 = cache.attention(0).weights(h, 0)[0];
            assert!(w0 < 1.0, "zero keys still receive softmax weight");
            for i in 0..hd {
                weighted.data_mut()[h * hd + i] = w0 * v0.data()[h * hd + i];
            }
        }
        let want = attn.w_o.forward(&weighted);
        for i in 0..8 {
            assert!((fused.data()[i] - cls.data()[i] - want.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn no_camera_tokens_means_singleton_softmax() {
        let mut rng = SplitMix64::new(13);
        let fusion = Fusion::<f64>::new(&cfg(1, 2), &mut rng);
        let cls = random(1, 8, &mut rng);
        let fused = cross_attention_fuse(cls.data(), &Tensor::zeros(&[0, 8]), &fusion).unwrap();
        let attn = &fusion.blocks[0];
        let want = attn.w_o.forward(&attn.w_v.forward(&cls));
        for i in 0..8 {
            assert!((fused[i] - cls.data()[i] - want.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_tokens_pass_through() {
        let mut rng = SplitMix64::new(14);
        let fusion = Fusion::<f64>::new(&cfg(2, 2), &mut rng);
        let seq = TokenSequence::for_grid(random(5, 8, &mut rng), true, (2, 2));
        let camera = random(3, 8, &mut rng);
        let out = fuse_into_sequence(&seq, &camera, &fusion).unwrap();
        assert_eq!(out.tokens.data()[8..], seq.tokens.data()[8..]);
        assert_ne!(out.tokens.row(0), seq.tokens.row(0));
        assert_eq!(out.positions, seq.positions);
    }

    #[test]
    fn missing_class_token_is_contract_error() {
        let mut rng = SplitMix64::new(15);
        let fusion = Fusion::<f64>::new(&cfg(1, 2), &mut rng);
        let seq = TokenSequence::for_grid(random(4, 8, &mut rng), false, (2, 2));
        assert!(matches!(
            fuse_into_sequence(&seq, &random(3, 8, &mut rng), &fusion),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let mut rng = SplitMix64::new(16);
        let fusion = Fusion::<f64>::new(&cfg(1, 2), &mut rng);
        assert!(cross_attention_fuse(&[0.0; 8], &random(3, 4, &mut rng), &fusion).is_err());
    }

    #[test]
    fn flop_count_is_affine_in_camera_length() {
        let mut rng = SplitMix64::new(17);
        let fusion = Fusion::<f32>::new(&FusionConfig::desk(), &mut rng);
        let cls = Tensor::zeros(&[1, 64]);
        let counts: Vec<i128> = (0..6)
            .map(|n| {
                let cam = Tensor::zeros(&[n * 7, 64]);
                flops::measure(|| fusion.infer(&cls, &cam).unwrap()).1.total as i128
            })
            .collect();
        let step = counts[1] - counts[0];
        assert!(step > 0);
        for w in counts.windows(2) {
            assert_eq!(w[1] - w[0], step);
        }
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&n: &f64| (n, 3.0 * n.powf(1.5)))
            .collect();
        assert!((log_log_slope(&pts) - 1.5).abs() < 1e-12);
    }
}
