//! The full masked autoencoder: LiDAR encoder on visible patches, camera
//! encoder, class-token fusion, decoder and per-patch prediction head.
//!
//! ```text
//! lidar ─ patchify ─ embed+pos ─ gather visible ─ [CLS] ─ lidar encoder ─ enc→dec
//!   ─ scatter mask tokens (+dec pos) ─┬─ CLS ─ dec→fusion ─ fusion ─ fusion→dec ─┐
//!                                     └─ patch tokens ──────────────────────────┴─ decoder ─ head ─ unpatchify
//! camera ─ patchify ─ embed+pos ─ [CLS] ─ camera encoder ─ drop CLS ─ camera→fusion ─┘ (keys/values)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::config::KeyValues;
use crate::flops::{self, FlopCount};
use crate::fusion::{Fusion, FusionCache, FusionConfig};
use crate::image::Image;
use crate::lidar::GridSpec;
use crate::nn::{
    sincos_2d, truncated_normal, Encoder, EncoderCache, Linear, Parameters, TransformerConfig,
};
use crate::patching::{
    patchify, scatter_rows, scatter_rows_backward, unpatchify, MaskPlan, PatchSequence,
};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Variance floor of per-patch target normalization.
const TARGET_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossScope {
    MaskedOnly,
    AllPatches,
}

impl LossScope {
    fn name(&self) -> &'static str {
        match self {
            LossScope::MaskedOnly => "masked_only",
            LossScope::AllPatches => "all_patches",
        }
    }
}

impl std::str::FromStr for LossScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_only" => Ok(LossScope::MaskedOnly),
            "all_patches" => Ok(LossScope::AllPatches),
            _ => Err(Error::Config(format!("unknown loss scope `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraMode {
    /// Camera image through the camera encoder.
    Full,
    /// All-zero camera image through the camera encoder.
    ZeroImage,
    /// Camera encoder bypassed; fusion sees exactly-zero camera tokens.
    ZeroTokens,
}

impl CameraMode {
    pub fn name(&self) -> &'static str {
        match self {
            CameraMode::Full => "full",
            CameraMode::ZeroImage => "zero-image",
            CameraMode::ZeroTokens => "zero-tokens",
        }
    }
}

impl std::str::FromStr for CameraMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CameraMode::Full),
            "zero-image" => Ok(CameraMode::ZeroImage),
            "zero-tokens" => Ok(CameraMode::ZeroTokens),
            _ => Err(Error::Config(format!("unknown camera mode `{s}`"))),
        }
    }
}

/// Every hyperparameter that shapes the model.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub camera_height: usize,
    pub camera_width: usize,
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub lidar_encoder: TransformerConfig,
    pub camera_encoder: TransformerConfig,
    pub fusion: FusionConfig,
    pub decoder: TransformerConfig,
    pub loss_scope: LossScope,
    pub normalize_targets: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    /// Desk scale: 32×256 forward LiDAR grid, 64×64 camera, all widths 64.
    fn default() -> Self {
        Self {
            grid: GridSpec::desk_forward(),
            camera_height: 64,
            camera_width: 64,
            patch_size: 8,
            mask_ratio: 0.5,
            lidar_encoder: TransformerConfig::desk(),
            camera_encoder: TransformerConfig::desk(),
            fusion: FusionConfig::desk(),
            decoder: TransformerConfig::desk(),
            loss_scope: LossScope::MaskedOnly,
            normalize_targets: false,
            seed: 0,
        }
    }
}

fn write_transformer(s: &mut String, name: &str, t: &TransformerConfig) {
    let _ = writeln!(s, "{name}.embed_dim = {}", t.embed_dim);
    let _ = writeln!(s, "{name}.depth = {}", t.depth);
    let _ = writeln!(s, "{name}.n_heads = {}", t.n_heads);
    let _ = writeln!(s, "{name}.mlp_ratio = {}", t.mlp_ratio);
}

fn take_transformer(
    kv: &mut KeyValues,
    name: &str,
    d: TransformerConfig,
) -> Result<TransformerConfig> {
    Ok(TransformerConfig {
        embed_dim: kv.take_or(&format!("{name}.embed_dim"), d.embed_dim)?,
        depth: kv.take_or(&format!("{name}.depth"), d.depth)?,
        n_heads: kv.take_or(&format!("{name}.n_heads"), d.n_heads)?,
        mlp_ratio: kv.take_or(&format!("{name}.mlp_ratio"), d.mlp_ratio)?,
    })
}

/// Angle keys accept radians (`grid.azimuth_min`) or degrees
/// (`grid.azimuth_min_deg`), not both.
fn take_angle(kv: &mut KeyValues, key: &str, default: f64) -> Result<f64> {
    let rad: Option<f64> = kv.take(key)?;
    let deg: Option<f64> = kv.take(&format!("{key}_deg"))?;
    match (rad, deg) {
        (Some(_), Some(_)) => Err(Error::Config(format!("both {key} and {key}_deg given"))),
        (Some(r), None) => Ok(r),
        (None, Some(d)) => Ok(d.to_radians()),
        (None, None) => Ok(default),
    }
}

impl RunConfig {
    pub fn n_patches(&self) -> usize {
        (self.grid.height / self.patch_size) * (self.grid.width / self.patch_size)
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (
            self.grid.height / self.patch_size,
            self.grid.width / self.patch_size,
        )
    }

    pub fn camera_patch_grid(&self) -> (usize, usize) {
        (
            self.camera_height / self.patch_size,
            self.camera_width / self.patch_size,
        )
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let p = self.patch_size;
        if p == 0
            || self.grid.height % p != 0
            || self.grid.width % p != 0
            || self.camera_height % p != 0
            || self.camera_width % p != 0
            || self.camera_height == 0
            || self.camera_width == 0
        {
            return Err(Error::Config(format!(
                "patch size {p} must divide the {}x{} grid and the {}x{} camera",
                self.grid.height, self.grid.width, self.camera_height, self.camera_width
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        self.lidar_encoder.validate("lidar_encoder")?;
        self.camera_encoder.validate("camera_encoder")?;
        self.decoder.validate("decoder")?;
        self.fusion.validate()
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "mask_ratio = {}", self.mask_ratio);
        let _ = writeln!(s, "loss_scope = {}", self.loss_scope.name());
        let _ = writeln!(s, "normalize_targets = {}", self.normalize_targets);
        let _ = writeln!(s, "grid.rows = {}", g.height);
        let _ = writeln!(s, "grid.cols = {}", g.width);
        let _ = writeln!(s, "grid.elevation_min = {}", g.elevation_min);
        let _ = writeln!(s, "grid.elevation_max = {}", g.elevation_max);
        let _ = writeln!(s, "grid.azimuth_min = {}", g.azimuth_min);
        let _ = writeln!(s, "grid.azimuth_max = {}", g.azimuth_max);
        let _ = writeln!(s, "grid.max_range = {}", g.max_range);
        let _ = writeln!(s, "grid.z_min = {}", g.z_min);
        let _ = writeln!(s, "grid.z_max = {}", g.z_max);
        let _ = writeln!(s, "camera.rows = {}", self.camera_height);
        let _ = writeln!(s, "camera.cols = {}", self.camera_width);
        write_transformer(&mut s, "lidar_encoder", &self.lidar_encoder);
        write_transformer(&mut s, "camera_encoder", &self.camera_encoder);
        let _ = writeln!(s, "fusion.embed_dim = {}", self.fusion.embed_dim);
        let _ = writeln!(s, "fusion.depth = {}", self.fusion.depth);
        let _ = writeln!(s, "fusion.n_heads = {}", self.fusion.n_heads);
        let _ = writeln!(s, "fusion.bias_free_kv = {}", self.fusion.bias_free_kv);
        write_transformer(&mut s, "decoder", &self.decoder);
        s
    }

    /// Consumes the model keys from `kv`, defaulting missing ones.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let g = d.grid;
        let cfg = Self {
            seed: kv.take_or("seed", d.seed)?,
            patch_size: kv.take_or("patch_size", d.patch_size)?,
            mask_ratio: kv.take_or("mask_ratio", d.mask_ratio)?,
            loss_scope: kv.take_or("loss_scope", d.loss_scope)?,
            normalize_targets: kv.take_or("normalize_targets", d.normalize_targets)?,
            grid: GridSpec {
                height: kv.take_or("grid.rows", g.height)?,
                width: kv.take_or("grid.cols", g.width)?,
                elevation_min: take_angle(kv, "grid.elevation_min", g.elevation_min)?,
                elevation_max: take_angle(kv, "grid.elevation_max", g.elevation_max)?,
                azimuth_min: take_angle(kv, "grid.azimuth_min", g.azimuth_min)?,
                azimuth_max: take_angle(kv, "grid.azimuth_max", g.azimuth_max)?,
                max_range: kv.take_or("grid.max_range", g.max_range)?,
                z_min: kv.take_or("grid.z_min", g.z_min)?,
                z_max: kv.take_or("grid.z_max", g.z_max)?,
            },
            camera_height: kv.take_or("camera.rows", d.camera_height)?,
            camera_width: kv.take_or("camera.cols", d.camera_width)?,
            lidar_encoder: take_transformer(kv, "lidar_encoder", d.lidar_encoder)?,
            camera_encoder: take_transformer(kv, "camera_encoder", d.camera_encoder)?,
            fusion: FusionConfig {
                embed_dim: kv.take_or("fusion.embed_dim", d.fusion.embed_dim)?,
                depth: kv.take_or("fusion.depth", d.fusion.depth)?,
                n_heads: kv.take_or("fusion.n_heads", d.fusion.n_heads)?,
                bias_free_kv: kv.take_or("fusion.bias_free_kv", d.fusion.bias_free_kv)?,
            },
            decoder: take_transformer(kv, "decoder", d.decoder)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::from_key_values(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// FLOPs per pipeline stage of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageFlops {
    pub lidar_encoder: FlopCount,
    pub camera_encoder: FlopCount,
    pub fusion: FlopCount,
    pub decoder: FlopCount,
    pub total: FlopCount,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Predicted projection, all patches (not clamped).
    pub reconstruction: Image,
    /// Mean squared error of each patch, row-major slot order.
    pub per_patch_loss: Vec<f64>,
    /// Mean of `per_patch_loss` over the loss-scope patches (0 if none).
    pub loss: f64,
    pub plan: MaskPlan,
    pub patch_size: usize,
    pub flops: StageFlops,
}

impl ForwardOutput {
    /// Target everywhere except masked patches, which take the
    /// reconstruction. Values clamped to `[0, 1]`.
    pub fn masked_composite(&self, target: &Image) -> Result<Image> {
        let recon = patchify(&self.reconstruction, self.patch_size)?;
        let mut out = patchify(target, self.patch_size)?;
        if out.n_patches() != self.plan.n_patches() || out.data.len() != recon.data.len() {
            return Err(Error::shape("target does not match the reconstruction"));
        }
        let d = out.patch_dim();
        for &slot in self.plan.masked() {
            out.data[slot * d..(slot + 1) * d].copy_from_slice(recon.patch(slot));
        }
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        unpatchify(&out)
    }

    pub fn clamped_reconstruction(&self) -> Image {
        let mut img = self.reconstruction.clone();
        img.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
        img
    }
}

/// All learnable tensors plus the fixed positional tables.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeModel<T> {
    pub lidar_embed: Linear<T>,
    pub lidar_cls: Tensor<T>,
    pub lidar_enc: Encoder<T>,
    pub camera_embed: Linear<T>,
    pub camera_cls: Tensor<T>,
    pub camera_enc: Encoder<T>,
    pub enc_to_dec: Linear<T>,
    pub mask_token: Tensor<T>,
    pub dec_to_fusion: Linear<T>,
    pub camera_to_fusion: Linear<T>,
    pub fusion: Fusion<T>,
    pub fusion_to_dec: Linear<T>,
    pub decoder: Encoder<T>,
    pub head: Linear<T>,
    config: RunConfig,
    lidar_pos: Tensor<T>,
    camera_pos: Tensor<T>,
    decoder_pos: Tensor<T>,
}

struct CameraCache<T> {
    patches: Tensor<T>,
    enc: EncoderCache<T>,
    tokens: Tensor<T>,
}

struct Cache<T> {
    visible_patches: Tensor<T>,
    lidar_enc: EncoderCache<T>,
    enc_out: Tensor<T>,
    cls_dec: Tensor<T>,
    camera: Option<CameraCache<T>>,
    fusion: FusionCache<T>,
    fused: Tensor<T>,
    decoder: EncoderCache<T>,
    dec_patches: Tensor<T>,
    /// dL/dprediction, `n_patches × patch_dim`.
    dpred: Tensor<T>,
}

fn prepend_row<T: Scalar>(first: &[T], rest: &Tensor<T>) -> Tensor<T> {
    let d = first.len();
    let mut data = Vec::with_capacity((rest.rows() + 1) * d);
    data.extend_from_slice(first);
    data.extend_from_slice(rest.data());
    Tensor::matrix(rest.rows() + 1, d, data)
}

fn drop_first_row<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let d = t.cols();
    Tensor::matrix(t.rows() - 1, d, t.data()[d..].to_vec())
}

impl<T: Scalar> MaeModel<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let (le, ce, de, fe) = (
            config.lidar_encoder.embed_dim,
            config.camera_encoder.embed_dim,
            config.decoder.embed_dim,
            config.fusion.embed_dim,
        );
        let pd = config.patch_dim();
        Ok(Self {
            lidar_embed: Linear::new(pd, le, true, &mut rng),
            lidar_cls: truncated_normal(&[1, le], &mut rng),
            lidar_enc: Encoder::new(&config.lidar_encoder, &mut rng),
            camera_embed: Linear::new(pd, ce, true, &mut rng),
            camera_cls: truncated_normal(&[1, ce], &mut rng),
            camera_enc: Encoder::new(&config.camera_encoder, &mut rng),
            enc_to_dec: Linear::new(le, de, false, &mut rng),
            mask_token: truncated_normal(&[1, de], &mut rng),
            dec_to_fusion: Linear::new(de, fe, false, &mut rng),
            camera_to_fusion: Linear::new(ce, fe, false, &mut rng),
            fusion: Fusion::new(&config.fusion, &mut rng),
            fusion_to_dec: Linear::new(fe, de, false, &mut rng),
            decoder: Encoder::new(&config.decoder, &mut rng),
            head: Linear::new(de, pd, true, &mut rng),
            lidar_pos: sincos_2d(config.patch_grid(), le),
            camera_pos: sincos_2d(config.camera_patch_grid(), ce),
            decoder_pos: sincos_2d(config.patch_grid(), de),
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> MaeModel<U> {
        let mut out = MaeModel::<U>::new(&self.config).expect("config already validated");
        let src = self.named();
        let mut i = 0;
        out.visit_mut("", &mut |k, t| {
            debug_assert_eq!(k, src[i].0);
            *t = src[i].1.cast();
            i += 1;
        });
        out
    }

    pub fn forward(&self, lidar: &Image, camera: &Image, plan: &MaskPlan) -> Result<ForwardOutput> {
        self.forward_mode(lidar, Some(camera), CameraMode::Full, plan)
    }

    /// Forward pass without camera features, either as an all-zero camera
    /// image or as exactly-zero camera tokens.
    pub fn forward_no_camera(
        &self,
        lidar: &Image,
        plan: &MaskPlan,
        mode: CameraMode,
    ) -> Result<ForwardOutput> {
        if mode == CameraMode::Full {
            return Err(Error::contract(
                "forward_no_camera",
                "mode must be zero-image or zero-tokens",
            ));
        }
        self.forward_mode(lidar, None, mode, plan)
    }

    /// `camera` is required for [`CameraMode::Full`] and ignored otherwise.
    pub fn forward_mode(
        &self,
        lidar: &Image,
        camera: Option<&Image>,
        mode: CameraMode,
        plan: &MaskPlan,
    ) -> Result<ForwardOutput> {
        Ok(self.run(lidar, camera, mode, plan)?.0)
    }

    /// Forward pass plus gradient of the loss, accumulated into `grads`.
    pub fn forward_backward(
        &self,
        lidar: &Image,
        camera: Option<&Image>,
        mode: CameraMode,
        plan: &MaskPlan,
        grads: &mut Self,
    ) -> Result<ForwardOutput> {
        let (out, cache) = self.run(lidar, camera, mode, plan)?;
        self.backward(&cache, plan, grads);
        Ok(out)
    }

    fn check_inputs(
        &self,
        lidar: &Image,
        camera: Option<&Image>,
        mode: CameraMode,
        plan: &MaskPlan,
    ) -> Result<()> {
        let c = &self.config;
        if (lidar.channels(), lidar.height(), lidar.width()) != (3, c.grid.height, c.grid.width) {
            return Err(Error::contract(
                "patchify lidar",
                format!(
                    "expected 3x{}x{}, got {}x{}x{}",
                    c.grid.height,
                    c.grid.width,
                    lidar.channels(),
                    lidar.height(),
                    lidar.width()
                ),
            ));
        }
        if mode == CameraMode::Full {
            let cam = camera.ok_or_else(|| {
                Error::contract("camera encoder", "full mode needs a camera image")
            })?;
            if (cam.channels(), cam.height(), cam.width()) != (3, c.camera_height, c.camera_width) {
                return Err(Error::contract(
                    "patchify camera",
                    format!("expected 3x{}x{}", c.camera_height, c.camera_width),
                ));
            }
        }
        if plan.n_patches() != c.n_patches() {
            return Err(Error::contract(
                "gather visible",
                format!(
                    "plan covers {} patches, model has {}",
                    plan.n_patches(),
                    c.n_patches()
                ),
            ));
        }
        plan.validate()
    }

    fn run(
        &self,
        lidar: &Image,
        camera: Option<&Image>,
        mode: CameraMode,
        plan: &MaskPlan,
    ) -> Result<(ForwardOutput, Cache<T>)> {
        self.check_inputs(lidar, camera, mode, plan)?;
        let cfg = &self.config;
        let p = cfg.patch_size;
        let n = cfg.n_patches();
        let mut stage = StageFlops::default();

        let (res, total) = flops::measure(|| -> Result<(ForwardOutput, Cache<T>)> {
            let lidar_seq = patchify(lidar, p)?;
            let all_patches: Tensor<T> = lidar_seq.to_tensor();
            let pd = all_patches.cols();

            // embed only the visible patches, in permutation order
            let mut visible_patches = Tensor::zeros(&[plan.n_keep, pd]);
            for (i, &slot) in plan.visible().iter().enumerate() {
                visible_patches
                    .row_mut(i)
                    .copy_from_slice(all_patches.row(slot));
            }
            let (enc, f) = flops::measure(|| -> Result<_> {
                let mut emb = self.lidar_embed.forward(&visible_patches);
                for (i, &slot) in plan.visible().iter().enumerate() {
                    for (v, &pp) in emb.row_mut(i).iter_mut().zip(self.lidar_pos.row(slot)) {
                        *v += pp;
                    }
                }
                let enc_in = prepend_row(self.lidar_cls.data(), &emb);
                self.lidar_enc.forward(&enc_in, "lidar_enc")
            });
            let (enc_out, lidar_enc) = enc?;
            stage.lidar_encoder = f;

            let dec_vis = self.enc_to_dec.forward(&enc_out);
            let mut full = scatter_rows(&dec_vis, plan, self.mask_token.data());
            for slot in 0..n {
                for (v, &pp) in full
                    .row_mut(1 + slot)
                    .iter_mut()
                    .zip(self.decoder_pos.row(slot))
                {
                    *v += pp;
                }
            }
            let cls_dec = Tensor::matrix(1, full.cols(), full.row(0).to_vec());

            let (cam, f) = flops::measure(|| self.camera_tokens(camera, mode));
            let (camera_f, camera_cache) = cam?;
            stage.camera_encoder = f;

            let (fused, f) = flops::measure(|| {
                let cls_f = self.dec_to_fusion.forward(&cls_dec);
                self.fusion.forward(&cls_f, &camera_f)
            });
            let (fused, fusion_cache) = fused?;
            stage.fusion = f;
            full.row_mut(0)
                .copy_from_slice(self.fusion_to_dec.forward(&fused).data());

            let (dec, f) = flops::measure(|| -> Result<_> {
                let (dec_out, dcache) = self.decoder.forward(&full, "decoder")?;
                let dec_patches = drop_first_row(&dec_out);
                let pred = self.head.forward(&dec_patches);
                Ok((dcache, dec_patches, pred))
            });
            let (decoder_cache, dec_patches, pred) = dec?;
            stage.decoder = f;

            let (target, stats) = self.targets(&all_patches);
            let (per_patch_loss, loss, dpred) = self.loss(&pred, &target, plan);

            let mut recon = pred.clone();
            if let Some(stats) = &stats {
                for (r, &(mean, std)) in stats.iter().enumerate() {
                    recon
                        .row_mut(r)
                        .iter_mut()
                        .for_each(|v| *v = *v * std + mean);
                }
            }
            let recon_seq = PatchSequence {
                data: recon.data().iter().map(|v| v.to_f32().unwrap()).collect(),
                ..lidar_seq
            };
            let out = ForwardOutput {
                reconstruction: unpatchify(&recon_seq)?,
                per_patch_loss,
                loss,
                plan: plan.clone(),
                patch_size: p,
                flops: StageFlops::default(),
            };
            let cache = Cache {
                visible_patches,
                lidar_enc,
                enc_out,
                cls_dec,
                camera: camera_cache,
                fusion: fusion_cache,
                fused,
                decoder: decoder_cache,
                dec_patches,
                dpred,
            };
            Ok((out, cache))
        });
        let (mut out, cache) = res?;
        stage.total = total;
        out.flops = stage;
        if !out.loss.is_finite() {
            return Err(Error::Numerical {
                path: "loss".into(),
            });
        }
        Ok((out, cache))
    }

    /// Camera tokens at fusion width.
    #[allow(clippy::type_complexity)]
    fn camera_tokens(
        &self,
        camera: Option<&Image>,
        mode: CameraMode,
    ) -> Result<(Tensor<T>, Option<CameraCache<T>>)> {
        let cfg = &self.config;
        let (gr, gc) = cfg.camera_patch_grid();
        if mode == CameraMode::ZeroTokens {
            return Ok((Tensor::zeros(&[gr * gc, cfg.fusion.embed_dim]), None));
        }
        let zero;
        let img = match mode {
            CameraMode::Full => camera.expect("checked"),
            _ => {
                zero = Image::zeros(3, cfg.camera_height, cfg.camera_width);
                &zero
            }
        };
        let patches: Tensor<T> = patchify(img, cfg.patch_size)?.to_tensor();
        let mut emb = self.camera_embed.forward(&patches);
        emb.add_assign(&self.camera_pos);
        let enc_in = prepend_row(self.camera_cls.data(), &emb);
        let (enc_out, enc) = self.camera_enc.forward(&enc_in, "camera_enc")?;
        let tokens = drop_first_row(&enc_out);
        let fused_width = self.camera_to_fusion.forward(&tokens);
        Ok((
            fused_width,
            Some(CameraCache {
                patches,
                enc,
                tokens,
            }),
        ))
    }

    /// Regression targets and, when normalizing, per-patch `(mean, std)`.
    #[allow(clippy::type_complexity)]
    fn targets(&self, patches: &Tensor<T>) -> (Tensor<T>, Option<Vec<(T, T)>>) {
        if !self.config.normalize_targets {
            return (patches.clone(), None);
        }
        let d = T::c(patches.cols() as f64);
        let mut out = patches.clone();
        let mut stats = Vec::with_capacity(patches.rows());
        for r in 0..patches.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let std = (var + T::c(TARGET_NORM_EPS)).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) / std);
            stats.push((mean, std));
        }
        (out, Some(stats))
    }

    fn loss(
        &self,
        pred: &Tensor<T>,
        target: &Tensor<T>,
        plan: &MaskPlan,
    ) -> (Vec<f64>, f64, Tensor<T>) {
        let pd = pred.cols();
        let per_patch: Vec<T> = (0..pred.rows())
            .map(|r| {
                pred.row(r)
                    .iter()
                    .zip(target.row(r))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>()
                    / T::c(pd as f64)
            })
            .collect();
        let scope: Vec<usize> = match self.config.loss_scope {
            LossScope::MaskedOnly => plan.masked().to_vec(),
            LossScope::AllPatches => (0..pred.rows()).collect(),
        };
        let mut dpred = Tensor::zeros(&[pred.rows(), pd]);
        let loss = if scope.is_empty() {
            T::zero()
        } else {
            let k = T::c(2.0 / (pd * scope.len()) as f64);
            for &r in &scope {
                for ((g, &a), &b) in dpred
                    .row_mut(r)
                    .iter_mut()
                    .zip(pred.row(r))
                    .zip(target.row(r))
                {
                    *g = k * (a - b);
                }
            }
            scope.iter().map(|&r| per_patch[r]).sum::<T>() / T::c(scope.len() as f64)
        };
        (
            per_patch.iter().map(|v| v.to_f64().unwrap()).collect(),
            loss.to_f64().unwrap(),
            dpred,
        )
    }

    fn backward(&self, cache: &Cache<T>, plan: &MaskPlan, grads: &mut Self) {
        // head and decoder
        let d_dec_patches = self
            .head
            .backward(&cache.dec_patches, &cache.dpred, &mut grads.head);
        let d_dec_out = prepend_row(&vec![T::zero(); d_dec_patches.cols()], &d_dec_patches);
        let mut d_full = self
            .decoder
            .backward(&cache.decoder, &d_dec_out, &mut grads.decoder);

        // fused class token back through fusion
        let d_cls_new = Tensor::matrix(1, d_full.cols(), d_full.row(0).to_vec());
        let d_fused =
            self.fusion_to_dec
                .backward(&cache.fused, &d_cls_new, &mut grads.fusion_to_dec);
        let (d_cls_f, d_camera_f) =
            self.fusion
                .backward(&cache.fusion, &d_fused, &mut grads.fusion);
        let d_cls_dec =
            self.dec_to_fusion
                .backward(&cache.cls_dec, &d_cls_f, &mut grads.dec_to_fusion);
        d_full.row_mut(0).copy_from_slice(d_cls_dec.data());

        // mask-token scatter and LiDAR encoder
        let d_dec_vis = scatter_rows_backward(&d_full, plan, grads.mask_token.data_mut());
        let d_enc_out = self
            .enc_to_dec
            .backward(&cache.enc_out, &d_dec_vis, &mut grads.enc_to_dec);
        let d_enc_in = self
            .lidar_enc
            .backward(&cache.lidar_enc, &d_enc_out, &mut grads.lidar_enc);
        for (g, &v) in grads.lidar_cls.data_mut().iter_mut().zip(d_enc_in.row(0)) {
            *g += v;
        }
        self.lidar_embed.backward_params(
            &cache.visible_patches,
            &drop_first_row(&d_enc_in),
            &mut grads.lidar_embed,
        );

        // camera branch
        if let Some(cam) = &cache.camera {
            let d_tokens = self.camera_to_fusion.backward(
                &cam.tokens,
                &d_camera_f,
                &mut grads.camera_to_fusion,
            );
            let d_out = prepend_row(&vec![T::zero(); d_tokens.cols()], &d_tokens);
            let d_in = self
                .camera_enc
                .backward(&cam.enc, &d_out, &mut grads.camera_enc);
            for (g, &v) in grads.camera_cls.data_mut().iter_mut().zip(d_in.row(0)) {
                *g += v;
            }
            self.camera_embed.backward_params(
                &cam.patches,
                &drop_first_row(&d_in),
                &mut grads.camera_embed,
            );
        }
    }
}

impl<T: Scalar> Parameters<T> for MaeModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        use crate::nn::join;
        self.lidar_embed.visit(&join(prefix, "lidar_embed"), f);
        f(join(prefix, "lidar_cls"), &self.lidar_cls);
        self.lidar_enc.visit(&join(prefix, "lidar_enc"), f);
        self.camera_embed.visit(&join(prefix, "camera_embed"), f);
        f(join(prefix, "camera_cls"), &self.camera_cls);
        self.camera_enc.visit(&join(prefix, "camera_enc"), f);
        self.enc_to_dec.visit(&join(prefix, "enc_to_dec"), f);
        f(join(prefix, "mask_token"), &self.mask_token);
        self.dec_to_fusion.visit(&join(prefix, "dec_to_fusion"), f);
        self.camera_to_fusion
            .visit(&join(prefix, "camera_to_fusion"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.fusion_to_dec.visit(&join(prefix, "fusion_to_dec"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        use crate::nn::join;
        self.lidar_embed.visit_mut(&join(prefix, "lidar_embed"), f);
        f(join(prefix, "lidar_cls"), &mut self.lidar_cls);
        self.lidar_enc.visit_mut(&join(prefix, "lidar_enc"), f);
        self.camera_embed
            .visit_mut(&join(prefix, "camera_embed"), f);
        f(join(prefix, "camera_cls"), &mut self.camera_cls);
        self.camera_enc.visit_mut(&join(prefix, "camera_enc"), f);
        self.enc_to_dec.visit_mut(&join(prefix, "enc_to_dec"), f);
        f(join(prefix, "mask_token"), &mut self.mask_token);
        self.dec_to_fusion
            .visit_mut(&join(prefix, "dec_to_fusion"), f);
        self.camera_to_fusion
            .visit_mut(&join(prefix, "camera_to_fusion"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.fusion_to_dec
            .visit_mut(&join(prefix, "fusion_to_dec"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Parameter counts grouped by top-level key component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParameterTable {
    pub by_module: BTreeMap<String, usize>,
    pub total: usize,
}

pub fn count_parameters<T: Scalar, P: Parameters<T>>(params: &P) -> ParameterTable {
    let mut table = ParameterTable::default();
    params.visit("", &mut |key, t| {
        let module = key.split('.').next().unwrap_or("").to_string();
        *table.by_module.entry(module).or_default() += t.len();
        table.total += t.len();
    });
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::sample_mask;

    pub(crate) fn micro_config() -> RunConfig {
        let t = TransformerConfig {
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            mlp_ratio: 2,
        };
        RunConfig {
            grid: GridSpec {
                height: 16,
                width: 16,
                ..GridSpec::desk_forward()
            },
            camera_height: 16,
            camera_width: 16,
            lidar_encoder: t,
            camera_encoder: t,
            decoder: t,
            fusion: FusionConfig {
                embed_dim: 8,
                depth: 2,
                n_heads: 2,
                bias_free_kv: true,
            },
            ..RunConfig::default()
        }
    }

    fn random_image(h: usize, w: usize, rng: &mut SplitMix64) -> Image {
        Image::from_planes(
            3,
            h,
            w,
            (0..3 * h * w).map(|_| rng.next_f64() as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_text_round_trips() {
        let cfg = RunConfig {
            mask_ratio: 0.75,
            normalize_targets: true,
            loss_scope: LossScope::AllPatches,
            ..RunConfig::default()
        };
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_ne!(RunConfig::default().digest(), cfg.digest());
    }

    #[test]
    fn config_accepts_degrees_and_rejects_unknown_keys() {
        let cfg = RunConfig::from_text("grid.azimuth_min_deg = -30\ngrid.azimuth_max_deg = 30\n")
            .unwrap();
        assert!((cfg.grid.azimuth_max - 30f64.to_radians()).abs() < 1e-15);
        assert!(RunConfig::from_text("grid.azimuth_min = 0\ngrid.azimuth_min_deg = 0\n").is_err());
        assert!(RunConfig::from_text("encoder.depth = 3\n").is_err());
        assert!(RunConfig::from_text("patch_size = 7\n").is_err());
        assert!(RunConfig::from_text("mask_ratio = 1\n").is_err());
    }

    #[test]
    fn desk_token_counts() {
        let cfg = RunConfig::default();
        let model = MaeModel::<f32>::new(&cfg).unwrap();
        let mut rng = SplitMix64::new(0);
        let lidar = random_image(32, 256, &mut rng);
        let camera = random_image(64, 64, &mut rng);
        let plan = sample_mask(cfg.n_patches(), 0.5, 1).unwrap();
        assert_eq!(plan.n_keep, 64);
        let (out, cache) = model
            .run(&lidar, Some(&camera), CameraMode::Full, &plan)
            .unwrap();
        assert_eq!(cache.visible_patches.rows(), 64);
        assert_eq!(cache.enc_out.rows(), 65);
        assert_eq!(cache.dec_patches.rows(), 128);
        assert!(out.loss.is_finite() && out.loss > 0.0);
        assert_eq!(
            (out.reconstruction.height(), out.reconstruction.width()),
            (32, 256)
        );
    }

    #[test]
    fn loss_is_mean_over_masked_patches() {
        let cfg = micro_config();
        let model = MaeModel::<f64>::new(&cfg).unwrap();
        let mut rng = SplitMix64::new(3);
        let lidar = random_image(16, 16, &mut rng);
        let camera = random_image(16, 16, &mut rng);
        let plan = sample_mask(4, 0.5, 2).unwrap();
        let out = model.forward(&lidar, &camera, &plan).unwrap();
        let want: f64 = plan
            .masked()
            .iter()
            .map(|&s| out.per_patch_loss[s])
            .sum::<f64>()
            / 2.0;
        assert!((out.loss - want).abs() < 1e-15);

        let all = MaeModel::<f64>::new(&RunConfig {
            loss_scope: LossScope::AllPatches,
            ..cfg
        })
        .unwrap()
        .forward(&lidar, &camera, &plan)
        .unwrap();
        let mean = all.per_patch_loss.iter().sum::<f64>() / 4.0;
        assert!((all.loss - mean).abs() < 1e-15);
    }

    #[test]
    fn wrong_shapes_name_the_stage() {
        let cfg = micro_config();
        let model = MaeModel::<f64>::new(&cfg).unwrap();
        let mut rng = SplitMix64::new(4);
        let plan = sample_mask(4, 0.5, 2).unwrap();
        let err = model
            .forward(
                &random_image(8, 16, &mut rng),
                &random_image(16, 16, &mut rng),
                &plan,
            )
            .unwrap_err();
        assert!(err.to_string().contains("patchify lidar"));
        let bad_plan = sample_mask(8, 0.5, 2).unwrap();
        let err = model
            .forward(
                &random_image(16, 16, &mut rng),
                &random_image(16, 16, &mut rng),
                &bad_plan,
            )
            .unwrap_err();
        assert!(err.to_string().contains("gather visible"));
    }

    #[test]
    fn cast_preserves_keys_and_values() {
        let cfg = micro_config();
        let m64 = MaeModel::<f64>::new(&cfg).unwrap();
        let m32: MaeModel<f32> = m64.cast();
        let a = m64.named();
        let b = m32.named();
        assert_eq!(a.len(), b.len());
        for ((ka, ta), (kb, tb)) in a.iter().zip(&b) {
            assert_eq!(ka, kb);
            assert_eq!(ta.data()[0] as f32, tb.data()[0]);
        }
    }

    #[test]
    fn zero_image_and_zero_tokens_differ() {
        let cfg = micro_config();
        let model = MaeModel::<f64>::new(&cfg).unwrap();
        let mut rng = SplitMix64::new(5);
        let lidar = random_image(16, 16, &mut rng);
        let plan = sample_mask(4, 0.5, 9).unwrap();
        let a = model
            .forward_no_camera(&lidar, &plan, CameraMode::ZeroImage)
            .unwrap();
        let b = model
            .forward_no_camera(&lidar, &plan, CameraMode::ZeroTokens)
            .unwrap();
        assert!(a.loss.is_finite() && b.loss.is_finite());
        assert_ne!(a.reconstruction, b.reconstruction);
        assert!(model
            .forward_no_camera(&lidar, &plan, CameraMode::Full)
            .is_err());
    }

    #[test]
    fn masked_composite_keeps_visible_patches() {
        let cfg = micro_config();
        let model = MaeModel::<f32>::new(&cfg).unwrap();
        let mut rng = SplitMix64::new(6);
        let lidar = random_image(16, 16, &mut rng);
        let camera = random_image(16, 16, &mut rng);
        let plan = sample_mask(4, 0.5, 1).unwrap();
        let out = model.forward(&lidar, &camera, &plan).unwrap();
        let comp = out.masked_composite(&lidar).unwrap();
        let t = patchify(&lidar, 8).unwrap();
        let c = patchify(&comp, 8).unwrap();
        for &s in plan.visible() {
            assert_eq!(c.patch(s), t.patch(s));
        }
        let r = patchify(&out.clamped_reconstruction(), 8).unwrap();
        for &s in plan.masked() {
            assert_eq!(c.patch(s), r.patch(s));
        }
    }
}
