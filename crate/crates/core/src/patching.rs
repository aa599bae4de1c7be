//! Patch sequences, random mask plans and mask-token scattering.
//!
//! Patches are numbered row-major over the patch grid. Inside a patch the
//! `P×P×C` values are laid out channel-major, then row-major.

use std::fmt::Write as _;
use std::path::Path;

use crate::image::Image;
use crate::nn::TokenSequence;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// Patch-grid shape `(rows, cols)` of the full image.
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
    /// Original row-major slot of each patch held here.
    pub slots: Vec<usize>,
    /// `slots.len() × patch_dim` values.
    pub data: Vec<f32>,
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.slots.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn is_complete(&self) -> bool {
        self.slots.len() == self.grid.0 * self.grid.1
            && self.slots.iter().enumerate().all(|(i, &s)| i == s)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::matrix(
            self.n_patches(),
            self.patch_dim(),
            self.data.iter().map(|&v| T::c(v as f64)).collect(),
        )
    }
}

pub fn patchify(img: &Image, patch: usize) -> Result<PatchSequence> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gr, gc) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(c * h * w);
    for pr in 0..gr {
        for pc in 0..gc {
            for ch in 0..c {
                for y in 0..patch {
                    let row = &img.plane(ch)[(pr * patch + y) * w + pc * patch..];
                    data.extend_from_slice(&row[..patch]);
                }
            }
        }
    }
    Ok(PatchSequence {
        grid: (gr, gc),
        patch_size: patch,
        channels: c,
        slots: (0..gr * gc).collect(),
        data,
    })
}

/// Inverse of [`patchify`]. The sequence may be in any slot order but must
/// cover every slot exactly once.
pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let (gr, gc) = seq.grid;
    let p = seq.patch_size;
    let d = seq.patch_dim();
    if seq.data.len() != seq.slots.len() * d {
        return Err(Error::shape(format!(
            "{} patches of dim {d} need {} values, got {}",
            seq.slots.len(),
            seq.slots.len() * d,
            seq.data.len()
        )));
    }
    let mut seen = vec![false; gr * gc];
    for &s in &seq.slots {
        if s >= gr * gc || std::mem::replace(&mut seen[s], true) {
            return Err(Error::shape(format!("slot {s} out of range or repeated")));
        }
    }
    if seen.iter().any(|&s| !s) {
        return Err(Error::shape("sequence does not cover every patch slot"));
    }
    let (h, w) = (gr * p, gc * p);
    let mut img = Image::zeros(seq.channels, h, w);
    for (i, &slot) in seq.slots.iter().enumerate() {
        let (pr, pc) = (slot / gc, slot % gc);
        let src = seq.patch(i);
        for ch in 0..seq.channels {
            let plane = img.plane_mut(ch);
            for y in 0..p {
                let dst = (pr * p + y) * w + pc * p;
                plane[dst..dst + p].copy_from_slice(&src[(ch * p + y) * p..(ch * p + y + 1) * p]);
            }
        }
    }
    Ok(img)
}

/// Which patches the encoder sees: the first `n_keep` entries of a seeded
/// permutation are visible, the rest are masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub permutation: Vec<usize>,
    pub n_keep: usize,
    pub seed: u64,
}

/// `round_half_up((1 − mask_ratio)·n_patches)`.
pub fn keep_count(n_patches: usize, mask_ratio: f64) -> usize {
    (((1.0 - mask_ratio) * n_patches as f64) + 0.5).floor() as usize
}

/// Fisher–Yates over `0..n_patches` driven by SplitMix64(seed): for
/// `i = n−1 … 1`, swap `i` with `next_below(i + 1)`.
pub fn sample_mask(n_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!(
            "mask ratio {mask_ratio} outside [0, 1)"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let mut permutation: Vec<usize> = (0..n_patches).collect();
    for i in (1..n_patches).rev() {
        let j = rng.next_below(i as u64 + 1) as usize;
        permutation.swap(i, j);
    }
    Ok(MaskPlan {
        permutation,
        n_keep: keep_count(n_patches, mask_ratio).min(n_patches),
        seed,
    })
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.permutation.len()
    }

    pub fn visible(&self) -> &[usize] {
        &self.permutation[..self.n_keep]
    }

    pub fn masked(&self) -> &[usize] {
        &self.permutation[self.n_keep..]
    }

    /// Per-slot flag, `true` where the patch is hidden from the encoder.
    pub fn masked_flags(&self) -> Vec<bool> {
        let mut flags = vec![true; self.n_patches()];
        for &i in self.visible() {
            flags[i] = false;
        }
        flags
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.permutation.len();
        let mut seen = vec![false; n];
        for &i in &self.permutation {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Format(format!(
                    "permutation entry {i} invalid or repeated"
                )));
            }
        }
        if self.n_keep > n {
            return Err(Error::Format(format!(
                "n_keep {} exceeds {n} patches",
                self.n_keep
            )));
        }
        Ok(())
    }

    /// Text form: `n_patches`, `n_keep` and `seed` header lines followed by
    /// the permutation as whitespace-separated integers.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "n_patches {}\nn_keep {}\nseed {}\n",
            self.n_patches(),
            self.n_keep,
            self.seed
        );
        for (i, p) in self.permutation.iter().enumerate() {
            let sep = if i + 1 == self.permutation.len() || (i + 1) % 16 == 0 {
                "\n"
            } else {
                " "
            };
            let _ = write!(s, "{p}{sep}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut header = |name: &str| -> Result<u64> {
            match (tokens.next(), tokens.next()) {
                (Some(k), Some(v)) if k == name => v
                    .parse()
                    .map_err(|_| Error::Format(format!("bad value for {name}: {v}"))),
                _ => Err(Error::Format(format!("missing header field {name}"))),
            }
        };
        let n_patches = header("n_patches")? as usize;
        let n_keep = header("n_keep")? as usize;
        let seed = header("seed")?;
        let permutation = tokens
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad index {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if permutation.len() != n_patches {
            return Err(Error::Format(format!(
                "expected {n_patches} indices, found {}",
                permutation.len()
            )));
        }
        let plan = Self {
            permutation,
            n_keep,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Visible patches in permutation order, slot metadata retained.
pub fn gather_visible(seq: &PatchSequence, plan: &MaskPlan) -> Result<PatchSequence> {
    if !seq.is_complete() || plan.n_patches() != seq.n_patches() {
        return Err(Error::shape(format!(
            "plan over {} patches does not match a complete sequence of {}",
            plan.n_patches(),
            seq.n_patches()
        )));
    }
    let d = seq.patch_dim();
    let mut data = Vec::with_capacity(plan.n_keep * d);
    for &slot in plan.visible() {
        data.extend_from_slice(seq.patch(slot));
    }
    Ok(PatchSequence {
        slots: plan.visible().to_vec(),
        data,
        ..seq.clone()
    })
}

/// Row-level scatter used by the model: output row `1 + slot` receives
/// visible row `1 + i` for `slot = permutation[i]`; masked rows get
/// `mask_token`. Row 0 (class token) is copied through.
pub(crate) fn scatter_rows<T: Scalar>(
    visible: &Tensor<T>,
    plan: &MaskPlan,
    mask_token: &[T],
) -> Tensor<T> {
    let d = visible.cols();
    let mut out = Tensor::zeros(&[plan.n_patches() + 1, d]);
    out.row_mut(0).copy_from_slice(visible.row(0));
    for &slot in plan.masked() {
        out.row_mut(1 + slot).copy_from_slice(mask_token);
    }
    for (i, &slot) in plan.visible().iter().enumerate() {
        out.row_mut(1 + slot).copy_from_slice(visible.row(1 + i));
    }
    out
}

/// Adjoint of [`scatter_rows`]: returns the gradient for the visible rows
/// and accumulates the masked rows into `d_mask_token`.
pub(crate) fn scatter_rows_backward<T: Scalar>(
    d_full: &Tensor<T>,
    plan: &MaskPlan,
    d_mask_token: &mut [T],
) -> Tensor<T> {
    let d = d_full.cols();
    let mut d_vis = Tensor::zeros(&[plan.n_keep + 1, d]);
    d_vis.row_mut(0).copy_from_slice(d_full.row(0));
    for (i, &slot) in plan.visible().iter().enumerate() {
        d_vis.row_mut(1 + i).copy_from_slice(d_full.row(1 + slot));
    }
    for &slot in plan.masked() {
        for (g, &v) in d_mask_token.iter_mut().zip(d_full.row(1 + slot)) {
            *g += v;
        }
    }
    d_vis
}

/// Restores encoder output tokens to their row-major slots, fills masked
/// slots with `mask_token` and adds `positions` (one row per patch slot)
/// to every patch slot. A leading class token, if present, is carried
/// through unchanged.
pub fn scatter_with_mask_tokens<T: Scalar>(
    visible: &TokenSequence<T>,
    plan: &MaskPlan,
    mask_token: &[T],
    grid: (usize, usize),
    positions: &Tensor<T>,
) -> Result<TokenSequence<T>> {
    let offset = usize::from(visible.has_class_token);
    let d = visible.tokens.cols();
    if visible.len() != plan.n_keep + offset {
        return Err(Error::shape(format!(
            "expected {} visible tokens, got {}",
            plan.n_keep + offset,
            visible.len()
        )));
    }
    if grid.0 * grid.1 != plan.n_patches() {
        return Err(Error::shape("grid does not match the mask plan"));
    }
    if mask_token.len() != d || positions.rows() != plan.n_patches() || positions.cols() != d {
        return Err(Error::shape(
            "mask token or positions do not match the token width",
        ));
    }
    let mut with_cls = Tensor::zeros(&[plan.n_keep + 1, d]);
    for r in 0..visible.len() {
        with_cls
            .row_mut(r + 1 - offset)
            .copy_from_slice(visible.tokens.row(r));
    }
    let mut full = scatter_rows(&with_cls, plan, mask_token);
    for slot in 0..plan.n_patches() {
        for (v, &p) in full.row_mut(1 + slot).iter_mut().zip(positions.row(slot)) {
            *v += p;
        }
    }
    let tokens = if visible.has_class_token {
        full
    } else {
        Tensor::matrix(plan.n_patches(), d, full.data()[d..].to_vec())
    };
    Ok(TokenSequence::for_grid(
        tokens,
        visible.has_class_token,
        grid,
    ))
}
