//! Naive float64 forward pass of the whole masked autoencoder, written
//! from the architecture description with plain nested vectors and loops.
//! Parameters are looked up by key.

use std::collections::BTreeMap;

use masked_fusion::image::Image;
use masked_fusion::model::{CameraMode, LossScope, MaeModel, RunConfig};
use masked_fusion::nn::Parameters;

type Mat = Vec<Vec<f64>>;

pub struct Weights(BTreeMap<String, Vec<f64>>);

impl Weights {
    pub fn of(model: &MaeModel<f64>) -> Self {
        Weights(
            model
                .named()
                .into_iter()
                .map(|(k, t)| (k, t.data().to_vec()))
                .collect(),
        )
    }

    fn get(&self, key: &str) -> &[f64] {
        self.0
            .get(key)
            .unwrap_or_else(|| panic!("no parameter {key}"))
    }

    fn opt(&self, key: &str) -> Option<&[f64]> {
        self.0.get(key).map(|v| v.as_slice())
    }
}

fn linear(w: &Weights, prefix: &str, x: &Mat) -> Mat {
    let wt = w.get(&format!("{prefix}.weight"));
    let d_in = x.first().map_or(0, |r| r.len());
    let d_out = wt.len() / d_in.max(1);
    let bias = w.opt(&format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            (0..d_out)
                .map(|o| {
                    let mut s = bias.map_or(0.0, |b| b[o]);
                    for (i, &v) in row.iter().enumerate() {
                        s += v * wt[i * d_out + o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn layer_norm(w: &Weights, prefix: &str, x: &Mat) -> Mat {
    let g = w.get(&format!("{prefix}.scale"));
    let b = w.get(&format!("{prefix}.offset"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn attention(w: &Weights, prefix: &str, xq: &Mat, xkv: &Mat, heads: usize) -> Mat {
    let q = linear(w, &format!("{prefix}.w_q"), xq);
    let k = linear(w, &format!("{prefix}.w_k"), xkv);
    let v = linear(w, &format!("{prefix}.w_v"), xkv);
    let d = q[0].len();
    let hd = d / heads;
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                concat[i][c] = e.iter().zip(&v).map(|(p, vj)| p / z * vj[c]).sum();
            }
        }
    }
    linear(w, &format!("{prefix}.w_o"), &concat)
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn encoder(w: &Weights, prefix: &str, mut x: Mat, depth: usize, heads: usize) -> Mat {
    for b in 0..depth {
        let p = format!("{prefix}.block{b}");
        let n1 = layer_norm(w, &format!("{p}.norm1"), &x);
        x = add(&x, &attention(w, &format!("{p}.attn"), &n1, &n1, heads));
        let n2 = layer_norm(w, &format!("{p}.norm2"), &x);
        let mut hidden = linear(w, &format!("{p}.mlp.fc1"), &n2);
        hidden.iter_mut().flatten().for_each(|v| *v = gelu(*v));
        x = add(&x, &linear(w, &format!("{p}.mlp.fc2"), &hidden));
    }
    layer_norm(w, &format!("{prefix}.norm"), &x)
}

/// Row-major grid of sine-cosine codes: `[sin(r·ω), cos(r·ω), sin(c·ω), cos(c·ω)]`
/// with `ω_i = 10000^(−4i/d)`.
pub fn positions(rows: usize, cols: usize, d: usize) -> Mat {
    let q = d / 4;
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mut v = vec![0.0; d];
            for i in 0..q {
                let omega = 10000f64.powf(-(i as f64) / q as f64);
                v[i] = (r as f64 * omega).sin();
                v[q + i] = (r as f64 * omega).cos();
                v[2 * q + i] = (c as f64 * omega).sin();
                v[3 * q + i] = (c as f64 * omega).cos();
            }
            out.push(v);
        }
    }
    out
}

/// Patch vectors in row-major slot order, each `[channel][row][col]`.
fn patches(img: &Image, p: usize) -> Mat {
    let mut out = Vec::new();
    for pr in 0..img.height() / p {
        for pc in 0..img.width() / p {
            let mut v = Vec::new();
            for c in 0..img.channels() {
                for y in 0..p {
                    for x in 0..p {
                        v.push(img.get(c, pr * p + y, pc * p + x) as f64);
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

/// Per-patch losses and the scoped mean loss.
pub fn forward(
    w: &Weights,
    cfg: &RunConfig,
    lidar: &Image,
    camera: &Image,
    permutation: &[usize],
    n_keep: usize,
    mode: CameraMode,
) -> (Vec<f64>, f64) {
    let p = cfg.patch_size;
    let (gr, gc) = (cfg.grid.height / p, cfg.grid.width / p);
    let n = gr * gc;
    let target = patches(lidar, p);

    // LiDAR encoder over [CLS, visible patches in permutation order]
    let pos = positions(gr, gc, cfg.lidar_encoder.embed_dim);
    let visible: Mat = permutation[..n_keep]
        .iter()
        .map(|&s| target[s].clone())
        .collect();
    let mut tokens = vec![w.get("lidar_cls").to_vec()];
    for (row, &s) in linear(w, "lidar_embed", &visible)
        .iter()
        .zip(&permutation[..n_keep])
    {
        tokens.push(row.iter().zip(&pos[s]).map(|(a, b)| a + b).collect());
    }
    let enc = encoder(
        w,
        "lidar_enc",
        tokens,
        cfg.lidar_encoder.depth,
        cfg.lidar_encoder.n_heads,
    );
    let enc = linear(w, "enc_to_dec", &enc);

    // decoder input: CLS, then every slot (visible token or mask token) plus position
    let dpos = positions(gr, gc, cfg.decoder.embed_dim);
    let mut slots: Vec<Vec<f64>> = vec![w.get("mask_token").to_vec(); n];
    for (i, &s) in permutation[..n_keep].iter().enumerate() {
        slots[s] = enc[1 + i].clone();
    }
    let mut dec_in = vec![enc[0].clone()];
    for (s, v) in slots.iter().enumerate() {
        dec_in.push(v.iter().zip(&dpos[s]).map(|(a, b)| a + b).collect());
    }

    // camera tokens at fusion width
    let (cr, cc) = (cfg.camera_height / p, cfg.camera_width / p);
    let cam_tokens: Mat = match mode {
        CameraMode::ZeroTokens => vec![vec![0.0; cfg.fusion.embed_dim]; cr * cc],
        _ => {
            let img = if mode == CameraMode::Full {
                camera.clone()
            } else {
                Image::zeros(3, cfg.camera_height, cfg.camera_width)
            };
            let cpos = positions(cr, cc, cfg.camera_encoder.embed_dim);
            let mut t = vec![w.get("camera_cls").to_vec()];
            for (row, ps) in linear(w, "camera_embed", &patches(&img, p))
                .iter()
                .zip(&cpos)
            {
                t.push(row.iter().zip(ps).map(|(a, b)| a + b).collect());
            }
            let out = encoder(
                w,
                "camera_enc",
                t,
                cfg.camera_encoder.depth,
                cfg.camera_encoder.n_heads,
            );
            linear(w, "camera_to_fusion", &out[1..].to_vec())
        }
    };

    // class token queries itself and the camera tokens, with a skip
    // connection per block
    let mut cls = linear(w, "dec_to_fusion", &vec![dec_in[0].clone()]);
    for b in 0..cfg.fusion.depth {
        let mut kv = cls.clone();
        kv.extend(cam_tokens.iter().cloned());
        let a = attention(
            w,
            &format!("fusion.block{b}.attn"),
            &cls,
            &kv,
            cfg.fusion.n_heads,
        );
        cls = add(&cls, &a);
    }
    dec_in[0] = linear(w, "fusion_to_dec", &cls).remove(0);

    let dec = encoder(w, "decoder", dec_in, cfg.decoder.depth, cfg.decoder.n_heads);
    let pred = linear(w, "head", &dec[1..].to_vec());

    let per_patch: Vec<f64> = pred
        .iter()
        .zip(&target)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
        .collect();
    let scope: Vec<usize> = match cfg.loss_scope {
        LossScope::MaskedOnly => permutation[n_keep..].to_vec(),
        LossScope::AllPatches => (0..n).collect(),
    };
    let loss = if scope.is_empty() {
        0.0
    } else {
        scope.iter().map(|&s| per_patch[s]).sum::<f64>() / scope.len() as f64
    };
    (per_patch, loss)
}
