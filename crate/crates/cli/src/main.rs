use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use masked_fusion::fusion::{bench_fusion_complexity, FusionConfig};
use masked_fusion::image::Image;
use masked_fusion::lidar::{read_point_cloud, spherical_project, write_projection, GridSpec, CHANNEL_NAMES};
use masked_fusion::model::{CameraMode, RunConfig};
use masked_fusion::patching::{patchify, sample_mask, unpatchify};
use masked_fusion::scenes::{generate_scene, SceneParams};
use masked_fusion::train::{
    eval_plan, evaluate_checkpoint, load_checkpoint, load_run_config, resume, train, DataConfig, Split,
};

#[derive(Parser)]
#[command(name = "mfusion", version, about = "Masked LiDAR-camera fusion autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project a KITTI-layout point cloud onto a spherical grid.
    Project {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 1024)]
        cols: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic point clouds (`NNNNNN.bin`) and camera images (`NNNNNN.png`).
    GenScenes {
        #[arg(long, default_value_t = 0)]
        seed0: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SceneParams::default().n_boxes)]
        boxes: usize,
        #[arg(long, default_value_t = SceneParams::default().noise_std)]
        noise_std: f64,
    },
    /// Train from a run file into a fresh output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a run from its latest checkpoint.
    Resume {
        #[arg(long)]
        out: PathBuf,
        /// Extend the run to this many epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a split; prints per-sample CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value = "full")]
        camera_mode: CameraMode,
        /// Run file for data settings and the expected digest; defaults to
        /// `config.txt` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write masked input, reconstruction and target images per channel.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        /// Point cloud to reconstruct; with `--camera`. Without it the
        /// sample is drawn from `--split`/`--index` of the run's data.
        #[arg(long, requires = "camera")]
        cloud: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Mask seed; defaults to the split's evaluation mask.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "full")]
        camera_mode: CameraMode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time token-to-sequence fusion against a sequence-to-sequence baseline.
    BenchAttention {
        #[arg(long, default_value_t = 256)]
        min_n: usize,
        #[arg(long, default_value_t = 8192)]
        max_n: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long, default_value_t = FusionConfig::desk().embed_dim)]
        dim: usize,
        #[arg(long, default_value_t = FusionConfig::desk().n_heads)]
        heads: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Project { input, rows, cols, out } => project(&input, rows, cols, &out),
        Command::GenScenes {
            seed0,
            count,
            out,
            boxes,
            noise_std,
        } => gen_scenes(seed0, count, &out, boxes, noise_std),
        Command::Train { config, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let (run, tc) = load_run_config(&text)?;
            let report = train(&run, &tc, &out)?;
            print_last(&report);
            Ok(())
        }
        Command::Resume { out, epochs } => {
            let report = resume(&out, epochs)?;
            print_last(&report);
            Ok(())
        }
        Command::Eval {
            ckpt,
            split,
            camera_mode,
            config,
            out,
        } => {
            let (digest, data) = run_settings(&ckpt, config.as_deref())?;
            let report = evaluate_checkpoint(&ckpt, digest.as_deref(), &data, split, camera_mode)?;
            let csv = report.to_csv();
            match out {
                Some(path) => fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
            info!(
                "{} split, {}: mean MSSIM {:.4} (full image), {:.4} (masked region)",
                split.name(),
                camera_mode.name(),
                report.mean_full,
                report.mean_masked
            );
            Ok(())
        }
        Command::Reconstruct {
            ckpt,
            cloud,
            camera,
            split,
            index,
            seed,
            camera_mode,
            config,
            out,
        } => reconstruct(ReconstructArgs {
            ckpt: &ckpt,
            cloud: cloud.as_deref(),
            camera: camera.as_deref(),
            split,
            index,
            seed,
            camera_mode,
            config: config.as_deref(),
            out: &out,
        }),
        Command::BenchAttention {
            min_n,
            max_n,
            reps,
            dim,
            heads,
            out,
        } => {
            if min_n == 0 || min_n > max_n {
                bail!("need 0 < min-n <= max-n");
            }
            let ns: Vec<usize> = std::iter::successors(Some(min_n), |&n| Some(n * 2))
                .take_while(|&n| n <= max_n)
                .collect();
            let cfg = FusionConfig {
                embed_dim: dim,
                n_heads: heads,
                ..FusionConfig::desk()
            };
            let report = bench_fusion_complexity(&ns, &cfg, reps)?;
            fs::write(&out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "log-log slope: token-to-sequence {:.3}, sequence-to-sequence {:.3}",
                report.token_to_sequence_slope, report.sequence_to_sequence_slope
            );
            Ok(())
        }
    }
}

fn print_last(report: &masked_fusion::train::TrainReport) {
    if let Some(r) = report.last() {
        println!(
            "epoch {}: train loss {:.5}, val MSSIM {:.4} with camera, {:.4} with zero camera tokens",
            r.epoch, r.train_loss, r.val_mssim_camera, r.val_mssim_no_camera
        );
    }
}

fn project(input: &Path, rows: usize, cols: usize, out: &Path) -> Result<()> {
    let spec = GridSpec {
        height: rows,
        width: cols,
        ..GridSpec::default()
    };
    spec.validate()?;
    let cloud = read_point_cloud(input)?;
    let img = spherical_project(&cloud, &spec)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("projection");
    write_projection(out, stem, &img, &spec)?;
    let filled = img.occupancy().iter().filter(|&&o| o).count();
    println!(
        "{} points -> {rows}x{cols} grid, {filled} cells filled, written to {}",
        cloud.len(),
        out.display()
    );
    Ok(())
}

fn gen_scenes(seed0: u64, count: usize, out: &Path, boxes: usize, noise_std: f64) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let run = RunConfig::default();
    for i in 0..count {
        let params = SceneParams {
            seed: seed0 + i as u64,
            n_boxes: boxes,
            grid: run.grid,
            camera_height: run.camera_height,
            camera_width: run.camera_width,
            noise_std,
            ..SceneParams::default()
        };
        let (cloud, camera) = generate_scene(&params);
        let bin = out.join(format!("{i:06}.bin"));
        fs::write(&bin, cloud.to_bytes()).with_context(|| format!("writing {}", bin.display()))?;
        camera.save_rgb(&out.join(format!("{i:06}.png")))?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

/// Expected digest and data settings for a checkpoint: from `config`, or
/// from `config.txt` beside the checkpoint, or none.
fn run_settings(ckpt: &Path, config: Option<&Path>) -> Result<(Option<String>, DataConfig)> {
    let sibling = ckpt.parent().map(|d| d.join("config.txt"));
    let path = match config {
        Some(p) => Some(p.to_path_buf()),
        None => sibling.filter(|p| p.exists()),
    };
    match path {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let (run, tc) = load_run_config(&text)?;
            Ok((Some(run.digest()), tc.data))
        }
        None => Ok((None, DataConfig::default())),
    }
}

struct ReconstructArgs<'a> {
    ckpt: &'a Path,
    cloud: Option<&'a Path>,
    camera: Option<&'a Path>,
    split: Split,
    index: usize,
    seed: Option<u64>,
    camera_mode: CameraMode,
    config: Option<&'a Path>,
    out: &'a Path,
}

fn reconstruct(a: ReconstructArgs<'_>) -> Result<()> {
    let (digest, data) = run_settings(a.ckpt, a.config)?;
    let ck = load_checkpoint(a.ckpt, digest.as_deref())?;
    let run = &ck.config;
    let (lidar, camera) = match (a.cloud, a.camera) {
        (Some(c), Some(cam)) => (
            spherical_project(&read_point_cloud(c)?, &run.grid)?.into_image(),
            Image::load_rgb(cam)?,
        ),
        _ => {
            let s = data.sample(run, a.split, a.index)?;
            (s.lidar, s.camera)
        }
    };
    let plan = match a.seed {
        Some(seed) => sample_mask(run.n_patches(), run.mask_ratio, seed)?,
        None => eval_plan(run, a.split, a.index)?,
    };
    let f = ck.model.forward_mode(&lidar, Some(&camera), a.camera_mode, &plan)?;

    let mut masked = patchify(&lidar, run.patch_size)?;
    let d = masked.patch_dim();
    for &slot in plan.masked() {
        masked.data[slot * d..(slot + 1) * d].fill(0.0);
    }
    let masked = unpatchify(&masked)?;
    let recon = f.clamped_reconstruction();
    let composite = f.masked_composite(&lidar)?;

    fs::create_dir_all(a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (c, name) in CHANNEL_NAMES.iter().enumerate() {
        for (img, kind) in [
            (&masked, "masked"),
            (&recon, "reconstruction"),
            (&composite, "composite"),
            (&lidar, "target"),
        ] {
            img.save_plane(c, &a.out.join(format!("{name}_{kind}.pgm")))?;
        }
    }
    plan.save(&a.out.join("mask.txt"))?;
    println!("loss {:.5}, images written to {}", f.loss, a.out.display());
    Ok(())
}
