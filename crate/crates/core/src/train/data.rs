use std::fmt;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::image::Image;
use crate::lidar::{read_point_cloud, spherical_project};
use crate::model::RunConfig;
use crate::rng::derive_seed;
use crate::scenes::{generate_scene, SceneParams};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn id(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// One paired training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Spherical projection, channels intensity/range/height.
    pub lidar: Image,
    pub camera: Image,
}

/// Where samples come from: synthesized from seeds, or read from a
/// directory with `train/`, `val/`, `test/` subdirectories of
/// `NNNNNN.bin` point clouds and `NNNNNN.png` camera images.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_boxes: usize,
    pub noise_std: f64,
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train: 256,
            n_val: 32,
            n_test: 32,
            n_boxes: 4,
            noise_std: 0.02,
            dir: None,
        }
    }
}

impl DataConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Scene seed of sample `index` in `split`.
    pub fn scene_seed(&self, split: Split, index: usize) -> u64 {
        derive_seed(&[self.seed, split.id(), index as u64])
    }

    pub fn scene_params(&self, run: &RunConfig, split: Split, index: usize) -> SceneParams {
        SceneParams {
            seed: self.scene_seed(split, index),
            n_boxes: self.n_boxes,
            grid: run.grid,
            camera_height: run.camera_height,
            camera_width: run.camera_width,
            noise_std: self.noise_std,
            ..SceneParams::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "data.seed = {}\ndata.train = {}\ndata.val = {}\ndata.test = {}\ndata.boxes = {}\ndata.noise_std = {}\n",
            self.seed, self.n_train, self.n_val, self.n_test, self.n_boxes, self.noise_std
        );
        if let Some(dir) = &self.dir {
            s.push_str(&format!("data.dir = {}\n", dir.display()));
        }
        s
    }

    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            seed: kv.take_or("data.seed", d.seed)?,
            n_train: kv.take_or("data.train", d.n_train)?,
            n_val: kv.take_or("data.val", d.n_val)?,
            n_test: kv.take_or("data.test", d.n_test)?,
            n_boxes: kv.take_or("data.boxes", d.n_boxes)?,
            noise_std: kv.take_or("data.noise_std", d.noise_std)?,
            dir: kv.take::<PathBuf>("data.dir")?,
        })
    }

    /// Sample `index` of `split`, projected onto the model's grid.
    pub fn sample(&self, run: &RunConfig, split: Split, index: usize) -> Result<Sample> {
        match &self.dir {
            None => {
                let (cloud, camera) = generate_scene(&self.scene_params(run, split, index));
                let lidar = spherical_project(&cloud, &run.grid)?.into_image();
                Ok(Sample { lidar, camera })
            }
            Some(dir) => {
                let stem = dir.join(split.name()).join(format!("{index:06}"));
                load_pair(&stem, run)
            }
        }
    }

    pub fn load_split(&self, run: &RunConfig, split: Split) -> Result<Vec<Sample>> {
        (0..self.count(split))
            .map(|i| self.sample(run, split, i))
            .collect()
    }
}

fn load_pair(stem: &Path, run: &RunConfig) -> Result<Sample> {
    let cloud = read_point_cloud(&stem.with_extension("bin"))?;
    let lidar = spherical_project(&cloud, &run.grid)?.into_image();
    let camera = Image::load_rgb(&stem.with_extension("png"))?;
    if (camera.height(), camera.width()) != (run.camera_height, run.camera_width) {
        return Err(Error::contract(
            "load camera",
            format!(
                "{} is {}x{}, config expects {}x{}",
                stem.with_extension("png").display(),
                camera.height(),
                camera.width(),
                run.camera_height,
                run.camera_width
            ),
        ));
    }
    Ok(Sample { lidar, camera })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_have_distinct_seeds() {
        let d = DataConfig::default();
        assert_ne!(d.scene_seed(Split::Train, 0), d.scene_seed(Split::Val, 0));
        assert_ne!(d.scene_seed(Split::Train, 0), d.scene_seed(Split::Train, 1));
    }

    #[test]
    fn synthetic_samples_are_deterministic_and_in_range() {
        let run = RunConfig::default();
        let d = DataConfig::default();
        let a = d.sample(&run, Split::Val, 3).unwrap();
        let b = d.sample(&run, Split::Val, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.lidar.height(), a.lidar.width()), (32, 256));
        assert!(a.lidar.is_unit_range() && a.camera.is_unit_range());
    }

    #[test]
    fn text_round_trip() {
        let d = DataConfig {
            dir: Some("/tmp/x".into()),
            n_train: 8,
            ..Default::default()
        };
        let mut kv = KeyValues::parse(&d.to_text()).unwrap();
        assert_eq!(DataConfig::from_key_values(&mut kv).unwrap(), d);
        kv.finish().unwrap();
    }
}
