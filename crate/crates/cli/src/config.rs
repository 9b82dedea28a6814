//! `key = value` run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cian_core::affinity::MergeMode;
use cian_core::pairing::PairMode;
use cian_core::seeds::CamConfig;
use cian_core::train::{PipelineConfig, TrainConfig};

/// What `train` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Ce,
    Cp,
    Rt,
    Ablate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Ce => "ce",
            Mode::Cp => "cp",
            Mode::Rt => "rt",
            Mode::Ablate => "ablate",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Mode::Baseline,
            "ce" => Mode::Ce,
            "cp" => Mode::Cp,
            "rt" => Mode::Rt,
            "ablate" => Mode::Ablate,
            other => bail!("unknown mode {other:?} (baseline|ce|cp|rt|ablate)"),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub out: PathBuf,
    /// Defaults to `<out>/data`.
    pub data: Option<PathBuf>,
    /// Defaults to `<out>/seeds`.
    pub seeds: Option<PathBuf>,
    /// Defaults to `<out>/train/<mode>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
    /// Masks named `<id>_pred.pgm` to evaluate instead of a checkpoint.
    pub predictions: Option<PathBuf>,
    pub mode: Mode,
    pub vis: usize,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("cian-out"),
            data: None,
            seeds: None,
            checkpoint: None,
            predictions: None,
            mode: Mode::Cp,
            vis: 4,
            pipeline: PipelineConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "out",
    "data",
    "seeds",
    "checkpoint",
    "predictions",
    "mode",
    "vis",
    "n_train",
    "n_val",
    "image_size",
    "classes",
    "data_seed",
    "cam_epochs",
    "cam_lr",
    "cam_momentum",
    "cam_batch",
    "fg_thresh",
    "bg_thresh",
    "sub_ratio",
    "lr0",
    "momentum",
    "power",
    "epochs",
    "batch",
    "crop",
    "pair",
    "refs",
    "merge",
    "enable_cp",
    "enable_cross",
    "seed",
    "threads",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("bad value {value:?} for {key}: {e}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let t: &mut TrainConfig = &mut p.train;
        let c: &mut CamConfig = &mut p.cam;
        match key {
            "out" => self.out = PathBuf::from(value),
            "data" => self.data = Some(PathBuf::from(value)),
            "seeds" => self.seeds = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "predictions" => self.predictions = Some(PathBuf::from(value)),
            "mode" => self.mode = parse(key, value)?,
            "vis" => self.vis = parse(key, value)?,
            "n_train" => p.n_train = parse(key, value)?,
            "n_val" => p.n_val = parse(key, value)?,
            "image_size" => p.image_size = parse(key, value)?,
            "classes" => p.classes = parse(key, value)?,
            "data_seed" => p.data_seed = parse(key, value)?,
            "cam_epochs" => c.epochs = parse(key, value)?,
            "cam_lr" => c.lr = parse(key, value)?,
            "cam_momentum" => c.momentum = parse(key, value)?,
            "cam_batch" => c.batch = parse(key, value)?,
            "fg_thresh" => p.fg_thresh = parse(key, value)?,
            "bg_thresh" => p.bg_thresh = parse(key, value)?,
            "sub_ratio" => p.sub_ratio = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "power" => t.power = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "crop" => t.crop = parse(key, value)?,
            "pair" => t.pair_mode = parse::<PairMode>(key, value)?,
            "refs" => t.refs = parse(key, value)?,
            "merge" => t.merge = parse::<MergeMode>(key, value)?,
            "enable_cp" => t.enable_cp = parse(key, value)?,
            "enable_cross" => t.enable_cross = parse(key, value)?,
            "seed" => {
                t.seed = parse(key, value)?;
                c.seed = t.seed;
            }
            "threads" => t.threads = parse(key, value)?,
            other => bail!("unknown config key {other:?} (known: {})", KEYS.join(", ")),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", n + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    /// `key=value` override from the command line.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (key, value) = item
            .split_once('=')
            .with_context(|| format!("override {item:?} is not key=value"))?;
        self.set(key.trim(), value.trim())
    }

    /// Make every path absolute against `base` and fill in defaults.
    pub fn resolve(&mut self, base: &Path) {
        let abs = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        self.out = abs(&self.out);
        let out = self.out.clone();
        self.data = Some(abs(self.data.as_deref().unwrap_or(&out.join("data"))));
        self.seeds = Some(abs(self.seeds.as_deref().unwrap_or(&out.join("seeds"))));
        let default_ckpt = self.train_dir(self.mode).join("checkpoint");
        self.checkpoint = Some(abs(self.checkpoint.as_deref().unwrap_or(&default_ckpt)));
        self.predictions = self.predictions.as_deref().map(abs);
    }

    pub fn train_dir(&self, mode: Mode) -> PathBuf {
        self.out.join("train").join(mode.as_str())
    }

    pub fn data_dir(&self) -> &Path {
        self.data.as_deref().expect("resolved")
    }

    pub fn seeds_dir(&self) -> &Path {
        self.seeds.as_deref().expect("resolved")
    }

    pub fn checkpoint_dir(&self) -> &Path {
        self.checkpoint.as_deref().expect("resolved")
    }
}
