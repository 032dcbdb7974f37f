//! Pipeline flags shared by `align`, `tablet` and `saliency`, mirrored by the
//! TOML config file. Flags win over file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use glyph_align::pipeline::{FeatureBackend, PipelineConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineArgs {
    /// Feature backbone: `builtin` or `file` (FMAP files).
    #[arg(long)]
    pub features: Option<Backend>,
    /// Prototype FMAP file(s); several files feed successive runs.
    #[arg(long, num_args = 1..)]
    pub proto_fmap: Vec<PathBuf>,
    /// Target FMAP file(s).
    #[arg(long, num_args = 1..)]
    pub target_fmap: Vec<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// RANSAC rounds scored by inlier spread.
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub ransac_iters: Option<usize>,
    /// Inlier threshold in pixels at 512×512.
    #[arg(long)]
    pub inlier_thresh: Option<f64>,
    /// Stop after the global stage.
    #[arg(long)]
    pub no_refine: bool,
    /// Skip the least-squares refit on the inlier set.
    #[arg(long)]
    pub no_refit: bool,
    #[arg(long)]
    pub lambda_sim: Option<f64>,
    #[arg(long)]
    pub lambda_sal: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    /// Softmax temperature for similarity and saliency fields.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Refinement iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Builtin,
    File,
}

impl From<Backend> for FeatureBackend {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Builtin => FeatureBackend::Builtin,
            Backend::File => FeatureBackend::File,
        }
    }
}

impl PipelineArgs {
    /// Reads a TOML config; unknown keys are rejected.
    pub fn from_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `self` (flags) layered over `file`.
    pub fn over(self, file: PipelineArgs) -> PipelineArgs {
        PipelineArgs {
            features: self.features.or(file.features),
            proto_fmap: if self.proto_fmap.is_empty() {
                file.proto_fmap
            } else {
                self.proto_fmap
            },
            target_fmap: if self.target_fmap.is_empty() {
                file.target_fmap
            } else {
                self.target_fmap
            },
            seed: self.seed.or(file.seed),
            runs: self.runs.or(file.runs),
            ransac_iters: self.ransac_iters.or(file.ransac_iters),
            inlier_thresh: self.inlier_thresh.or(file.inlier_thresh),
            no_refine: self.no_refine || file.no_refine,
            no_refit: self.no_refit || file.no_refit,
            lambda_sim: self.lambda_sim.or(file.lambda_sim),
            lambda_sal: self.lambda_sal.or(file.lambda_sal),
            lambda_reg: self.lambda_reg.or(file.lambda_reg),
            temperature: self.temperature.or(file.temperature),
            iters: self.iters.or(file.iters),
            lr: self.lr.or(file.lr),
            workers: self.workers.or(file.workers),
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut c = PipelineConfig::default();
        if let Some(f) = self.features {
            c.features = f.into();
        }
        if c.features == FeatureBackend::File
            && (self.proto_fmap.is_empty() || self.target_fmap.is_empty())
        {
            bail!("--features file needs --proto-fmap and --target-fmap");
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.ransac.rng_seed = c.seed;
        c.refine.rng_seed = c.seed;
        if let Some(v) = self.runs {
            c.ransac.runs = v;
        }
        if let Some(v) = self.ransac_iters {
            c.ransac.iterations = v;
        }
        if let Some(v) = self.inlier_thresh {
            c.ransac.inlier_threshold = v;
        }
        c.ransac.refit = !self.no_refit;
        c.no_refine = self.no_refine;
        if let Some(v) = self.lambda_sim {
            c.refine.lambda_sim = v;
        }
        if let Some(v) = self.lambda_sal {
            c.refine.lambda_sal = v;
        }
        if let Some(v) = self.lambda_reg {
            c.refine.lambda_reg = v;
        }
        if let Some(v) = self.temperature {
            c.refine.softmax_temperature = v;
        }
        if let Some(v) = self.iters {
            c.refine.iterations = v;
        }
        if let Some(v) = self.lr {
            c.refine.learning_rate = v;
        }
        c.ransac.validate().context("invalid RANSAC settings")?;
        c.refine.validate().context("invalid refinement settings")?;
        Ok(c)
    }
}

/// Flags merged over an optional config file.
pub fn resolve(flags: PipelineArgs, config: Option<&Path>) -> Result<PipelineArgs> {
    Ok(match config {
        Some(path) => flags.over(PipelineArgs::from_toml(path)?),
        None => flags,
    })
}
