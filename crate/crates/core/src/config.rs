//! Run configuration. Every struct rejects unknown keys and fills missing ones
//! with the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "SEGTRACK_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Side of the square search patch fed to the network. Multiple of 16.
    pub patch_size: usize,
    /// Encoder widths at strides 2, 4, 8 and 16.
    pub backbone_widths: [usize; 4],
    pub gim_channels: usize,
    /// Number of sorted similarities fed to each similarity decoder.
    pub top_n: usize,
    pub mlp_hidden: usize,
    pub gem_channels: usize,
    /// Spatial size of the correlation filter, in stride-16 cells.
    pub dcf_kernel: usize,
    pub fuse_channels: usize,
    /// Widths of the two skip stages (strides 8 and 4).
    pub refine_widths: [usize; 2],
    pub sem_reduce_channels: usize,
    pub sem_head_width: usize,
    pub mam_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            backbone_widths: [16, 32, 64, 128],
            gim_channels: 64,
            top_n: 3,
            mlp_hidden: 16,
            gem_channels: 256,
            dcf_kernel: 4,
            fuse_channels: 64,
            refine_widths: [32, 16],
            sem_reduce_channels: 256,
            sem_head_width: 64,
            mam_width: 64,
        }
    }
}

impl NetConfig {
    pub fn grid(&self) -> usize {
        self.patch_size / 16
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return bad("network.patch_size must be a positive multiple of 16");
        }
        if self.backbone_widths.iter().chain(&self.refine_widths).any(|&w| w == 0) {
            return bad("network widths must be positive");
        }
        if [self.gim_channels, self.top_n, self.mlp_hidden, self.gem_channels, self.dcf_kernel]
            .iter()
            .chain(&[self.fuse_channels, self.sem_reduce_channels, self.sem_head_width, self.mam_width])
            .any(|&v| v == 0)
        {
            return bad("network sizes must be positive");
        }
        if self.dcf_kernel > self.grid() {
            return bad("network.dcf_kernel must not exceed the feature grid");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Probability threshold for binarizing masks and fitting boxes.
    pub mask_threshold: f32,
    /// Search region side as a multiple of the larger inherent box side.
    pub search_factor: f64,
    pub dcf_init_steps: usize,
    pub dcf_update_steps: usize,
    /// Gaussian label width relative to the inherent size in cells.
    pub dcf_sigma_factor: f64,
    pub dcf_weight_decay: f32,
    pub dcf_initial_step: f32,
    /// Training samples kept for filter updates (the first frame is always kept).
    pub dcf_memory: usize,
    pub sem_min_confidence: f32,
    /// Accepted scale change per frame, as a ratio to the previous size.
    pub sem_max_ratio: f64,
    /// Smallest box side in pixels the tracker will size a region from.
    pub min_box_side: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            mask_threshold: 0.5,
            search_factor: 4.0,
            dcf_init_steps: 30,
            dcf_update_steps: 2,
            dcf_sigma_factor: 0.25,
            dcf_weight_decay: 1e-4,
            dcf_initial_step: 1.0,
            dcf_memory: 6,
            sem_min_confidence: 0.5,
            sem_max_ratio: 2.0,
            min_box_side: 4.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config("tracker.mask_threshold must lie in (0, 1)".into()));
        }
        if !(self.search_factor >= 1.0) || !(self.dcf_sigma_factor > 0.0) || !(self.sem_max_ratio >= 1.0) {
            return Err(Error::Config("tracker.search_factor and sem_max_ratio must be >= 1, dcf_sigma_factor > 0".into()));
        }
        if self.dcf_memory == 0 || !(self.dcf_initial_step > 0.0) || !(self.min_box_side > 0.0) {
            return Err(Error::Config("tracker.dcf_memory, dcf_initial_step and min_box_side must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub sem_iterations: usize,
    pub learning_rate: f32,
    pub decay_factor: f32,
    pub decay_every_epochs: usize,
    pub iterations_per_epoch: usize,
    /// Largest frame distance within a training pair.
    pub max_gap: usize,
    /// Location perturbation as a fraction of the target size.
    pub perturbation: f64,
    /// Fraction of pairs built from a single perturbed image.
    pub static_fraction: f64,
    /// Random shift of the training crop centre, relative to the target size.
    pub crop_jitter: f64,
    /// Random relative change of the training crop size.
    pub scale_jitter: f64,
    pub sequences: usize,
    pub sequence_length: usize,
    pub frame_size: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: 2000,
            sem_iterations: 1000,
            learning_rate: 1e-3,
            decay_factor: 0.2,
            decay_every_epochs: 15,
            iterations_per_epoch: 100,
            max_gap: 50,
            perturbation: 0.125,
            static_fraction: 0.2,
            crop_jitter: 0.25,
            scale_jitter: 0.15,
            sequences: 4,
            sequence_length: 60,
            frame_size: 192,
            checkpoint_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("decay_every_epochs", self.decay_every_epochs),
            ("iterations_per_epoch", self.iterations_per_epoch),
            ("max_gap", self.max_gap),
            ("sequences", self.sequences),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("training.{name} must be positive")));
            }
        }
        if self.sequence_length < 2 {
            return Err(Error::Config("training.sequence_length must be at least 2".into()));
        }
        if self.frame_size < 64 {
            return Err(Error::Config("training.frame_size must be at least 64".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("training.learning_rate and decay_factor must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.perturbation) {
            return Err(Error::Config("training.perturbation must lie in [0, 0.5)".into()));
        }
        if !(0.0..=1.0).contains(&self.static_fraction) {
            return Err(Error::Config("training.static_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) || !(self.crop_jitter >= 0.0) {
            return Err(Error::Config("training.scale_jitter must lie in [0, 1), crop_jitter >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at a given iteration.
    pub fn lr_at(&self, iteration: usize) -> f32 {
        let epoch = iteration / self.iterations_per_epoch;
        let decays = epoch / self.decay_every_epochs;
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

/// Modules that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_gim: bool,
    pub no_gem: bool,
    pub no_sem: bool,
    pub no_attention: bool,
    pub no_mask_in_sem: bool,
    pub no_mam: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 6] = ["no_gim", "no_gem", "no_sem", "no_attention", "no_mask_in_sem", "no_mam"];

    /// Parses a comma-separated flag list such as `no_gim,no_sem`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Self::default();
        for flag in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            a.set(flag)?;
        }
        Ok(a)
    }

    pub fn set(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no_gim" => self.no_gim = true,
            "no_gem" => self.no_gem = true,
            "no_sem" => self.no_sem = true,
            "no_attention" => self.no_attention = true,
            "no_mask_in_sem" => self.no_mask_in_sem = true,
            "no_mam" => self.no_mam = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation flag {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn flags(&self) -> Vec<&'static str> {
        let on = [self.no_gim, self.no_gem, self.no_sem, self.no_attention, self.no_mask_in_sem, self.no_mam];
        Self::NAMES.iter().zip(on).filter(|(_, on)| *on).map(|(n, _)| *n).collect()
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Weights file used by `track`; `train` writes its own.
    pub model: Option<PathBuf>,
    pub network: NetConfig,
    pub tracker: TrackerConfig,
    pub training: TrainConfig,
    pub ablate: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: None,
            network: NetConfig::default(),
            tracker: TrackerConfig::default(),
            training: TrainConfig::default(),
            ablate: Ablation::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.tracker.validate()?;
        self.training.validate()
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }
}
