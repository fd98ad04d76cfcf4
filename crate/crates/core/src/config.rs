//! Flat TOML run configuration with load-time validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignWeights;
use crate::error::{GepError, Result};
use crate::events::Resolution;
use crate::heads::{DepthRange, DepthSupervision};
use crate::lm::TransformerConfig;
use crate::synth::{SynthScene, NUM_SHAPES};
use crate::tensor::{LrSchedule, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // synthetic data
    pub height: usize,
    pub width: usize,
    /// Rendered frames per recognition sample.
    pub sample_frames: usize,
    pub fps: f64,
    pub threshold: f64,
    pub noise_rate: f64,
    pub radius: f64,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Labelled images used to pretrain the frozen teacher.
    pub teacher_per_class: usize,
    /// Paired event/image clips for sequence pretraining.
    pub clips: usize,
    /// Image-only clips mixed into pretraining.
    pub image_clips: usize,
    pub clip_steps: usize,

    // accumulation
    pub percentile: u32,
    pub bins: usize,
    pub augment: bool,

    // encoders and alignment
    pub patch: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub head_hidden_dim: usize,
    pub lambda_cos: f64,
    pub lambda_nce: f64,
    pub mu: f64,
    pub tau: f64,
    pub align_steps: usize,
    pub align_batch: usize,
    pub align_lr: f64,
    pub align_warmup: usize,
    pub teacher_steps: usize,
    pub teacher_batch: usize,
    pub teacher_lr: f64,
    pub weight_decay: f64,

    // sequence pretraining
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_window: usize,
    pub encoding_std: f64,
    /// Pooled tokens per modality per time step.
    pub tokens_per_step: usize,
    pub event_first: bool,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_warmup: usize,
    pub context_steps: usize,
    pub horizon_steps: usize,

    // task heads
    pub seg_steps: usize,
    pub seg_lr: f64,
    pub head_batch: usize,
    pub ignore_index: Option<u32>,
    pub depth_steps: usize,
    pub depth_lr: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub depth_scales: Vec<usize>,
    pub silog_lambda: f64,
    pub w_silog: f64,
    pub w_ms_grad: f64,
    /// Evaluation samples whose predictions are dumped.
    pub dump_count: usize,

    // gradient checks
    pub gradcheck_seeds: u64,
    pub gradcheck_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = AlignWeights::default();
        let t = TransformerConfig::default();
        Self {
            seed: 0,
            height: 32,
            width: 32,
            sample_frames: 5,
            fps: 100.0,
            threshold: 0.2,
            noise_rate: 0.002,
            radius: 7.0,
            train_per_class: 24,
            eval_per_class: 12,
            teacher_per_class: 128,
            clips: 4,
            image_clips: 1,
            clip_steps: 48,
            percentile: 99,
            bins: 1,
            augment: false,
            patch: 4,
            hidden: 64,
            embed_dim: t.dim,
            head_hidden_dim: 64,
            lambda_cos: w.lambda_cos,
            lambda_nce: w.lambda_nce,
            mu: w.mu,
            tau: w.tau,
            align_steps: 300,
            align_batch: 32,
            align_lr: 3e-3,
            align_warmup: 20,
            teacher_steps: 600,
            teacher_batch: 64,
            teacher_lr: 1e-2,
            weight_decay: 1e-5,
            layers: t.layers,
            heads: t.heads,
            ff_dim: t.ff_dim,
            max_window: t.max_window,
            encoding_std: t.encoding_std,
            tokens_per_step: 2,
            event_first: true,
            pretrain_steps: 300,
            pretrain_batch: 4,
            pretrain_lr: 5e-4,
            pretrain_warmup: 100,
            context_steps: 16,
            horizon_steps: 32,
            seg_steps: 200,
            seg_lr: 1e-2,
            head_batch: 16,
            ignore_index: None,
            depth_steps: 200,
            depth_lr: 1e-2,
            depth_min: 1.0,
            depth_max: 20.0,
            depth_scales: vec![1, 2, 4],
            silog_lambda: 0.85,
            w_silog: 1.0,
            w_ms_grad: 0.25,
            dump_count: 4,
            gradcheck_seeds: 20,
            gradcheck_tol: 1e-4,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(GepError::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| GepError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GepError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: GepError| match e {
            GepError::Config(_) => e,
            other => GepError::Config(other.to_string()),
        };
        self.align_weights().validate().map_err(wrap)?;
        self.transformer().validate().map_err(wrap)?;
        self.depth_range().validate().map_err(wrap)?;
        self.scene(0).validate().map_err(wrap)?;
        let sup = DepthSupervision {
            scales: self.depth_scales.clone(),
            lambda: self.silog_lambda,
            w_silog: self.w_silog,
            w_ms_grad: self.w_ms_grad,
            ..DepthSupervision::new(Tensor::filled(&[self.height, self.width], 1.0), Tensor::filled(&[self.height, self.width], 1.0))
        };
        sup.validate().map_err(wrap)?;
        for &s in &self.depth_scales {
            check(s > 0 && self.height.is_multiple_of(s) && self.width.is_multiple_of(s) && (self.height / s >= 2 || self.width / s >= 2), || {
                format!("depth scale {s} does not tile {}×{}", self.height, self.width)
            })?;
        }

        check(self.percentile > 0 && self.percentile <= 100, || format!("percentile {} outside 1..=100", self.percentile))?;
        check(self.bins >= 1, || "bins must be at least 1".into())?;
        check(self.sample_frames >= 2, || "sample_frames must be at least 2".into())?;
        check(
            self.patch > 0 && self.height.is_multiple_of(self.patch) && self.width.is_multiple_of(self.patch),
            || format!("patch {} does not tile {}×{}", self.patch, self.height, self.width),
        )?;
        let grid_rows = self.height / self.patch;
        check(
            self.tokens_per_step >= 1 && grid_rows.is_multiple_of(self.tokens_per_step),
            || format!("tokens_per_step {} must divide the {grid_rows} patch rows", self.tokens_per_step),
        )?;
        check(self.hidden > 0 && self.embed_dim > 0 && self.head_hidden_dim > 0, || "layer widths must be positive".into())?;
        check(self.train_per_class >= 1 && self.eval_per_class >= 1 && self.teacher_per_class >= 1, || {
            "every split needs at least one sample per class".into()
        })?;
        let (train, teach) = (self.train_per_class * NUM_SHAPES * self.bins, self.teacher_per_class * NUM_SHAPES);
        check(self.align_batch >= 2 && self.align_batch <= train, || {
            format!("align_batch {} must lie in 2..={train}", self.align_batch)
        })?;
        check(self.teacher_batch >= 1 && self.teacher_batch <= teach, || {
            format!("teacher_batch {} must lie in 1..={teach}", self.teacher_batch)
        })?;
        check(
            self.head_batch >= 1 && self.head_batch <= self.train_per_class * NUM_SHAPES,
            || format!("head_batch {} exceeds the training split", self.head_batch),
        )?;
        for (name, lr) in [
            ("align_lr", self.align_lr),
            ("teacher_lr", self.teacher_lr),
            ("pretrain_lr", self.pretrain_lr),
            ("seg_lr", self.seg_lr),
            ("depth_lr", self.depth_lr),
        ] {
            check(lr.is_finite() && lr >= 0.0, || format!("{name} must be finite and non-negative"))?;
        }
        check(self.weight_decay.is_finite() && self.weight_decay >= 0.0, || "weight_decay must be non-negative".into())?;

        check(self.clips >= 1, || "at least one paired clip is required".into())?;
        let per_step = 2 * self.tokens_per_step;
        check(self.context_steps >= 1, || "context_steps must be at least 1".into())?;
        check(self.context_steps * per_step <= self.max_window, || {
            format!("context of {} tokens exceeds max_window {}", self.context_steps * per_step, self.max_window)
        })?;
        check(self.clip_steps >= self.context_steps + self.horizon_steps, || {
            "clip_steps must cover context_steps + horizon_steps".into()
        })?;
        check(self.clip_steps * per_step > self.max_window, || {
            format!("clips of {} tokens leave no window of {} plus a target", self.clip_steps * per_step, self.max_window)
        })?;
        check(self.pretrain_batch >= 1, || "pretrain_batch must be at least 1".into())?;
        if let Some(i) = self.ignore_index {
            check(i as usize <= NUM_SHAPES, || format!("ignore_index {i} is not a class id"))?;
        }
        check(self.gradcheck_seeds >= 1, || "gradcheck_seeds must be at least 1".into())?;
        check(self.gradcheck_tol > 0.0, || "gradcheck_tol must be positive".into())?;
        Ok(())
    }

    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.height, self.width)
    }

    /// Template scene; samplers fill in class, motion and noise seed.
    pub fn scene(&self, frames: usize) -> SynthScene {
        SynthScene {
            seed: 0,
            resolution: self.resolution(),
            frames: frames.max(self.sample_frames),
            fps: self.fps,
            threshold: self.threshold,
            noise_rate: self.noise_rate,
            class: 0,
            center: (0.0, 0.0),
            velocity: (0.0, 0.0),
            angular_velocity: 0.0,
            angle: 0.0,
            radius: self.radius,
            object_depth: 2.0,
        }
    }

    pub fn align_weights(&self) -> AlignWeights {
        AlignWeights {
            lambda_cos: self.lambda_cos,
            lambda_nce: self.lambda_nce,
            mu: self.mu,
            tau: self.tau,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.embed_dim,
            ff_dim: self.ff_dim,
            max_window: self.max_window,
            seed: self.seed,
            encoding_std: self.encoding_std,
        }
    }

    pub fn depth_range(&self) -> DepthRange {
        DepthRange {
            d_min: self.depth_min,
            d_max: self.depth_max,
        }
    }

    pub fn schedule(peak: f64, warmup: usize, steps: usize) -> LrSchedule {
        LrSchedule {
            peak,
            warmup_steps: warmup.min(steps),
            total_steps: steps,
        }
    }
}
