//! Stage runner for the align → pretrain chain and the evaluations.
//!
//! Every stage reads its inputs from and writes its artifacts to one run
//! directory, and finishes with `<stage>_report.txt` (key=value) plus a CSV
//! copy. Reports carry the config hash and no timing or paths, so equal
//! configs give byte-identical reports.

mod data;
mod eval;
mod gradcheck;
mod train;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use gradcheck::gradient_suite;

use crate::config::RunConfig;
use crate::error::{GepError, Result};
use crate::metrics::Report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Synth,
    Accumulate,
    Align,
    Pretrain,
    Rollout,
    EvalSeg,
    EvalDepth,
    EvalCluster,
    Gradcheck,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Accumulate,
        Stage::Align,
        Stage::Pretrain,
        Stage::Rollout,
        Stage::EvalSeg,
        Stage::EvalDepth,
        Stage::EvalCluster,
        Stage::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Accumulate => "accumulate",
            Stage::Align => "align",
            Stage::Pretrain => "pretrain",
            Stage::Rollout => "rollout",
            Stage::EvalSeg => "eval-seg",
            Stage::EvalDepth => "eval-depth",
            Stage::EvalCluster => "eval-cluster",
            Stage::Gradcheck => "gradcheck",
        }
    }

    pub fn report_name(self) -> String {
        format!("{}_report.txt", self.name().replace('-', "_"))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = GepError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| GepError::Parameter(format!("unknown stage `{s}`")))
    }
}

/// Artifact locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn events(&self, split: &str, index: usize) -> PathBuf {
        self.root.join("events").join(format!("{split}_{index:04}.evt"))
    }

    pub fn sequence(&self, index: usize) -> PathBuf {
        self.root.join("sequences").join(format!("seq_{index:02}.seq"))
    }

    /// Fails with a stage-order error naming the stage that makes `name`.
    fn require(&self, stage: Stage, name: &str, prerequisite: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(GepError::StageOrder {
                stage: stage.name().into(),
                prerequisite: prerequisite.name().into(),
                missing: name.into(),
            })
        }
    }
}

pub(crate) const SAMPLES: &str = "samples.blob";
pub(crate) const SEG_TRAIN: &str = "train_seg.lbl";
pub(crate) const SEG_EVAL: &str = "eval_seg.lbl";
pub(crate) const FRAMES: &str = "frames.blob";
pub(crate) const ENCODERS: &str = "encoders.blob";
pub(crate) const CHECKPOINT: &str = "transformer.ckpt";

/// Independent generator for one named use of the run seed.
pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn header(cfg: &RunConfig, stage: Stage) -> Report {
    let mut r = Report::default();
    r.push("stage", stage.name());
    r.push("config_hash", cfg.hash());
    r.push("seed", cfg.seed);
    r
}

/// Runs one stage and writes its report files.
pub fn run_stage(cfg: &RunConfig, stage: Stage, out: &Path) -> Result<Report> {
    cfg.validate()?;
    let dir = RunDir::new(out);
    fs::create_dir_all(dir.root())?;
    let mut report = header(cfg, stage);
    let outcome = match stage {
        Stage::Synth => data::synth(cfg, &dir, &mut report),
        Stage::Accumulate => data::accumulate(cfg, &dir, &mut report),
        Stage::Align => train::align(cfg, &dir, &mut report),
        Stage::Pretrain => train::pretrain(cfg, &dir, &mut report),
        Stage::Rollout => train::rollout(cfg, &dir, &mut report),
        Stage::EvalSeg => eval::segmentation(cfg, &dir, &mut report),
        Stage::EvalDepth => eval::depth(cfg, &dir, &mut report),
        Stage::EvalCluster => eval::clusters(cfg, &dir, &mut report),
        Stage::Gradcheck => gradcheck::run(cfg, &mut report),
    };
    // A failed gradient check still leaves its report behind.
    if outcome.is_ok() || matches!(outcome, Err(GepError::Contract(_))) {
        fs::write(dir.path(&stage.report_name()), report.to_kv())?;
        fs::write(dir.path(&stage.report_name().replace(".txt", ".csv")), report.to_csv())?;
    }
    outcome.map(|_| report)
}

/// Every stage in dependency order.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<Vec<Report>> {
    Stage::ALL.into_iter().map(|s| run_stage(cfg, s, out)).collect()
}

fn fmt_f(v: f64) -> String {
    format!("{v:.12e}")
}
