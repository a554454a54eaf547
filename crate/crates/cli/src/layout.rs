//! Where artifacts live on disk.

use ikd_mil::config::RunConfig;
use std::path::{Path, PathBuf};

pub const CACHE_ENV: &str = "IKD_MIL_CACHE";

#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn of(cfg: &RunConfig) -> Self {
        Self::new(cfg.run_dir())
    }

    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }

    pub fn mil_checkpoint(&self) -> PathBuf {
        self.stage1().join("mil.json")
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.stage1().join("teacher.json")
    }

    pub fn stage1_history(&self) -> PathBuf {
        self.stage1().join("history.csv")
    }

    pub fn distill(&self) -> PathBuf {
        self.root.join("distill")
    }

    pub fn distill_history(&self) -> PathBuf {
        self.distill().join("history.csv")
    }

    pub fn cycles(&self) -> PathBuf {
        self.distill().join("cycles.json")
    }

    pub fn best_student(&self) -> PathBuf {
        self.distill().join("best_student.json")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Root for generated datasets: `$IKD_MIL_CACHE`, else `<out_dir>/data`.
pub fn data_root(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.out_dir.join("data"),
    }
}

/// Directory of the synthetic train/test pair described by `cfg`. The name
/// embeds a hash of both generator specs so different specs never collide.
pub fn synth_dir(cfg: &RunConfig) -> PathBuf {
    data_root(cfg).join(format!("synth-{}-{}", cfg.synth.fingerprint(), cfg.test_synth.fingerprint()))
}

pub fn exists(p: &Path) -> bool {
    p.try_exists().unwrap_or(false)
}
