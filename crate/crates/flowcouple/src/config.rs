//! Flat `key=value` run configuration with typed parsing and unknown-key
//! rejection.

use std::fmt::Write as _;
use std::path::Path;

use crate::trainer::{CouplingRegime, CurriculumSchedule, TrainConfig};
use crate::{Error, Result};

/// Everything a run needs beyond the command line: training
/// hyperparameters, the curriculum schedule, and dataset/sampling knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub schedule: CurriculumSchedule,
    /// Steps between periodic checkpoints; 0 disables the periodic saves
    /// (the initial and final checkpoints are always written).
    pub checkpoint_interval: u64,
    /// Instances generated per task for the synthetic dataset.
    pub seeds_per_task: u64,
    /// Euler step count used by `sample` when `--steps` is not given.
    pub sample_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            schedule: CurriculumSchedule::default(),
            checkpoint_interval: 0,
            seeds_per_task: 4,
            sample_steps: 25,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.schedule.validate()?;
        if self.seeds_per_task == 0 {
            return Err(Error::config("seeds_per_task must be >= 1"));
        }
        if self.sample_steps == 0 {
            return Err(Error::config("sample_steps must be >= 1"));
        }
        Ok(())
    }

    /// Apply one `key=value` assignment. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "batch_size" => self.train.batch_size = num(key, value)?,
            "learning_rate" => self.train.learning_rate = num(key, value)?,
            "alpha" => self.train.alpha = num(key, value)?,
            "d_s" => self.train.d_s = num(key, value)?,
            "d_t" => self.train.d_t = num(key, value)?,
            "d_v" => self.train.d_v = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "regime" => self.train.coupling_regime = CouplingRegime::parse(value)?,
            "reflow_rounds" => self.train.reflow_rounds = num(key, value)?,
            "hidden_width" => self.train.hidden_width = num(key, value)?,
            "hidden_layers" => self.train.hidden_layers = num(key, value)?,
            "steps" => self.schedule.max_steps = num(key, value)?,
            "warmup_steps" => self.schedule.warmup_steps = num(key, value)?,
            "warmup_local_frac" => self.schedule.warmup_local_frac = num(key, value)?,
            "main_local_frac" => self.schedule.main_local_frac = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "seeds_per_task" => self.seeds_per_task = num(key, value)?,
            "sample_steps" => self.sample_steps = num(key, value)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a config file: one `key=value` per line, `#` comments and
    /// blank lines allowed.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected key=value, got '{line}'"),
                });
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Serialize back to the flat format; `parse_str(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(s, "alpha = {}", self.train.alpha);
        let _ = writeln!(s, "d_s = {}", self.train.d_s);
        let _ = writeln!(s, "d_t = {}", self.train.d_t);
        let _ = writeln!(s, "d_v = {}", self.train.d_v);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "regime = {}", self.train.coupling_regime);
        let _ = writeln!(s, "reflow_rounds = {}", self.train.reflow_rounds);
        let _ = writeln!(s, "hidden_width = {}", self.train.hidden_width);
        let _ = writeln!(s, "hidden_layers = {}", self.train.hidden_layers);
        let _ = writeln!(s, "steps = {}", self.schedule.max_steps);
        let _ = writeln!(s, "warmup_steps = {}", self.schedule.warmup_steps);
        let _ = writeln!(s, "warmup_local_frac = {}", self.schedule.warmup_local_frac);
        let _ = writeln!(s, "main_local_frac = {}", self.schedule.main_local_frac);
        let _ = writeln!(s, "checkpoint_interval = {}", self.checkpoint_interval);
        let _ = writeln!(s, "seeds_per_task = {}", self.seeds_per_task);
        let _ = writeln!(s, "sample_steps = {}", self.sample_steps);
        s
    }
}

/// Worker count from `FLOWCOUPLE_THREADS`; defaults to 1, never 0.
pub fn thread_count() -> usize {
    std::env::var("FLOWCOUPLE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
