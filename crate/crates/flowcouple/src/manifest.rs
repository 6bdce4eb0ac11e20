//! Run manifest: the single file that records everything needed to rerun a
//! command and find its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::trainer::CouplingCounts;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    /// Which subcommand produced this run.
    pub command: String,
    /// Full config snapshot in the flat key=value format.
    pub config_snapshot: String,
    pub seed: u64,
    /// Crate version baked in at compile time.
    pub version: String,
    pub coupling_counts: CouplingCounts,
    /// Every file the run wrote, relative to the out directory.
    pub output_files: Vec<PathBuf>,
    pub wallclock_ms: u128,
}

impl RunManifest {
    pub fn new(command: &str, config_snapshot: String, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_snapshot,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            coupling_counts: CouplingCounts::default(),
            output_files: Vec::new(),
            wallclock_ms: 0,
        }
    }

    pub fn record_output(&mut self, path: impl Into<PathBuf>) {
        self.output_files.push(path.into());
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "version = {}", self.version);
        let c = &self.coupling_counts;
        let _ = writeln!(s, "warmup_local = {}", c.warmup_local);
        let _ = writeln!(s, "warmup_other = {}", c.warmup_other);
        let _ = writeln!(s, "main_local = {}", c.main_local);
        let _ = writeln!(s, "main_other = {}", c.main_other);
        let _ = writeln!(s, "wallclock_ms = {}", self.wallclock_ms);
        for path in &self.output_files {
            let _ = writeln!(s, "output = {}", path.display());
        }
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config_snapshot);
        s
    }

    /// Write atomically into `out_dir/manifest.txt`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.render())?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut manifest = RunManifest::new("", String::new(), 0);
        manifest.version.clear();
        let mut in_config = false;
        for (lineno, raw) in text.lines().enumerate() {
            if in_config {
                manifest.config_snapshot.push_str(raw);
                manifest.config_snapshot.push('\n');
                continue;
            }
            let line = raw.trim();
            if line == "[config]" {
                in_config = true;
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected key=value, got '{line}'"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |k: &str| Error::Parse {
                line: lineno + 1,
                message: format!("bad value for '{k}'"),
            };
            match key {
                "command" => manifest.command = value.to_string(),
                "seed" => manifest.seed = value.parse().map_err(|_| bad(key))?,
                "version" => manifest.version = value.to_string(),
                "warmup_local" => {
                    manifest.coupling_counts.warmup_local = value.parse().map_err(|_| bad(key))?
                }
                "warmup_other" => {
                    manifest.coupling_counts.warmup_other = value.parse().map_err(|_| bad(key))?
                }
                "main_local" => {
                    manifest.coupling_counts.main_local = value.parse().map_err(|_| bad(key))?
                }
                "main_other" => {
                    manifest.coupling_counts.main_other = value.parse().map_err(|_| bad(key))?
                }
                "wallclock_ms" => manifest.wallclock_ms = value.parse().map_err(|_| bad(key))?,
                "output" => manifest.output_files.push(PathBuf::from(value)),
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("unknown manifest key '{other}'"),
                    })
                }
            }
        }
        Ok(manifest)
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(out_dir.join(MANIFEST_FILE))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn sample_manifest() -> RunManifest {
        let mut m = RunManifest::new("train", RunConfig::default().render(), 7);
        m.coupling_counts = CouplingCounts {
            warmup_local: 10,
            warmup_other: 30,
            main_local: 50,
            main_other: 50,
        };
        m.record_output("checkpoint.bin");
        m.record_output("metrics.csv");
        m.wallclock_ms = 1234;
        m
    }

    #[test]
    fn write_load_roundtrip_modulo_wallclock() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest();
        let path = m.write(dir.path()).unwrap();
        assert!(path.ends_with(MANIFEST_FILE));
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn config_snapshot_parses_back_into_a_config() {
        let m = sample_manifest();
        let cfg = RunConfig::parse_str(&m.config_snapshot).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunManifest::parse_str("command = train\nbogus = 1\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("bogus"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn all_outputs_are_listed() {
        let m = sample_manifest();
        let text = m.render();
        assert!(text.contains("output = checkpoint.bin"));
        assert!(text.contains("output = metrics.csv"));
    }
}
