//! Run-directory management: append-only output directories under the
//! run root, each holding the resolved config, a metadata record, and
//! the command's artifacts. Nothing in the recorded metadata depends on
//! wall-clock time, so repeated runs emit byte-identical files.

use crate::config::RunConfig;
use anyhow::{Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const RUN_ROOT_ENV: &str = "UOMO_RUN_ROOT";

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Create the output directory: an explicit `--out` path is used as
    /// given; otherwise a timestamped name under the run root.
    pub fn create(cfg: &RunConfig, command: &str, out: Option<&Path>) -> Result<RunDir> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(RUN_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
                let mut candidate = root.join(format!("{stamp}-{:08x}-{command}", cfg.hash() as u32));
                let mut n = 0;
                while candidate.exists() {
                    n += 1;
                    candidate = root.join(format!("{stamp}-{:08x}-{command}-{n}", cfg.hash() as u32));
                }
                candidate
            }
        };
        std::fs::create_dir_all(&path).with_context(|| format!("creating run dir {}", path.display()))?;

        std::fs::write(path.join("resolved.toml"), cfg.canonical())
            .with_context(|| format!("writing resolved config under {}", path.display()))?;
        let meta = RunMeta {
            command,
            config_hash: format!("{:016x}", cfg.hash()),
            seed: cfg.seed,
        };
        let mut meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        meta_json.push('\n');
        std::fs::write(path.join("meta.json"), meta_json)
            .with_context(|| format!("writing meta under {}", path.display()))?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_string(&self, name: &str, content: &str) -> Result<()> {
        std::fs::write(self.file(name), content)
            .with_context(|| format!("writing {name} under {}", self.path.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).context("serializing json artifact")?;
        text.push('\n');
        self.write_string(name, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_out_dir_records_config() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("my-run");
        let cfg = RunConfig::default();
        let run = RunDir::create(&cfg, "synth", Some(&out)).unwrap();
        assert!(run.file("resolved.toml").exists());
        assert!(run.file("meta.json").exists());
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run.file("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["command"], "synth");
        assert_eq!(meta["seed"], 0);
    }
}
