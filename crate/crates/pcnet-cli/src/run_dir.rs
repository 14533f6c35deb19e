//! Per-run output directories, the exclusion lock, and the run manifest.

use pcnet_core::training::TrainConfig;
use pcnet_core::{Error, Result};
use std::fs;
use std::path::{Path, PathBuf};

/// Root for run artifacts: `PCNET_OUT_ROOT` or `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("PCNET_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Resolves the run directory: the explicit `--out-dir` or a fresh
/// timestamped directory under the root. The directory is created.
pub fn resolve(command: &str, explicit: Option<PathBuf>) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d,
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
            let root = output_root();
            let mut candidate = root.join(format!("{}-{}", command, stamp));
            let mut n = 1;
            while candidate.exists() {
                n += 1;
                candidate = root.join(format!("{}-{}-{}", command, stamp, n));
            }
            candidate
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir)
}

/// Guards a run directory against concurrent commands; the lock file is
/// removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Everything needed to reproduce a run: the resolved config plus the
/// dataset selection, written before training starts.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub dataset: String,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub train_fraction: f64,
    pub dataset_fingerprint: String,
    pub artifacts: Vec<String>,
    pub config: TrainConfig,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("manifest.command = {}\n", self.command));
        s.push_str(&format!("manifest.dataset = {}\n", self.dataset));
        s.push_str(&format!("manifest.synth_classes = {}\n", self.synth_classes));
        s.push_str(&format!(
            "manifest.synth_per_class = {}\n",
            self.synth_per_class
        ));
        s.push_str(&format!(
            "manifest.train_fraction = {}\n",
            self.train_fraction
        ));
        s.push_str(&format!(
            "manifest.dataset_fingerprint = {}\n",
            self.dataset_fingerprint
        ));
        s.push_str(&format!("manifest.artifacts = {}\n", self.artifacts.join(",")));
        s.push_str(&self.config.to_text());
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.txt");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut command = String::new();
        let mut dataset = String::from("synth");
        let mut synth_classes = 8usize;
        let mut synth_per_class = 150usize;
        let mut train_fraction = 2.0 / 3.0;
        let mut dataset_fingerprint = String::new();
        let mut artifacts = Vec::new();
        let mut config_lines = String::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("manifest.") {
                let (key, value) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("bad manifest line '{}'", raw)))?;
                let value = value.trim();
                match key.trim() {
                    "command" => command = value.to_string(),
                    "dataset" => dataset = value.to_string(),
                    "synth_classes" => {
                        synth_classes = value
                            .parse()
                            .map_err(|_| Error::Config(format!("bad synth_classes '{}'", value)))?
                    }
                    "synth_per_class" => {
                        synth_per_class = value.parse().map_err(|_| {
                            Error::Config(format!("bad synth_per_class '{}'", value))
                        })?
                    }
                    "train_fraction" => {
                        train_fraction = value
                            .parse()
                            .map_err(|_| Error::Config(format!("bad train_fraction '{}'", value)))?
                    }
                    "dataset_fingerprint" => dataset_fingerprint = value.to_string(),
                    "artifacts" => {
                        artifacts = value.split(',').map(|s| s.to_string()).collect();
                    }
                    other => {
                        return Err(Error::Config(format!("unknown manifest key '{}'", other)))
                    }
                }
            } else {
                config_lines.push_str(line);
                config_lines.push('\n');
            }
        }
        Ok(Manifest {
            command,
            dataset,
            synth_classes,
            synth_per_class,
            train_fraction,
            dataset_fingerprint,
            artifacts,
            config: TrainConfig::from_text(&config_lines)?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let mut config = TrainConfig::default();
        config.epochs = 3;
        config.seed = 9;
        let m = Manifest {
            command: "train".into(),
            dataset: "synth".into(),
            synth_classes: 8,
            synth_per_class: 150,
            train_fraction: 2.0 / 3.0,
            dataset_fingerprint: "abc123".into(),
            artifacts: vec!["metrics.csv".into(), "final.ckpt".into()],
            config,
        };
        let parsed = Manifest::from_text(&m.to_text()).unwrap();
        assert_eq!(m, parsed);
    }

    #[test]
    fn lock_excludes_second_acquire() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
