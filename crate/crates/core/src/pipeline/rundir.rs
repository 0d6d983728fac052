use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Config;
use crate::error::Result;

/// `<root>/<timestamp>-<verb>/{config,checkpoints,logs,reports,outputs}`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(parent: &Path, verb: &str) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let mut root = parent.join(format!("{stamp}-{verb}"));
        let mut n = 1;
        while root.exists() {
            n += 1;
            root = parent.join(format!("{stamp}-{verb}-{n}"));
        }
        Self::at(root)
    }

    /// Uses `root` as is, creating the subfolders if needed.
    pub fn at(root: PathBuf) -> Result<Self> {
        for sub in ["config", "checkpoints", "logs", "reports", "outputs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn outputs(&self) -> PathBuf {
        self.root.join("outputs")
    }

    /// Writes the effective configuration and the invocation.
    pub fn echo_config(&self, cfg: &Config, argv: &[String]) -> Result<()> {
        fs::write(self.config().join("effective.toml"), cfg.to_toml())?;
        fs::write(self.config().join("command.txt"), format!("{}\n", argv.join(" ")))?;
        Ok(())
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, text)?;
        Ok(p)
    }

    pub fn append_jsonl<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let p = self.root.join(rel);
        let mut f: File = OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }
}
