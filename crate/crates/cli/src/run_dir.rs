//! Run directories: created once, never cleaned, holding the resolved
//! configuration, its digest, a log and the command's artifacts.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ganext_core::volume_store::write_atomic;

use crate::config::Resolved;
use crate::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const DIGEST_FILE: &str = "config.sha256";
pub const LOG_FILE: &str = "run.log";

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Refuses a nonempty directory unless `force` is set. Existing files
    /// are never removed; with `force` they may be overwritten.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            let nonempty = fs::read_dir(root)
                .map_err(|e| CliError::io(root, e))?
                .next()
                .is_some();
            if nonempty && !force {
                return Err(CliError::Config(format!(
                    "run directory {} already exists; pass --force to reuse it",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.root.join(name)
    }

    /// Writes the resolved configuration and its digest; returns the digest.
    pub fn record_config(&self, resolved: &Resolved) -> Result<String> {
        let digest = resolved.digest()?;
        write_atomic(&self.path(CONFIG_FILE), resolved.to_toml()?.as_bytes())?;
        write_atomic(&self.path(DIGEST_FILE), format!("{digest}\n").as_bytes())?;
        self.log(&format!("{} config digest {digest}", resolved.command))?;
        Ok(digest)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        Ok(p)
    }

    /// Appends a line to the run log and echoes it to stderr.
    pub fn log(&self, line: &str) -> Result<()> {
        eprintln!("{line}");
        let p = self.path(LOG_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| CliError::io(&p, e))?;
        writeln!(f, "{line}").map_err(|e| CliError::io(&p, e))
    }
}
