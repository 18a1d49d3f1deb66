//! Run directories: a config echo, `run.json` metadata and the outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

/// Name of the configuration echo in every run directory.
pub const CONFIG_ECHO: &str = "config.json";
/// Name of the run metadata file.
pub const RUN_INFO: &str = "run.json";

pub struct RunDir {
    path: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Files written so far, in order.
    pub fn written(&self) -> &[String] {
        &self.written
    }

    pub fn write_text(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.file(name), contents)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        std::fs::write(self.file(name), contents)?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }
}

/// Contents of `run.json`. Everything except `wall_clock_seconds` and
/// `threads` is reproducible.
#[derive(Debug, Serialize)]
pub struct RunInfo<'a> {
    pub tool: &'a str,
    pub version: &'a str,
    pub subcommand: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub outputs: &'a [String],
    pub wall_clock_seconds: f64,
}
