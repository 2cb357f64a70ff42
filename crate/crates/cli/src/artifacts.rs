//! Output directory handling and CSV assembly.

use crate::error::CliError;
use serde::Serialize;
use std::fmt::Display;
use std::path::{Path, PathBuf};

pub struct Artifacts {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn subdir(&self, name: &str) -> Result<Artifacts, CliError> {
        Artifacts::new(&self.dir.join(name))
    }

    pub fn text(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)?;
        self.written.push(path);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        s.push('\n');
        self.text(name, &s)
    }
}

/// Comma-separated table; non-finite numbers become empty cells.
pub struct Csv {
    buf: String,
    width: usize,
}

pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let cols: Vec<&str> = header.iter().map(|h| h.as_ref()).collect();
        Self {
            buf: cols.join(",") + "\n",
            width: cols.len(),
        }
    }

    pub fn row<S: Display>(&mut self, cells: &[S]) {
        debug_assert_eq!(cells.len(), self.width, "ragged csv row");
        let line: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.buf.push_str(&line.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }
}
