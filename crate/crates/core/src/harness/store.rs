use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{ExperimentResult, HarnessError, Result};

/// Append-only JSON-lines file holding one [`ExperimentResult`] per line.
#[derive(Debug, Clone)]
pub struct ResultStore {
    path: PathBuf,
}

impl ResultStore {
    pub const FILE_NAME: &'static str = "results.jsonl";

    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    /// The store file inside an output directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self::new(dir.join(Self::FILE_NAME))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn err(&self, message: String) -> HarnessError {
        HarnessError::Store {
            path: self.path.display().to_string(),
            message,
        }
    }

    /// Reads every record. A missing file is an empty store; a torn final
    /// line left by an interrupted write is ignored.
    pub fn load(&self) -> Result<Vec<ExperimentResult>> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
        let last = lines.len().saturating_sub(1);
        let mut out = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(r) => out.push(r),
                Err(_) if i == last => break,
                Err(e) => return Err(self.err(format!("line {}: {e}", i + 1))),
            }
        }
        Ok(out)
    }

    pub fn append(&self, result: &ExperimentResult) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let line = serde_json::to_string(result).map_err(|e| self.err(e.to_string()))?;
        writeln!(f, "{line}")?;
        f.flush()?;
        Ok(())
    }

    /// Atomically replaces the file with `results` in the given order.
    pub fn rewrite(&self, results: &[ExperimentResult]) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = self.path.with_extension("jsonl.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for r in results {
                let line = serde_json::to_string(r).map_err(|e| self.err(e.to_string()))?;
                writeln!(w, "{line}")?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}
