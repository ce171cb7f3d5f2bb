use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelError, Result, TrainedModel};

pub const MODEL_FORMAT_MAGIC: &str = "noisyarm-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

impl TrainedModel {
    /// Writes the header line `noisyarm-model <version>` followed by one JSON
    /// line holding the whole model. Floats round-trip exactly.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{MODEL_FORMAT_MAGIC} {MODEL_FORMAT_VERSION}")?;
        serde_json::to_writer(&mut w, self).map_err(|e| ModelError::Format(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MODEL_FORMAT_MAGIC) {
            return Err(ModelError::Format("missing model header".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ModelError::Format("unreadable format version".into()))?;
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format version {version} (expected {MODEL_FORMAT_VERSION})"
            )));
        }
        serde_json::from_reader(r).map_err(|e| ModelError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}
