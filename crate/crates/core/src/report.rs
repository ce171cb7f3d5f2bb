//! Accuracy tables (markdown and CSV) and per-figure plot data rendered from
//! persisted sweep results. Rendering is a pure function of the records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::harness::{CellKey, ExperimentResult, Protocol};
use crate::models::ModelKind;
use crate::noise::{NoiseFamily, NOISE_LEVELS};

pub const MISSING: &str = "—";

/// Column order of the accuracy tables.
pub const TABLE_PROTOCOLS: [Protocol; 3] = Protocol::NOISY;

/// `100 * fraction` with one decimal, ties rounded to even.
pub fn percent(fraction: f64) -> String {
    let tenths = fraction * 1000.0;
    let frac = tenths - tenths.trunc();
    let rounded = if (frac.abs() - 0.5).abs() < 1e-9 {
        let down = tenths.trunc();
        let up = down + tenths.signum();
        if down.rem_euclid(2.0) == 0.0 {
            down
        } else {
            up
        }
    } else {
        tenths.round()
    };
    format!("{:.1}", rounded / 10.0)
}

/// `mean±std` in percent.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{}±{}", percent(mean), percent(std))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub level: u8,
    pub family: NoiseFamily,
    /// One entry per protocol in [`TABLE_PROTOCOLS`] order.
    pub cells: [Option<Stat>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub model: ModelKind,
    pub clean: Option<Stat>,
    /// Levels ascending, families in cut-out, salt & pepper, Gaussian order.
    pub rows: Vec<ReportRow>,
}

fn index(results: &[ExperimentResult]) -> BTreeMap<CellKey, Stat> {
    results
        .iter()
        .map(|r| (r.cell, Stat { mean: r.mean, std: r.std }))
        .collect()
}

fn cell_key(model: ModelKind, family: NoiseFamily, level: u8, protocol: Protocol) -> CellKey {
    CellKey {
        model,
        family: Some(family),
        level: Some(level),
        protocol,
    }
}

/// One table per model present in `results`.
pub fn build_tables(results: &[ExperimentResult]) -> Vec<ReportTable> {
    let stats = index(results);
    ModelKind::ALL
        .into_iter()
        .filter(|m| results.iter().any(|r| r.cell.model == *m))
        .map(|model| {
            let rows = NOISE_LEVELS
                .into_iter()
                .flat_map(|level| NoiseFamily::ALL.into_iter().map(move |family| (level, family)))
                .map(|(level, family)| ReportRow {
                    level,
                    family,
                    cells: TABLE_PROTOCOLS.map(|p| stats.get(&cell_key(model, family, level, p)).copied()),
                })
                .collect();
            let clean = stats
                .get(&CellKey {
                    model,
                    family: None,
                    level: None,
                    protocol: Protocol::Clean,
                })
                .copied();
            ReportTable { model, clean, rows }
        })
        .collect()
}

fn cell_text(cell: Option<Stat>) -> String {
    cell.map_or_else(|| MISSING.to_string(), |s| format_cell(s.mean, s.std))
}

impl ReportTable {
    pub fn to_markdown(&self) -> String {
        let mut out = format!("## {}\n\nNoise and accuracy results are in %.\n\n", self.model.title());
        out.push_str("| Noise (%) | Noise type |");
        for p in TABLE_PROTOCOLS {
            out.push_str(&format!(" {} |", p.title()));
        }
        out.push_str("\n|---|---|---|---|---|\n");
        for row in &self.rows {
            out.push_str(&format!("| {} | {} |", row.level, row.family.title()));
            for cell in row.cells {
                out.push_str(&format!(" {} |", cell_text(cell)));
            }
            out.push('\n');
        }
        out.push_str(&format!("\nNo noise: {}\n", cell_text(self.clean)));
        out
    }

    /// Same numbers as the markdown, one row per (level, family), mean and
    /// std in separate columns. Missing cells are empty.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["level".to_string(), "family".to_string()];
        for p in TABLE_PROTOCOLS {
            header.push(format!("{}_mean", p.key()));
            header.push(format!("{}_std", p.key()));
        }
        w.write_record(&header).expect("in-memory write");
        let clean = |s: Option<Stat>| match s {
            Some(s) => [percent(s.mean), percent(s.std)],
            None => [String::new(), String::new()],
        };
        for row in &self.rows {
            let mut rec = vec![row.level.to_string(), row.family.key().to_string()];
            for cell in row.cells {
                rec.extend(clean(cell));
            }
            w.write_record(&rec).expect("in-memory write");
        }
        let mut rec = vec![String::new(), "none".to_string()];
        rec.extend(clean(self.clean));
        rec.resize(header.len(), String::new());
        w.write_record(&rec).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub family: NoiseFamily,
    pub protocol: Protocol,
    /// Header `level,<model>...`, then one row per level ascending; values
    /// are mean accuracy in percent, empty when missing.
    pub csv: String,
}

impl PlotData {
    pub fn file_name(&self) -> String {
        format!("{}_{}.csv", self.family.key(), self.protocol.key())
    }
}

/// One series file per (family, protocol) with a column per model.
pub fn plot_data(results: &[ExperimentResult]) -> Vec<PlotData> {
    let stats = index(results);
    let models: Vec<ModelKind> = ModelKind::ALL
        .into_iter()
        .filter(|m| results.iter().any(|r| r.cell.model == *m))
        .collect();
    let mut out = Vec::new();
    for family in NoiseFamily::ALL {
        for protocol in TABLE_PROTOCOLS {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["level".to_string()];
            header.extend(models.iter().map(|m| m.key().to_string()));
            w.write_record(&header).expect("in-memory write");
            for level in NOISE_LEVELS {
                let mut rec = vec![level.to_string()];
                rec.extend(models.iter().map(|&m| {
                    stats
                        .get(&cell_key(m, family, level, protocol))
                        .map_or_else(String::new, |s| percent(s.mean))
                }));
                w.write_record(&rec).expect("in-memory write");
            }
            out.push(PlotData {
                family,
                protocol,
                csv: String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"),
            });
        }
    }
    out
}

/// Writes `tables/<model>.md`, `tables/<model>.csv` and
/// `plots/<family>_<protocol>.csv` under `dir`; returns the paths written.
pub fn write_report(results: &[ExperimentResult], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let tables_dir = dir.join("tables");
    let plots_dir = dir.join("plots");
    fs::create_dir_all(&tables_dir)?;
    fs::create_dir_all(&plots_dir)?;
    let mut written = Vec::new();
    for table in build_tables(results) {
        for (ext, body) in [("md", table.to_markdown()), ("csv", table.to_csv())] {
            let path = tables_dir.join(format!("{}.{ext}", table.model.key()));
            fs::write(&path, body)?;
            written.push(path);
        }
    }
    for plot in plot_data(results) {
        let path = plots_dir.join(plot.file_name());
        fs::write(&path, &plot.csv)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_formatting() {
        assert_eq!(format_cell(0.978, 0.016), "97.8±1.6");
        assert_eq!(format_cell(0.98, 0.016), "98.0±1.6");
        assert_eq!(percent(1.0), "100.0");
        assert_eq!(percent(0.0), "0.0");
    }

    #[test]
    fn ties_round_to_even() {
        assert_eq!(percent(0.9725), "97.2");
        assert_eq!(percent(0.9735), "97.4");
        assert_eq!(percent(0.00049), "0.0");
    }

    #[test]
    fn empty_results_render_dashes() {
        assert!(build_tables(&[]).is_empty());
        let plots = plot_data(&[]);
        assert_eq!(plots.len(), 9);
        assert!(plots[0].csv.starts_with("level\n10\n20"));
    }
}
