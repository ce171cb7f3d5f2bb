//! Long-format CSV exchange: `sample_id,label,channel,t0,...,t{T-1}`, one row
//! per (sample, channel), channels in the same order for every sample.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{default_class_names, Dataset, DatasetError, LabeledSample, Provenance, Result, Series, NUM_CLASSES};

pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let t_len = dataset.shape().1;
    let mut header = vec!["sample_id".to_string(), "label".into(), "channel".into()];
    header.extend((0..t_len).map(|t| format!("t{t}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(t_len + 3);
    for s in dataset.samples() {
        for (c, name) in s.series.channel_names().iter().enumerate() {
            row.clear();
            row.push(s.sample_id.clone());
            row.push(s.label.to_string());
            row.push(name.clone());
            // `Display` for f64 prints the shortest string that parses back exactly.
            row.extend(s.series.channel(c).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_csv(dataset, std::io::BufWriter::new(File::create(path)?))
}

struct Pending {
    label: usize,
    channels: Vec<String>,
    values: Vec<f64>,
    first_row: usize,
}

/// Parses the CSV layout from any reader; `provenance` is attached as given.
pub fn read_csv<R: Read>(input: R, provenance: Provenance) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r?,
        None => return Err(DatasetError::MissingHeader("file is empty".into())),
    };
    if header.len() < 4 || &header[0] != "sample_id" || &header[1] != "label" || &header[2] != "channel" {
        return Err(DatasetError::MissingHeader("expected sample_id,label,channel,t0,...".into()));
    }
    for (i, name) in header.iter().skip(3).enumerate() {
        if name != format!("t{i}") {
            return Err(DatasetError::MissingHeader(format!("column {} should be 't{i}', found '{name}'", i + 3)));
        }
    }
    let t_len = header.len() - 3;

    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();
    for (idx, record) in records.enumerate() {
        let row = idx + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(DatasetError::Row {
                row,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let id = record[0].to_string();
        let label: i64 = record[1].trim().parse().map_err(|_| DatasetError::Parse {
            row,
            column: 2,
            value: record[1].to_string(),
        })?;
        if !(0..NUM_CLASSES as i64).contains(&label) {
            return Err(DatasetError::LabelOutOfRange { sample_id: id, label });
        }
        let entry = pending.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Pending {
                label: label as usize,
                channels: Vec::new(),
                values: Vec::new(),
                first_row: row,
            }
        });
        if entry.label != label as usize {
            return Err(DatasetError::Row {
                row,
                message: format!(
                    "sample '{id}' has label {label} here but {} on row {}",
                    entry.label, entry.first_row
                ),
            });
        }
        entry.channels.push(record[2].to_string());
        for (col, field) in record.iter().enumerate().skip(3) {
            let v: f64 = field.trim().parse().map_err(|_| DatasetError::Parse {
                row,
                column: col + 1,
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::Parse {
                    row,
                    column: col + 1,
                    value: field.to_string(),
                });
            }
            entry.values.push(v);
        }
    }

    let mut samples = Vec::with_capacity(order.len());
    let mut reference: Option<Vec<String>> = None;
    for id in order {
        let p = pending.remove(&id).expect("every id was recorded");
        match &reference {
            None => reference = Some(p.channels.clone()),
            Some(r) if r.len() != p.channels.len() => {
                return Err(DatasetError::InconsistentShape {
                    sample_id: id,
                    expected: (r.len(), t_len),
                    actual: (p.channels.len(), t_len),
                })
            }
            Some(r) if *r != p.channels => return Err(DatasetError::ChannelOrder { sample_id: id }),
            Some(_) => {}
        }
        let series = Series::new(p.channels.len(), t_len, p.values, p.channels)?;
        samples.push(LabeledSample {
            series,
            label: p.label,
            sample_id: id,
        });
    }
    Dataset::new(samples, default_class_names(), provenance)
}

pub fn ingest_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    read_csv(
        std::io::BufReader::new(file),
        Provenance::Ingested {
            path: path.to_path_buf(),
        },
    )
}
