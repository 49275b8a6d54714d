//! Artifact writers and the node-value CSV reader.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use pile_core::Field;
use serde::Serialize;

/// Reads a `node,y0` file; rows may come in any order but must cover
/// `0..n` exactly once.
pub fn read_node_values(path: &Path) -> Result<Field, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows: Vec<(usize, f64)> = Vec::new();
    for rec in rdr.deserialize() {
        let (node, value): (usize, f64) = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        rows.push((node, value));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(k, r)| r.0 != k) {
        return Err(format!("{}: node indices must be 0..n without gaps", path.display()));
    }
    Ok(Field::from_iterator(rows.len(), rows.into_iter().map(|r| r.1)))
}

pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

pub fn write_node_values(path: &Path, header: [&str; 2], v: &Field) -> std::io::Result<()> {
    write_csv(path, &header, v.iter().enumerate().map(|(i, x)| (i, *x)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")
}
