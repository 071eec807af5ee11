//! Checksummed numeric CSV tables. Floats are written with shortest
//! round-trip formatting, so reading a table back reproduces every value
//! bit-exactly; a trailing FNV-1a checksum over the raw float bits rejects
//! corrupted or truncated files.

use std::path::Path;

use mckv::scenario::fnv1a;

pub fn render_table(columns: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    out.push_str(&columns.join(","));
    out.push('\n');
    let mut flat = Vec::with_capacity(rows.len() * columns.len());
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
        flat.extend_from_slice(row);
    }
    out.push_str(&format!("# checksum={:016x}\n", fnv1a(&flat)));
    out
}

pub fn write_table(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> std::io::Result<()> {
    std::fs::write(path, render_table(columns, rows))
}

/// Parse and verify a table produced by [`render_table`].
pub fn read_table(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| "empty table file".to_string())?;
    let columns: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let mut stored_checksum = None;
    for line in lines {
        if let Some(rest) = line.strip_prefix("# checksum=") {
            stored_checksum = Some(
                u64::from_str_radix(rest.trim(), 16)
                    .map_err(|_| format!("malformed checksum line `{line}`"))?,
            );
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if stored_checksum.is_some() {
            return Err("data after checksum line".into());
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("malformed number `{tok}`"))
            })
            .collect::<Result<_, _>>()?;
        if row.len() != columns.len() {
            return Err(format!(
                "row has {} fields, header has {}",
                row.len(),
                columns.len()
            ));
        }
        rows.push(row);
    }
    let stored = stored_checksum.ok_or_else(|| "truncated table: checksum line missing".to_string())?;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let actual = fnv1a(&flat);
    if stored != actual {
        return Err(format!(
            "table checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        ));
    }
    Ok((columns, rows))
}
