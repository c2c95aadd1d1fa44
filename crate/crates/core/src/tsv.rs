//! Line-oriented TSV helpers shared by the sidecar file readers.

use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

/// One data line of a TSV file: its 1-based line number and its fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub line: usize,
    pub fields: Vec<String>,
}

/// Reads every data line of a TSV file. Blank lines and lines starting with
/// `#` are skipped; a trailing `\r` is stripped.
pub fn read_records(path: &Path) -> io::Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(Record {
            line: i + 1,
            fields: line.split('\t').map(str::to_owned).collect(),
        });
    }
    Ok(out)
}

/// Formats a float with the shortest representation that round-trips.
pub fn fmt_exact(value: f64) -> String {
    format!("{value}")
}
