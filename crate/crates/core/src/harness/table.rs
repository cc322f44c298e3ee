//! CSV tables with a provenance comment line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const HASH_PREFIX: &str = "# config-hash: ";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Comment lines above the header in the source file.
    offset: u64,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
            offset: 0,
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Writes the hash comment line, the header and the rows.
    pub fn write<W: Write>(&self, mut w: W, config_hash: &str) -> Result<()> {
        writeln!(w, "{HASH_PREFIX}{config_hash}")?;
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(&self.header)?;
        for r in &self.rows {
            cw.write_record(r)?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.write(BufWriter::new(File::create(path)?), config_hash)
    }

    /// Reads a table, skipping `#` comment lines. An empty input is an empty
    /// table with no header.
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut lines = Vec::new();
        let mut comment_lines = 0u64;
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.starts_with('#') {
                if lines.is_empty() {
                    comment_lines = i as u64 + 1;
                }
                continue;
            }
            lines.push(line);
        }
        let body = lines.join("\n");
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
        let mut table = Table::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::MalformedCsv {
                line: e.position().map_or(0, |p| p.line()) + comment_lines,
                message: e.to_string(),
            })?;
            let row: Vec<String> = rec.iter().map(str::to_string).collect();
            if table.header.is_empty() {
                table.header = row;
            } else {
                table.rows.push(row);
            }
        }
        table.offset = comment_lines;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::read(file)
    }

    /// Parses column `name` of every row as `f64`.
    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name).ok_or_else(|| Error::MalformedCsv {
            line: self.offset + 1,
            message: format!("missing column `{name}`"),
        })?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[c].parse::<f64>().map_err(|e| Error::MalformedCsv {
                    line: self.offset + i as u64 + 2,
                    message: format!("column `{name}`: {e}"),
                })
            })
            .collect()
    }
}

/// Renders an `f64` for CSV output; the shortest string that round-trips.
pub fn num(x: f64) -> String {
    format!("{x}")
}
