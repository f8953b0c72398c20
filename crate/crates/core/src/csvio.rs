//! Versioned CSV tables. The first line is `#format_version=1`, then a
//! header row, then records. Floats are written in shortest round-trip form.

use std::path::Path;

use crate::error::{CoreError, Result};

pub const CSV_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::Config(format!("CSV has no column '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("#format_version={CSV_FORMAT_VERSION}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
        let first = std::str::from_utf8(&bytes[..newline]).unwrap_or("").trim_end();
        let version = first
            .strip_prefix("#format_version=")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| CoreError::Format { offset: 0, detail: "missing #format_version line".into() })?;
        if version != CSV_FORMAT_VERSION {
            return Err(CoreError::Format { offset: 0, detail: format!("unsupported CSV format version {version}") });
        }
        let rest = bytes.get(newline + 1..).unwrap_or(&[]);
        let mut r = csv::Reader::from_reader(rest);
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(CoreError::file(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Table::from_bytes(&std::fs::read(path).map_err(CoreError::file(path))?)
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| CoreError::Format { offset: 0, detail: format!("not a number: '{s}'") })
}

pub fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| CoreError::Format { offset: 0, detail: format!("not an index: '{s}'") })
}
