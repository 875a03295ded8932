//! Row-major point batches and their on-disk formats.
//!
//! Binary `SDAT` layout (little-endian):
//!
//! ```text
//! "SDAT" | version: u32 | rows: u64 | cols: u64 | rows·cols × f32
//! ```
//!
//! CSV files carry a header row of column names followed by one row per point.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub const SDAT_MAGIC: &[u8; 4] = b"SDAT";
pub const SDAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if values.len() % dim != 0 {
            return Err(Error::invalid(
                "values",
                format!("length {} is not a multiple of dim {dim}", values.len()),
            ));
        }
        Ok(Dataset { dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::Empty("rows"))?;
        let mut values = Vec::with_capacity(dim * rows.len());
        for r in rows {
            crate::error::check_dim(dim, r.len())?;
            values.extend_from_slice(r);
        }
        Dataset::new(dim, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            values,
        }
    }

    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Dataset {
        let values = self.rows().flat_map(|r| f(r)).collect();
        Dataset {
            dim: self.dim,
            values,
        }
    }

    /// Seeded shuffle, then the first `fraction` of rows and the rest.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid("split_fraction", "must lie in (0, 1)"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &[rng::streams::SPLIT]));
        let cut = (((self.len() as f64) * fraction).round() as usize).min(self.len());
        let (a, b) = idx.split_at(cut);
        Ok((self.select(a), self.select(b)))
    }

    pub fn write_sdat<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SDAT_MAGIC)?;
        w.write_all(&SDAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_sdat<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 24];
        r.read_exact(&mut head)
            .map_err(|_| Error::format("SDAT", "truncated header"))?;
        if &head[..4] != SDAT_MAGIC {
            return Err(Error::format("SDAT", "bad magic"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != SDAT_VERSION {
            return Err(Error::format("SDAT", format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("SDAT", "size overflow"))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != n {
            return Err(Error::format(
                "SDAT",
                format!("expected {n} payload bytes, found {}", body.len()),
            ));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Dataset::new(cols, values)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for r in self.rows() {
            let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("CSV", "missing header"))??;
        let dim = header.split(',').count();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let before = values.len();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::format("CSV", format!("line {}: cannot parse `{field}`", lineno + 2))
                })?;
                values.push(v);
            }
            if values.len() - before != dim {
                return Err(Error::format(
                    "CSV",
                    format!("line {}: expected {dim} fields", lineno + 2),
                ));
            }
        }
        Dataset::new(dim, values)
    }

    /// Reads `.csv` as CSV and anything else as SDAT.
    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        if is_csv(path) {
            Dataset::read_csv(std::io::BufReader::new(f))
        } else {
            Dataset::read_sdat(std::io::BufReader::new(f))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if is_csv(path) {
            self.write_csv(f)
        } else {
            self.write_sdat(f)
        }
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}
