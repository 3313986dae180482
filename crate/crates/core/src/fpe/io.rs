//! CSV exchange format for scalar grids.
//!
//! ```text
//! # x_min=<f>, y_min=<f>, resolution=<f>, n_x=<n>, n_y=<n>, sigma=<f>
//! v(0,0),v(1,0),...,v(n_x-1,0)
//! ...
//! v(0,n_y-1),...,v(n_x-1,n_y-1)
//! ```
//!
//! One line per grid row (increasing `y`), comma separated, floats in the
//! fixed [`fmt_f64`] format so headers and values read back bit-exact.
//! Vector fields are written as two files, one per component. Grids that
//! are not tied to a diffusion constant (direct loss) carry `sigma=0`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Grid2D, ScalarGrid};
use crate::{fmt_f64, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridHeader {
    pub grid: Grid2D,
    pub sigma: f64,
}

impl GridHeader {
    pub fn new(grid: Grid2D, sigma: f64) -> Self {
        GridHeader { grid, sigma }
    }

    fn line(&self) -> String {
        let g = &self.grid;
        format!(
            "# x_min={}, y_min={}, resolution={}, n_x={}, n_y={}, sigma={}",
            fmt_f64(g.x_min),
            fmt_f64(g.y_min),
            fmt_f64(g.resolution),
            g.n_x,
            g.n_y,
            fmt_f64(self.sigma)
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| Error::Parse("grid CSV must start with a `#` header line".into()))?;
        let mut fields = [None; 6];
        const KEYS: [&str; 6] = ["x_min", "y_min", "resolution", "n_x", "n_y", "sigma"];
        for part in body.split(',') {
            let (key, value) = part
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("malformed header field `{}`", part.trim())))?;
            let slot = KEYS
                .iter()
                .position(|k| *k == key.trim())
                .ok_or_else(|| Error::Parse(format!("unknown header key `{}`", key.trim())))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad value for `{}`: `{}`", KEYS[slot], value.trim())))?;
            fields[slot] = Some(v);
        }
        let mut vals = [0.0; 6];
        for (k, (v, f)) in vals.iter_mut().zip(fields).enumerate() {
            *v = f.ok_or_else(|| Error::Parse(format!("header is missing `{}`", KEYS[k])))?;
        }
        let count = |v: f64, key: &str| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse(format!("`{key}` must be a positive integer, got {v}")))
            }
        };
        let grid = Grid2D::new(vals[0], vals[1], vals[2], count(vals[3], "n_x")?, count(vals[4], "n_y")?)?;
        Ok(GridHeader { grid, sigma: vals[5] })
    }
}

pub fn write_grid<W: Write>(mut out: W, header: &GridHeader, values: &[f64]) -> Result<()> {
    let g = &header.grid;
    if values.len() != g.len() {
        return Err(Error::DimensionMismatch { expected: g.len(), found: values.len() });
    }
    writeln!(out, "{}", header.line())?;
    for row in values.chunks(g.n_x) {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_grid<R: BufRead>(input: R) -> Result<(GridHeader, Vec<f64>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Parse("empty grid CSV".into()))??;
    let header = GridHeader::parse(&first)?;
    let g = header.grid;
    let mut values = Vec::with_capacity(g.len());
    let mut rows = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let before = values.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {rows}: bad value `{}`", cell.trim())))?;
            values.push(v);
        }
        if values.len() - before != g.n_x {
            return Err(Error::Parse(format!(
                "row {rows} has {} values, header says n_x={}",
                values.len() - before,
                g.n_x
            )));
        }
    }
    if rows != g.n_y {
        return Err(Error::Parse(format!("found {rows} rows, header says n_y={}", g.n_y)));
    }
    Ok((header, values))
}

pub fn write_grid_file(path: &Path, header: &GridHeader, values: &[f64]) -> Result<()> {
    write_grid(BufWriter::new(File::create(path)?), header, values)
}

pub fn read_grid_file(path: &Path) -> Result<(GridHeader, Vec<f64>)> {
    read_grid(BufReader::new(File::open(path)?))
}

impl ScalarGrid {
    pub fn write_csv(&self, path: &Path, sigma: f64) -> Result<()> {
        write_grid_file(path, &GridHeader::new(self.grid, sigma), &self.values)
    }
}
