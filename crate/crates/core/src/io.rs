//! CSV dumps of operators, DN maps, extension fields and frequency profiles.
//! Values carry 17 significant digits.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::diagnostics::FrequencyProfile;
use crate::grid::{Grid, Truncation};

/// Metadata line written as a `#` comment at the top of every file.
#[derive(Clone, Copy, Debug)]
pub struct CsvHeader {
    pub dim: usize,
    pub points_per_axis: usize,
    pub s: f64,
    pub truncation: Truncation,
}

impl CsvHeader {
    pub fn new(grid: &Grid, s: f64) -> Self {
        CsvHeader { dim: grid.dim(), points_per_axis: grid.points_per_axis(), s, truncation: grid.truncation() }
    }

    fn line(&self) -> String {
        format!("# n={},N={},s={},truncation={}", self.dim, self.points_per_axis, self.s, self.truncation.tag())
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Dense row-major matrix, one row per line.
pub fn write_matrix_csv(path: &Path, header: &CsvHeader, matrix: &DMatrix<f64>) -> io::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", header.line())?;
    for r in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols()).map(|c| num(matrix[(r, c)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

/// Named columns of equal length.
pub fn write_columns_csv(path: &Path, header: &CsvHeader, names: &[&str], columns: &[&[f64]]) -> io::Result<()> {
    if names.len() != columns.len() || columns.windows(2).any(|c| c[0].len() != c[1].len()) {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "column names and lengths do not match"));
    }
    let mut w = create(path)?;
    writeln!(w, "{}", header.line())?;
    writeln!(w, "{}", names.join(","))?;
    let rows = columns.first().map_or(0, |c| c.len());
    for r in 0..rows {
        let row: Vec<String> = columns.iter().map(|c| num(c[r])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

/// Extension field on the tensor mesh: `x` (or `x0,x1`), `y`, `U`, with the
/// spatial index running fastest.
pub fn write_extension_csv(path: &Path, header: &CsvHeader, grid: &Grid, y: &[f64], field: &[f64]) -> io::Result<()> {
    let nx = grid.len();
    if field.len() != nx * y.len() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "field size does not match the mesh"));
    }
    let mut w = create(path)?;
    writeln!(w, "{}", header.line())?;
    writeln!(w, "{}", if grid.dim() == 2 { "x0,x1,y,U" } else { "x,y,U" })?;
    for (j, &yj) in y.iter().enumerate() {
        for i in 0..nx {
            let x = grid.coords(i);
            let mut cols: Vec<String> = x[..grid.dim()].iter().map(|&v| num(v)).collect();
            cols.push(num(yj));
            cols.push(num(field[j * nx + i]));
            writeln!(w, "{}", cols.join(","))?;
        }
    }
    w.flush()
}

/// Frequency profile columns `r,H,D,N`.
pub fn write_profile_csv(path: &Path, header: &CsvHeader, profile: &FrequencyProfile) -> io::Result<()> {
    write_columns_csv(path, header, &["r", "H", "D", "N"], &[&profile.radii, &profile.h, &profile.d, &profile.n])
}
