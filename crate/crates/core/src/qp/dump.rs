//! Plain-text problem dump for cross-checking with external solvers.
//!
//! Sections appear in the order `P`, `q`, `A_eq`, `b_eq`, `lb`, `ub`; each is a
//! header line `name rows cols` followed by `rows` whitespace-separated lines.
//! Infinite bounds are written as `inf` / `-inf`.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DMatrix, DVector};

use super::QuadraticProgram;
use crate::error::{Error, Result};
use crate::lti::format_float;

const SECTIONS: [&str; 6] = ["P", "q", "A_eq", "b_eq", "lb", "ub"];

fn write_matrix<W: Write>(w: &mut W, name: &str, m: &DMatrix<f64>) -> Result<()> {
    writeln!(w, "{name} {} {}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format_float(*v)).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

pub fn write_dump<W: Write>(qp: &QuadraticProgram, mut w: W) -> Result<()> {
    write_matrix(&mut w, "P", qp.p())?;
    write_matrix(&mut w, "q", &col(qp.q()))?;
    write_matrix(&mut w, "A_eq", qp.a_eq())?;
    write_matrix(&mut w, "b_eq", &col(qp.b_eq()))?;
    write_matrix(&mut w, "lb", &col(qp.lb()))?;
    write_matrix(&mut w, "ub", &col(qp.ub()))?;
    Ok(())
}

pub fn read_dump<R: Read>(r: R) -> Result<QuadraticProgram> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let mut mats = Vec::with_capacity(SECTIONS.len());
    for name in SECTIONS {
        let (idx, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("missing section {name}") })?;
        let header = header?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let bad = |msg: String| Error::Parse { line: idx + 1, msg };
        if parts.len() != 3 || parts[0] != name {
            return Err(bad(format!("expected header `{name} rows cols`")));
        }
        let rows: usize = parts[1].parse().map_err(|_| bad("bad row count".into()))?;
        let cols: usize = parts[2].parse().map_err(|_| bad("bad column count".into()))?;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| Error::Parse { line: idx + 2 + i, msg: "truncated section".into() })?;
            let line = line?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != cols {
                return Err(Error::Parse { line: idx + 1, msg: format!("expected {cols} values") });
            }
            for (j, v) in vals.iter().enumerate() {
                m[(i, j)] = v
                    .parse()
                    .map_err(|_| Error::Parse { line: idx + 1, msg: format!("bad number `{v}`") })?;
            }
        }
        mats.push(m);
    }
    let to_vec = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
    QuadraticProgram::new(
        mats[0].clone(),
        to_vec(&mats[1]),
        mats[2].clone(),
        to_vec(&mats[3]),
        to_vec(&mats[4]),
        to_vec(&mats[5]),
    )
}
