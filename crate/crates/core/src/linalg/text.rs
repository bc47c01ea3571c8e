//! Line-oriented matrix text format.
//!
//! ```text
//! rows cols
//! a11 a12 ...
//! ...
//! ```
//!
//! Scalars are written with 17 significant digits so values round-trip
//! exactly through the text form.

use std::fmt::Write as _;

use super::DenseMatrix;
use crate::error::{Error, Result};

pub fn format_scalar(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_matrix(out: &mut String, m: &DenseMatrix) {
    let _ = writeln!(out, "{} {}", m.rows(), m.cols());
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|&v| format_scalar(v)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

pub fn format_matrix(m: &DenseMatrix) -> String {
    let mut s = String::new();
    write_matrix(&mut s, m);
    s
}

/// Parses a document holding exactly one matrix.
pub fn parse_matrix(text: &str) -> Result<DenseMatrix> {
    let mut cursor = LineCursor::new(text);
    let m = cursor.read_matrix()?;
    cursor.expect_end()?;
    Ok(m)
}

/// Cursor over non-blank lines, carrying 1-based line numbers for errors.
pub struct LineCursor<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    pub fn new(text: &'a str) -> Self {
        let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty()).collect();
        Self { lines, pos: 0 }
    }

    pub fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).map(|&(_, l)| l)
    }

    pub fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let line = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::parse(self.last_line() + 1, "unexpected end of input"))?;
        self.pos += 1;
        Ok(line)
    }

    fn last_line(&self) -> usize {
        self.lines.last().map_or(0, |&(n, _)| n)
    }

    pub fn expect_line(&mut self, expected: &str) -> Result<()> {
        let (n, line) = self.next_line()?;
        if line != expected {
            return Err(Error::parse(n, format!("expected `{expected}`, found `{line}`")));
        }
        Ok(())
    }

    pub fn expect_end(&self) -> Result<()> {
        match self.lines.get(self.pos) {
            None => Ok(()),
            Some(&(n, l)) => Err(Error::parse(n, format!("trailing content `{l}`"))),
        }
    }

    pub fn read_matrix(&mut self) -> Result<DenseMatrix> {
        let (n, header) = self.next_line()?;
        let dims: Vec<&str> = header.split_whitespace().collect();
        let parse_dim = |s: &str| {
            s.parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(|| Error::parse(n, format!("bad dimension `{s}`")))
        };
        if dims.len() != 2 {
            return Err(Error::parse(n, format!("expected `rows cols`, found `{header}`")));
        }
        let (rows, cols) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (n, line) = self.next_line()?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::parse(n, format!("bad scalar `{tok}`")))?;
                if !v.is_finite() {
                    return Err(Error::parse(n, format!("non-finite scalar `{tok}`")));
                }
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(Error::parse(n, format!("expected {cols} values, found {}", data.len() - before)));
            }
        }
        DenseMatrix::new(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian;
    use proptest::prelude::*;

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_matrix("2 2\n1 2\n3 x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(parse_matrix("2 2\n1 2\n").is_err());
        assert!(parse_matrix("0 2\n").is_err());
        assert!(parse_matrix("1 2\n1 2 3\n").is_err());
        assert!(parse_matrix("1 1\nnan\n").is_err());
        assert!(parse_matrix("1 1\n1\n2\n").is_err());
    }

    #[test]
    fn accepts_plain_decimal() {
        let m = parse_matrix("2 3\n1 0 0\n0 1 -2.5\n").unwrap();
        assert_eq!(m.get(1, 2), -2.5);
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(), scale in -30i32..30) {
            let m = gaussian(rows, cols, seed, 10f64.powi(scale));
            let back = parse_matrix(&format_matrix(&m)).unwrap();
            prop_assert_eq!(back.as_slice(), m.as_slice());
        }
    }
}
