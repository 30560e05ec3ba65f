use std::io::BufRead;

use anyhow::{bail, Context, Result};
use umbc::Matrix;

/// Reads points (one per line, comma or whitespace separated) and hands
/// them out `chunk_size` lines at a time. Blank lines and `#` comments are
/// skipped.
pub struct PointChunks<R> {
    reader: R,
    chunk_size: usize,
    dim: usize,
    line_no: usize,
    done: bool,
}

impl<R: BufRead> PointChunks<R> {
    pub fn new(reader: R, chunk_size: usize, dim: usize) -> Self {
        Self {
            reader,
            chunk_size,
            dim,
            line_no: 0,
            done: false,
        }
    }

    fn parse(&self, line: &str) -> Result<Option<Vec<f64>>> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(None);
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().with_context(|| format!("line {}: bad number {t:?}", self.line_no)))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != self.dim {
            bail!("line {}: expected {} values, found {}", self.line_no, self.dim, row.len());
        }
        if row.iter().any(|v| !v.is_finite()) {
            bail!("line {}: non-finite value", self.line_no);
        }
        Ok(Some(row))
    }

    fn next_chunk(&mut self) -> Result<Option<Matrix>> {
        let mut data = Vec::with_capacity(self.chunk_size * self.dim);
        let mut line = String::new();
        while data.len() < self.chunk_size * self.dim {
            line.clear();
            if self.reader.read_line(&mut line)? == 0 {
                self.done = true;
                break;
            }
            self.line_no += 1;
            if let Some(row) = self.parse(&line)? {
                data.extend(row);
            }
        }
        if data.is_empty() {
            return Ok(None);
        }
        Ok(Some(Matrix::from_vec(data.len() / self.dim, self.dim, data)?))
    }
}

impl<R: BufRead> Iterator for PointChunks<R> {
    type Item = Result<Matrix>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_chunk() {
            Ok(Some(m)) => Some(Ok(m)),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}
