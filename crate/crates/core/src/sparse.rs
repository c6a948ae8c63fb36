//! Row-major sparse matrices and the row-parallel sparse product.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Entries with magnitude below this are dropped after each product.
pub const PRUNE_BELOW: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_parts(
        n_rows: usize,
        n_cols: usize,
        offsets: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
    ) -> Result<Self> {
        if offsets.len() != n_rows + 1
            || offsets[0] != 0
            || *offsets.last().unwrap() != cols.len()
            || cols.len() != vals.len()
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Format("inconsistent CSR arrays".into()));
        }
        for r in 0..n_rows {
            let row = &cols[offsets[r]..offsets[r + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.last().is_some_and(|&c| c >= n_cols) {
                return Err(Error::Format(format!("CSR row {r} has unsorted or out-of-range columns")));
            }
        }
        Ok(Self { n_rows, n_cols, offsets, cols, vals })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    /// Column ids and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).1.iter().sum()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (&c, &v) in self.cols.iter().zip(&self.vals) {
            out[c] += v;
        }
        out
    }

    /// Gustavson's algorithm, one dense accumulator per worker, rows in
    /// parallel. Output rows are sorted by column.
    pub fn matmul(&self, rhs: &CsrMatrix) -> Result<CsrMatrix> {
        if self.n_cols != rhs.n_rows {
            return Err(Error::Dimension(format!(
                "sparse product [{}x{}] x [{}x{}]",
                self.n_rows, self.n_cols, rhs.n_rows, rhs.n_cols
            )));
        }
        let width = rhs.n_cols;
        let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..self.n_rows)
            .into_par_iter()
            .map_init(
                || (vec![0.0f64; width], vec![false; width], Vec::<usize>::new()),
                |(acc, seen, touched), r| {
                    let (lc, lv) = self.row(r);
                    for (&k, &a) in lc.iter().zip(lv) {
                        let (rc, rv) = rhs.row(k);
                        for (&j, &b) in rc.iter().zip(rv) {
                            if !seen[j] {
                                seen[j] = true;
                                touched.push(j);
                            }
                            acc[j] += a * b;
                        }
                    }
                    touched.sort_unstable();
                    let mut cols = Vec::with_capacity(touched.len());
                    let mut vals = Vec::with_capacity(touched.len());
                    for &j in touched.iter() {
                        let v = acc[j];
                        if v.abs() >= PRUNE_BELOW {
                            cols.push(j);
                            vals.push(v);
                        }
                        acc[j] = 0.0;
                        seen[j] = false;
                    }
                    touched.clear();
                    (cols, vals)
                },
            )
            .collect();
        let mut offsets = Vec::with_capacity(self.n_rows + 1);
        offsets.push(0);
        let total = rows.iter().map(|r| r.0.len()).sum();
        let mut cols = Vec::with_capacity(total);
        let mut vals = Vec::with_capacity(total);
        for (c, v) in rows {
            cols.extend(c);
            vals.extend(v);
            offsets.push(cols.len());
        }
        Ok(CsrMatrix { n_rows: self.n_rows, n_cols: width, offsets, cols, vals })
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in out.iter_mut().enumerate() {
            let (c, v) = self.row(r);
            for (&j, &x) in c.iter().zip(v) {
                row[j] = x;
            }
        }
        out
    }
}
