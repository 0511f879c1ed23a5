//! Dense row-major `f64` matrices with the small set of operations the
//! training pipeline needs: matrix products (plain and transposed), row
//! gather/scatter for the selection layers, and elementwise updates.

use crate::error::{Error, Result};

/// A dense 2-d matrix of `f64`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "expected {rows}x{cols} = {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Ok(Tensor2::zeros(0, 0));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * rhs` for `[n x d] * [d x k] -> [n x k]`.
    pub fn matmul(&self, rhs: &Tensor2) -> Result<Tensor2> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (j, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = rhs.row(j);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * rhs` for `[n x d]^T * [n x k] -> [d x k]`.
    pub fn matmul_at_b(&self, rhs: &Tensor2) -> Result<Tensor2> {
        if self.rows != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul_at_b {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Tensor2::zeros(self.cols, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = rhs.row(i);
            for (j, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[j * rhs.cols..(j + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` for `[n x k] * [d x k]^T -> [n x d]`.
    pub fn matmul_a_bt(&self, rhs: &Tensor2) -> Result<Tensor2> {
        if self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "matmul_a_bt {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                let b_row = rhs.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * rhs.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor2, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "add_scaled {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// New matrix whose row `i` is `self.row(idx[i])`. Indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            if r >= self.rows {
                return Err(Error::Dimension(format!(
                    "gather index {r} out of range for {} rows",
                    self.rows
                )));
            }
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        Ok(out)
    }

    /// Adjoint of `gather_rows`: adds `scale * src.row(i)` into row `idx[i]`.
    /// Duplicate indices accumulate. Rows never named in `idx` are not
    /// touched at all, which keeps their bits exactly as initialized.
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &Tensor2, scale: f64) -> Result<()> {
        if src.rows != idx.len() || src.cols != self.cols {
            return Err(Error::Dimension(format!(
                "scatter of {}x{} via {} indices into {}x{}",
                src.rows,
                src.cols,
                idx.len(),
                self.rows,
                self.cols
            )));
        }
        for (i, &r) in idx.iter().enumerate() {
            if r >= self.rows {
                return Err(Error::Dimension(format!(
                    "scatter index {r} out of range for {} rows",
                    self.rows
                )));
            }
            let dst = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (d, &s) in dst.iter_mut().zip(src.row(i)) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    /// Copy of rows `start..end`.
    pub fn sub_rows(&self, start: usize, end: usize) -> Result<Tensor2> {
        if start > end || end > self.rows {
            return Err(Error::Dimension(format!(
                "sub_rows {start}..{end} of {} rows",
                self.rows
            )));
        }
        Ok(Tensor2 {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    pub fn vstack(top: &Tensor2, bottom: &Tensor2) -> Result<Tensor2> {
        if top.cols != bottom.cols {
            return Err(Error::Dimension(format!(
                "vstack {}x{} on {}x{}",
                top.rows, top.cols, bottom.rows, bottom.cols
            )));
        }
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Tensor2 {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }
}

/// Index of the largest value in a slice; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor2::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = Tensor2::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]).unwrap();
        let b = Tensor2::from_rows(&[vec![2.0, 1.0], vec![-1.0, 0.5], vec![4.0, -3.0]]).unwrap();
        // a^T via explicit transpose
        let mut at = Tensor2::zeros(3, 2);
        for i in 0..2 {
            for j in 0..3 {
                at.set(j, i, a.get(i, j));
            }
        }
        let c = a.matmul(&b).unwrap();
        // (a^T)^T b  ==  a b
        assert_eq!(at.matmul_at_b(&b).unwrap().data(), c.data());
        // a (b^T)^T  ==  a b
        let mut bt = Tensor2::zeros(2, 3);
        for i in 0..3 {
            for j in 0..2 {
                bt.set(j, i, b.get(i, j));
            }
        }
        assert_eq!(a.matmul_a_bt(&bt).unwrap().data(), c.data());
    }

    #[test]
    fn gather_then_scatter_roundtrip() {
        let x = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let g = x.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.row(0), &[5.0, 6.0]);
        assert_eq!(g.row(1), &[1.0, 2.0]);
        let mut acc = Tensor2::zeros(3, 2);
        acc.scatter_add_rows(&[2, 0], &g, 1.0).unwrap();
        assert_eq!(acc.row(0), &[1.0, 2.0]);
        assert_eq!(acc.row(1), &[0.0, 0.0]);
        assert_eq!(acc.row(2), &[5.0, 6.0]);
    }

    #[test]
    fn scatter_accumulates_duplicates() {
        let src = Tensor2::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let mut dst = Tensor2::zeros(2, 1);
        dst.scatter_add_rows(&[1, 1], &src, 1.0).unwrap();
        assert_eq!(dst.row(1), &[3.0]);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
        assert!(Tensor2::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
