//! Dense row-major matrices of 64-bit reals and the small set of kernels
//! everything else is built from.
//!
//! All kernels are plain functions of their inputs: no interior mutability,
//! no hidden state, identical inputs give bitwise-identical outputs.

use crate::error::{Error, Result};

/// Dense 2-D matrix, row-major `Vec<f64>` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; panics on ragged input. Test/fixture helper.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dim(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Standard product, shape (self.rows, other.cols).
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dim(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j loop order: streams over rows of `other` for cache locality.
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    ///
    /// Per output row the accumulation order is identical to `matmul` on a
    /// pre-transposed operand, so gathered-row products match full products
    /// bitwise row for row.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dim(format!(
                "matmul_nt: {}x{} times ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Row-wise softmax of `self / scale`, computed with per-row max
    /// subtraction so large magnitudes cannot overflow.
    pub fn softmax_rows(&self, scale: f64) -> Matrix {
        assert!(scale > 0.0, "softmax scale must be positive");
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_row_in_place(out.row_mut(r), scale);
        }
        out
    }

    /// Means of each column as a 1 x cols matrix.
    pub fn column_mean(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        let inv = 1.0 / self.rows as f64;
        for v in &mut out.data {
            *v *= inv;
        }
        out
    }

    /// Per column, the mean of its `l` largest entries, as a 1 x cols matrix.
    ///
    /// Equals the maximum of the column sum over all l-element row subsets,
    /// divided by l: the maximizing subset is always the l largest entries.
    /// Entries are summed in descending order so the result is deterministic.
    pub fn top_l_column_mean(&self, l: usize) -> Result<Matrix> {
        if l == 0 || l > self.rows {
            return Err(Error::Arg(format!(
                "top_l_column_mean: l={} out of range 1..={}",
                l, self.rows
            )));
        }
        let mut out = Matrix::zeros(1, self.cols);
        let mut col = vec![0.0; self.rows];
        for c in 0..self.cols {
            for r in 0..self.rows {
                col[r] = self.data[r * self.cols + c];
            }
            col.sort_by(|a, b| b.total_cmp(a));
            out.data[c] = col[..l].iter().sum::<f64>() / l as f64;
        }
        Ok(out)
    }

    /// Indices of the `l` greatest entries of a single-row matrix, in the
    /// order a repeated argmax-and-mask loop visits them. Ties go to the
    /// lowest index. Deterministic.
    pub fn top_l_indices(&self, l: usize) -> Result<Vec<usize>> {
        if self.rows != 1 {
            return Err(Error::Dim(format!(
                "top_l_indices expects a 1xN score row, got {}x{}",
                self.rows, self.cols
            )));
        }
        if l == 0 || l > self.cols {
            return Err(Error::Arg(format!(
                "top_l_indices: l={} out of range 1..={}",
                l, self.cols
            )));
        }
        let mut scores = self.data.clone();
        let mut picked = Vec::with_capacity(l);
        for _ in 0..l {
            let mut best = 0;
            for (j, &s) in scores.iter().enumerate() {
                // strict > keeps the first occurrence on ties
                if s > scores[best] {
                    best = j;
                }
            }
            picked.push(best);
            scores[best] = f64::NEG_INFINITY;
        }
        Ok(picked)
    }
}

/// Softmax of `row / scale` in place with max subtraction.
pub(crate) fn softmax_row_in_place(row: &mut [f64], scale: f64) {
    let inv = 1.0 / scale;
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        let z = v * inv;
        if z > max {
            max = z;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v * inv - max).exp();
        sum += *v;
    }
    let norm = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    // Independent oracle: naive triple loop in j-inner order, distinct from
    // the implementation's accumulation pattern.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{x} vs {y} beyond {tol}");
        }
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 4.0, 9.0]]);
        let id = Matrix::identity(2);
        assert_eq!(id.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 3, 4);
        assert_close(&a.matmul(&b).unwrap(), &matmul_oracle(&a, &b), 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn matmul_nt_equals_matmul_of_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 5, 6);
        let direct = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose()).unwrap();
        assert_close(&direct, &via_t, 1e-12);
    }

    #[test]
    fn matmul_associativity_within_1e9() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 4, 5);
            let b = random_matrix(&mut rng, 5, 6);
            let c = random_matrix(&mut rng, 6, 3);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert_close(&left, &right, 1e-9);
        }
    }

    #[test]
    fn softmax_uniform_on_constant_row() {
        let m = Matrix::zeros(1, 4);
        let s = m.softmax_rows(1.0);
        for &v in s.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let m = Matrix::from_rows(&[vec![1000.0, 0.0]]);
        let s = m.softmax_rows(1.0);
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // softmax([1,2,3] / sqrt(2)), evaluated at 40 decimal digits.
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let s = m.softmax_rows(2.0_f64.sqrt());
        let expected = [
            0.1400292450433780099124936,
            0.2839954097412600152645512,
            0.5759753452153619748229552,
        ];
        for (got, want) in s.as_slice().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_matrix(&mut rng, 6, 9).scale(100.0);
        let s = m.softmax_rows(3.0);
        for r in 0..s.rows() {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn column_mean_hand_and_constant_cases() {
        let m = Matrix::from_rows(&[vec![1.0], vec![3.0]]);
        assert_eq!(m.column_mean().as_slice(), &[2.0]);

        let c = Matrix::filled(5, 3, 7.25);
        for &v in c.column_mean().as_slice() {
            assert_eq!(v, 7.25);
        }
    }

    #[test]
    fn column_mean_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 6, 3);
        let got = m.column_mean();
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..6 {
                s += m.get(r, c);
            }
            assert!((got.get(0, c) - s / 6.0).abs() < 1e-12);
        }
    }

    // Exhaustive oracle: maximize the column sum over all C(L, l) subsets.
    fn subset_max_mean_oracle(m: &Matrix, l: usize) -> Vec<f64> {
        let rows = m.rows();
        let mut best = vec![f64::NEG_INFINITY; m.cols()];
        let mut subset = Vec::new();
        fn recurse(
            m: &Matrix,
            l: usize,
            start: usize,
            rows: usize,
            subset: &mut Vec<usize>,
            best: &mut [f64],
        ) {
            if subset.len() == l {
                for c in 0..m.cols() {
                    let s: f64 = subset.iter().map(|&r| m.get(r, c)).sum();
                    if s > best[c] {
                        best[c] = s;
                    }
                }
                return;
            }
            for r in start..rows {
                subset.push(r);
                recurse(m, l, r + 1, rows, subset, best);
                subset.pop();
            }
        }
        recurse(m, l, 0, rows, &mut subset, &mut best);
        best.iter().map(|s| s / l as f64).collect()
    }

    #[test]
    fn top_l_column_mean_full_l_equals_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = random_matrix(&mut rng, 7, 4);
        let a = m.top_l_column_mean(7).unwrap();
        let b = m.column_mean();
        assert_close(&a, &b, 1e-12);
    }

    #[test]
    fn top_l_column_mean_hand_example() {
        let m = Matrix::from_rows(&[vec![5.0], vec![1.0], vec![3.0]]);
        let got = m.top_l_column_mean(2).unwrap();
        assert_eq!(got.get(0, 0), 4.0);
    }

    #[test]
    fn top_l_column_mean_matches_exhaustive_subset_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for rows in 1..=8usize {
            for l in 1..=rows {
                let m = random_matrix(&mut rng, rows, 3);
                let got = m.top_l_column_mean(l).unwrap();
                let want = subset_max_mean_oracle(&m, l);
                for (g, w) in got.as_slice().iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12, "rows={rows} l={l}");
                }
            }
        }
    }

    #[test]
    fn top_l_column_mean_rejects_out_of_range_l() {
        let m = Matrix::zeros(3, 2);
        assert!(matches!(m.top_l_column_mean(0), Err(Error::Arg(_))));
        assert!(matches!(m.top_l_column_mean(4), Err(Error::Arg(_))));
    }

    #[test]
    fn top_l_indices_hand_ordering() {
        let s = Matrix::from_rows(&[vec![1.0, 9.0, 5.0]]);
        assert_eq!(s.top_l_indices(2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn top_l_indices_ties_take_lowest_index() {
        let s = Matrix::from_rows(&[vec![7.0, 7.0, 7.0]]);
        assert_eq!(s.top_l_indices(2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn top_l_indices_matches_stable_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = random_matrix(&mut rng, 1, 10);
        let got = s.top_l_indices(4).unwrap();
        let mut order: Vec<usize> = (0..10).collect();
        // stable descending sort keeps lowest index first among ties
        order.sort_by(|&a, &b| s.get(0, b).total_cmp(&s.get(0, a)));
        assert_eq!(got, order[..4].to_vec());
    }

    #[test]
    fn top_l_indices_is_duplicate_free_and_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = random_matrix(&mut rng, 1, 12);
        let a = s.top_l_indices(5).unwrap();
        let b = s.top_l_indices(5).unwrap();
        assert_eq!(a, b);
        let mut seen = a.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), a.len());
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]),
            Err(Error::Dim(_))
        ));
    }
}
