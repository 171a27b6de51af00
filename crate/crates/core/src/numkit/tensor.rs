use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Entrywise operations. Unary variants ignore the second operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Mul,
    Add,
    Sub,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Tensor2::new", (rows, cols), (data.len(), 1)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor2::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build from nested rows. Panics on ragged input; meant for literals and tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor2::from_raw(n, m, out).check_finite("matmul")
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = vec![0.0; self.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Tensor2::from_raw(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_with(
        &self,
        other: &Tensor2,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor2::from_raw(self.rows, self.cols, data).check_finite(op)
    }

    pub fn elementwise(&self, op: Elementwise, other: Option<&Tensor2>) -> Result<Tensor2> {
        let binary =
            |name| other.ok_or_else(|| Error::Contract(format!("{name} needs two operands")));
        match op {
            Elementwise::Sigmoid => Ok(self.map(sigmoid)),
            Elementwise::Tanh => Ok(self.map(f64::tanh)),
            Elementwise::Mul => self.zip_with(binary("mul")?, "mul", |a, b| a * b),
            Elementwise::Add => self.zip_with(binary("add")?, "add", |a, b| a + b),
            Elementwise::Sub => self.zip_with(binary("sub")?, "sub", |a, b| a - b),
        }
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor2 {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_row(&self) -> Result<Tensor2> {
        if self.is_empty() {
            return Err(Error::Contract("softmax_row of an empty tensor".into()));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Tensor2::from_raw(self.rows, self.cols, out).check_finite("softmax_row")
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn triple_loop(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = Tensor2::identity(2);
        let v = Tensor2::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(id.matmul(&v).unwrap(), v);
        let a = Tensor2::from_rows(&[&[1.0, 2.0]]);
        assert_eq!(a.matmul(&v).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = rng.uniform_tensor(3, 4, -1.0, 1.0);
        let b = rng.uniform_tensor(4, 2, -1.0, 1.0);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(2, 3);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn matmul_associative_and_identity_neutral() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let a = rng.uniform_tensor(2, 2, -2.0, 2.0);
            let b = rng.uniform_tensor(2, 2, -2.0, 2.0);
            let c = rng.uniform_tensor(2, 2, -2.0, 2.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-10);
            assert_eq!(a.matmul(&Tensor2::identity(2)).unwrap(), a);
        }
    }

    #[test]
    fn elementwise_examples() {
        let z = Tensor2::from_rows(&[&[0.0]]);
        assert_eq!(
            z.elementwise(Elementwise::Sigmoid, None).unwrap().data(),
            &[0.5]
        );
        assert_eq!(
            z.elementwise(Elementwise::Tanh, None).unwrap().data(),
            &[0.0]
        );
        let a = Tensor2::from_rows(&[&[2.0, 3.0]]);
        let b = Tensor2::from_rows(&[&[4.0, 5.0]]);
        assert_eq!(
            a.elementwise(Elementwise::Mul, Some(&b)).unwrap().data(),
            &[8.0, 15.0]
        );
        assert!(a
            .elementwise(Elementwise::Add, Some(&Tensor2::zeros(1, 3)))
            .is_err());
        assert!(a.elementwise(Elementwise::Sub, None).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor2::from_rows(&[&[0.0, 0.0]]).softmax_row().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor2::from_rows(&[&[1000.0, 1000.0]])
            .softmax_row()
            .unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor2::from_rows(&[&[1f64.ln(), 3f64.ln()]])
            .softmax_row()
            .unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor2::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Tensor2::new(1, 2, vec![1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(
                xs in proptest::collection::vec(-50.0f64..50.0, 1..8),
                c in -100.0f64..100.0,
            ) {
                let t = Tensor2::row_vector(&xs);
                let s = t.softmax_row().unwrap();
                let sum: f64 = s.data().iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                let shifted = t.map(|v| v + c).softmax_row().unwrap();
                prop_assert!(s.max_abs_diff(&shifted) <= 1e-12);
            }
        }
    }
}
