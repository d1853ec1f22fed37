//! Dense row-major `f64` tensors.
//!
//! This is the only numeric container in the crate. Everything — control
//! vectors, Jacobians, network weights — is one of these. Shapes are dynamic
//! (a `Vec<usize>`); scalars use the empty shape `[]`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Filled with a constant.
    pub fn full(shape: &[usize], x: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![x; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Accumulate `c * other` into self (same shape).
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose on shape {:?}", self.shape);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Matrix product. 1-D operands are promoted: lhs vector as `[1,n]`,
    /// rhs vector as `[n,1]`, the unit dims squeezed from the result.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (a, ar, ac, squeeze_left) = promote_matrix(self, true);
        let (b, br, bc, squeeze_right) = promote_matrix(other, false);
        assert_eq!(
            ac, br,
            "matmul inner dims: {:?} x {:?}",
            self.shape, other.shape
        );
        let mut out = vec![0.0; ar * bc];
        // i-k-j loop keeps both sides streaming row-major.
        for i in 0..ar {
            let arow = &a[i * ac..(i + 1) * ac];
            let orow = &mut out[i * bc..(i + 1) * bc];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[k * bc..(k + 1) * bc];
                for j in 0..bc {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let shape = match (squeeze_left, squeeze_right) {
            (true, true) => vec![],
            (true, false) => vec![bc],
            (false, true) => vec![ar],
            (false, false) => vec![ar, bc],
        };
        Tensor { shape, data: out }
    }
}

fn promote_matrix(t: &Tensor, is_left: bool) -> (&[f64], usize, usize, bool) {
    match t.shape.len() {
        2 => (&t.data, t.shape[0], t.shape[1], false),
        1 => {
            if is_left {
                (&t.data, 1, t.shape[0], true)
            } else {
                (&t.data, t.shape[0], 1, true)
            }
        }
        _ => panic!("matmul operand must be 1-D or 2-D, got {:?}", t.shape),
    }
}

/// Cholesky factorization A = L·Lᵀ of a symmetric positive definite matrix.
/// Returns the lower factor packed row-major. Fails on a non-positive pivot.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    assert_eq!(a.shape.len(), 2);
    let n = a.shape[0];
    assert_eq!(a.shape[1], n, "cholesky needs a square matrix");
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.data[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Cholesky { pivot: i });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], l)
}

/// Solve A·x = b given the lower Cholesky factor of A.
pub fn cholesky_solve(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.shape[0];
    assert_eq!(b.len(), n);
    let ld = &l.data;
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= ld[i * n + k] * y[k];
        }
        y[i] = s / ld[i * n + i];
    }
    // backward: Lᵀ x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= ld[k * n + i] * x[k];
        }
        x[i] = s / ld[i * n + i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_vector_promotions() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::vector(vec![1.0, 1.0]);
        let av = a.matmul(&v);
        assert_eq!(av.shape(), &[2]);
        assert_eq!(av.data(), &[3.0, 7.0]);
        let va = v.matmul(&a);
        assert_eq!(va.data(), &[4.0, 6.0]);
        assert_eq!(v.matmul(&v).item(), 2.0);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().at2(2, 1), 6.0);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        // A = M Mᵀ + I is SPD.
        let m = Tensor::matrix(3, 3, vec![1.0, 2.0, 0.5, -1.0, 0.3, 2.0, 0.7, -0.2, 1.1]).unwrap();
        let a = m.matmul(&m.transpose()).add(&Tensor::eye(3));
        let l = cholesky(&a).unwrap();
        let x_true = vec![1.0, -2.0, 3.0];
        let b = a.matmul(&Tensor::vector(x_true.clone()));
        let x = cholesky_solve(&l, b.data());
        for (xi, ti) in x.iter().zip(&x_true) {
            assert!((xi - ti).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::Cholesky { pivot: 1 })));
    }
}
