use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Gradient buffer, populated after a backward pass when the tensor is a tracked parameter.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    values.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[[f64; 2]]) -> Self {
        Self {
            shape: vec![rows.len(), 2],
            values: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows and columns, treating a 1-D tensor as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.values.len() / c.max(1), c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(
                op,
                format!("entry {i} is {} (shape {:?})", self.values[i], self.shape),
            )),
        }
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map(|p| p.rows()).unwrap_or(0);
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            values,
            grad: None,
        })
    }
}

/// `c = a · b` for row-major matrices, optionally transposing either operand, accumulating
/// into `c` when `accumulate` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // a is stored as (m,k) or, when transposed, as (k,m).
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(
            Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().dims2(),
            (2, 3)
        );
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T stored as 3x2 column data of a: [1,4,2,5,3,6]
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, false);
        assert_eq!(c2, c);
        gemm(2, 3, 2, &a, false, &b, false, &mut c2, true);
        assert_eq!(c2, [116.0, 128.0, 278.0, 308.0]);
    }

    #[test]
    fn concat_cols_interleaves_rows() {
        let a = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.values(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
