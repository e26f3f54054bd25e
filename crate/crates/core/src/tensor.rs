//! Dense numeric kernel: row-major `f64` matrices, softmax / cross-entropy,
//! and the reverse-mode gradients needed for affine + softmax compositions.
//!
//! Deliberately small: no broadcasting, no autodiff graph. Every public
//! operation leaves only finite values behind; non-finite results are
//! reported as [`Error::Numeric`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Floor added inside every logarithm so that underflowing probabilities
/// never produce -inf.
pub const LOG_EPS: f64 = 1e-12;

/// Dense rank-2 array in row-major order. Vectors are 1xN or Nx1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        let t = Tensor { rows, cols, data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot build tensor from zero rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Tensor { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the given rows into a new tensor, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {context}")))
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product. ikj loop order keeps the inner loop contiguous.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out.check_finite("matmul")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{op} shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let out = Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        };
        out.check_finite("scale")?;
        Ok(out)
    }

    /// Adds a bias row vector to every row.
    pub fn add_row(&self, bias: &[f64]) -> Result<Tensor> {
        if bias.len() != self.cols {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} columns",
                bias.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        out.check_finite("add_row")?;
        Ok(out)
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    /// Column sums as a vector of length `cols`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Subtracts each column's mean from the column.
    pub fn center_columns(&self) -> Tensor {
        let mut out = self.clone();
        if self.rows == 0 {
            return out;
        }
        let means: Vec<f64> = self
            .col_sums()
            .into_iter()
            .map(|s| s / self.rows as f64)
            .collect();
        for r in 0..out.rows {
            for (v, m) in out.row_mut(r).iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }
}

/// A probability distribution over classes: non-negative entries summing
/// to one within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<ProbDist> {
        if probs.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("probabilities must be finite and >= 0"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ProbDist { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stabilized softmax of a single logit row.
pub fn softmax(logits: &[f64]) -> Result<ProbDist> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbDist::new(exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise softmax; each output row is a distribution.
pub fn softmax_batch(logits: &Tensor) -> Result<Tensor> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("softmax input contains non-finite values"));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// -log(pred[label] + eps).
pub fn cross_entropy(pred: &ProbDist, label: usize) -> Result<f64> {
    if label >= pred.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            pred.len()
        )));
    }
    Ok(-(pred.probs()[label] + LOG_EPS).ln())
}

/// Mean cross-entropy over a batch of probability rows.
pub fn cross_entropy_batch(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "batch size {} does not match {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if probs.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = probs.row(r);
        if label >= row.len() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                row.len()
            )));
        }
        total += -(row[label] + LOG_EPS).ln();
    }
    Ok(total / probs.rows() as f64)
}

/// In-place SGD update: params <- params - lr * grads, pairwise.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} params but {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "sgd shape mismatch: {:?} vs {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
        p.check_finite("sgd_step")?;
    }
    Ok(())
}

/// Slice variant of [`sgd_step`] for bias vectors.
pub fn sgd_step_slice(param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::invalid("sgd slice length mismatch"));
    }
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * g;
        if !p.is_finite() {
            return Err(Error::Numeric("non-finite value in sgd_step".into()));
        }
    }
    Ok(())
}

/// y = xW + b.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Tensor> {
    x.matmul(w)?.add_row(b)
}

/// Chain-rule gradients for y = xW + b given upstream dL/dy.
/// Returns (dL/dW, dL/db, dL/dx).
pub fn affine_backward(
    x: &Tensor,
    w: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Vec<f64>, Tensor)> {
    if upstream.rows() != x.rows() || upstream.cols() != w.cols() || x.cols() != w.rows() {
        return Err(Error::invalid(format!(
            "affine_backward shape mismatch: x {:?}, w {:?}, upstream {:?}",
            x.shape(),
            w.shape(),
            upstream.shape()
        )));
    }
    let grad_w = x.transpose().matmul(upstream)?;
    let grad_b = upstream.col_sums();
    let grad_x = upstream.matmul(&w.transpose())?;
    Ok((grad_w, grad_b, grad_x))
}

/// Gradient of mean cross-entropy w.r.t. logits, given softmax outputs:
/// (p - onehot(y)) / batch.
pub fn softmax_ce_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if probs.rows() != labels.len() {
        return Err(Error::invalid("softmax_ce_grad batch/label mismatch"));
    }
    let n = probs.rows() as f64;
    let mut grad = probs.scale(1.0 / n)?;
    for (r, &label) in labels.iter().enumerate() {
        if label >= probs.cols() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                probs.cols()
            )));
        }
        let v = grad.get(r, label);
        grad.set(r, label, v - 1.0 / n);
    }
    Ok(grad)
}

/// ReLU backward: passes upstream gradient where the pre-activation was
/// positive.
pub fn relu_backward(pre: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if pre.shape() != upstream.shape() {
        return Err(Error::invalid("relu_backward shape mismatch"));
    }
    let data = pre
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&p, &u)| if p > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::from_vec(pre.rows(), pre.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_symmetry() {
        let d = softmax(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(d.probs()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        for x in [-3.0, 0.0, 17.5] {
            let d = softmax(&[x, x, x]).unwrap();
            for &p in d.probs() {
                assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn softmax_log_ratio() {
        // hand check: exp(ln 1) / (1 + 3) = 0.25, exp(ln 3) / 4 = 0.75
        let d = softmax(&[1.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert_abs_diff_eq!(d.probs()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let perfect = ProbDist::new(vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy(&perfect, 0).unwrap() <= 1e-11);

        let even = ProbDist::new(vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(cross_entropy(&even, 1).unwrap(), 2.0f64.ln(), epsilon = 1e-9);

        let skew = ProbDist::new(vec![0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(cross_entropy(&skew, 0).unwrap(), 4.0f64.ln(), epsilon = 1e-9);

        assert!(cross_entropy(&even, 2).is_err());
    }

    #[test]
    fn sgd_step_cases() {
        let mut p = vec![Tensor::from_vec(1, 1, vec![1.0]).unwrap()];
        let g = vec![Tensor::from_vec(1, 1, vec![0.0]).unwrap()];
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0]);

        let g = vec![Tensor::from_vec(1, 1, vec![1.0]).unwrap()];
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert_abs_diff_eq!(p[0].data()[0], 0.9, epsilon = 1e-15);

        let mut p = vec![Tensor::from_vec(1, 2, vec![2.0, -2.0]).unwrap()];
        let g = vec![Tensor::from_vec(1, 2, vec![4.0, -4.0]).unwrap()];
        sgd_step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p[0].data(), &[0.0, 0.0]);

        let bad = vec![Tensor::zeros(2, 2)];
        assert!(sgd_step(&mut p, &bad, 0.1).is_err());
    }

    #[test]
    fn affine_backward_zero_upstream() {
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_vec(3, 2, vec![0.1; 6]).unwrap();
        let up = Tensor::zeros(2, 2);
        let (dw, db, dx) = affine_backward(&x, &w, &up).unwrap();
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert!(db.iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_backward_scalar_chain_rule() {
        let x = Tensor::from_vec(1, 1, vec![2.0]).unwrap();
        let w = Tensor::from_vec(1, 1, vec![3.0]).unwrap();
        let up = Tensor::from_vec(1, 1, vec![1.0]).unwrap();
        let (dw, db, dx) = affine_backward(&x, &w, &up).unwrap();
        assert_abs_diff_eq!(dw.data()[0], 2.0);
        assert_abs_diff_eq!(db[0], 1.0);
        assert_abs_diff_eq!(dx.data()[0], 3.0);
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        // loss = sum(y) so upstream is all ones; central differences, step 1e-4
        let mut rng = Rng::new(11);
        let x = Tensor::random_normal(3, 4, 1.0, &mut rng);
        let mut w = Tensor::random_normal(4, 2, 1.0, &mut rng);
        let b = vec![0.1, -0.2];
        let up = Tensor::from_vec(3, 2, vec![1.0; 6]).unwrap();
        let (dw, _, _) = affine_backward(&x, &w, &up).unwrap();
        let h = 1e-4;
        for r in 0..4 {
            for c in 0..2 {
                let orig = w.get(r, c);
                w.set(r, c, orig + h);
                let plus: f64 = affine_forward(&x, &w, &b).unwrap().data().iter().sum();
                w.set(r, c, orig - h);
                let minus: f64 = affine_forward(&x, &w, &b).unwrap().data().iter().sum();
                w.set(r, c, orig);
                let fd = (plus - minus) / (2.0 * h);
                assert_abs_diff_eq!(dw.get(r, c), fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn softmax_batch_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let logits = Tensor::random_normal(10, 7, 3.0, &mut rng);
        let probs = softmax_batch(&logits).unwrap();
        for r in 0..probs.rows() {
            let s: f64 = probs.row(r).iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::from_vec(1, 2, vec![f64::NAN, 0.0]).is_err());
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 2);
        assert!(a.matmul(&b).is_err());
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(x.matmul(&eye).unwrap(), x);
    }

    #[test]
    fn center_columns_zero_mean() {
        let mut rng = Rng::new(2);
        let x = Tensor::random_normal(20, 4, 2.0, &mut rng);
        let c = x.center_columns();
        for s in c.col_sums() {
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-10);
        }
    }
}
