//! Ridge-regularized least squares via the normal equations.
//!
//! Solves min over (W, b) of ||[X 1][W; b] - Y||^2 + ridge * ||[W; b]||^2.
//! The Gram matrix with a positive ridge is symmetric positive definite, so
//! Cholesky applies; if conditioning still defeats it the ridge is escalated
//! by 10x up to a cap, so the solve never fails on real data.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of an affine least-squares fit.
#[derive(Debug, Clone)]
pub struct AffineFit {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    /// Sum of squared residuals of the fit on its own inputs.
    pub residual: f64,
}

/// Solves A z = rhs for symmetric positive definite A (in-place Cholesky).
fn cholesky_solve(a: &mut Vec<Vec<f64>>, rhs: &mut Vec<Vec<f64>>) -> Result<()> {
    let n = a.len();
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Numeric(format!(
                "cholesky pivot {d} at row {j} is not positive"
            )));
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in j + 1..n {
            let mut v = a[i][j];
            for k in 0..j {
                v -= a[i][k] * a[j][k];
            }
            a[i][j] = v / d;
        }
    }
    let m = rhs[0].len();
    // forward substitution: L y = rhs
    for i in 0..n {
        for c in 0..m {
            let mut v = rhs[i][c];
            for k in 0..i {
                v -= a[i][k] * rhs[k][c];
            }
            rhs[i][c] = v / a[i][i];
        }
    }
    // back substitution: L^T z = y
    for i in (0..n).rev() {
        for c in 0..m {
            let mut v = rhs[i][c];
            for k in i + 1..n {
                v -= a[k][i] * rhs[k][c];
            }
            rhs[i][c] = v / a[i][i];
        }
    }
    Ok(())
}

/// Fits Y ~= X W + b by ridge least squares.
pub fn ridge_affine_fit(x: &Tensor, y: &Tensor, ridge: f64) -> Result<AffineFit> {
    if x.rows() != y.rows() {
        return Err(Error::invalid(format!(
            "row count mismatch: {} inputs vs {} targets",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::invalid("cannot fit on zero rows"));
    }
    if ridge < 0.0 {
        return Err(Error::invalid("ridge must be non-negative"));
    }
    let n = x.rows();
    let d = x.cols() + 1; // augmented with the constant column
    let t = y.cols();

    // gram = [X 1]^T [X 1], xty = [X 1]^T Y
    let mut gram = vec![vec![0.0; d]; d];
    let mut xty = vec![vec![0.0; t]; d];
    for r in 0..n {
        let xr = x.row(r);
        let yr = y.row(r);
        for i in 0..x.cols() {
            let xi = xr[i];
            for j in i..x.cols() {
                gram[i][j] += xi * xr[j];
            }
            gram[i][x.cols()] += xi;
            for c in 0..t {
                xty[i][c] += xi * yr[c];
            }
        }
        gram[x.cols()][x.cols()] += 1.0;
        for c in 0..t {
            xty[x.cols()][c] += yr[c];
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[i][j] = gram[j][i];
        }
    }

    let mut lambda = ridge.max(0.0);
    let cap = 1.0;
    loop {
        let mut a = gram.clone();
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        let mut rhs = xty.clone();
        match cholesky_solve(&mut a, &mut rhs) {
            Ok(()) => {
                let mut wdata = Vec::with_capacity(x.cols() * t);
                for row in rhs.iter().take(x.cols()) {
                    wdata.extend_from_slice(row);
                }
                if wdata.iter().any(|v| !v.is_finite())
                    || rhs[x.cols()].iter().any(|v| !v.is_finite())
                {
                    // fall through to a larger ridge
                } else {
                    let weight = Tensor::from_vec(x.cols(), t, wdata)?;
                    let bias = rhs[x.cols()].clone();
                    let pred = x.matmul(&weight)?.add_row(&bias)?;
                    let residual = pred
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(p, t)| (p - t) * (p - t))
                        .sum();
                    return Ok(AffineFit {
                        weight,
                        bias,
                        residual,
                    });
                }
            }
            Err(_) => {}
        }
        lambda = if lambda == 0.0 { 1e-12 } else { lambda * 10.0 };
        if lambda > cap {
            return Err(Error::Numeric(
                "ridge escalation exhausted without a stable solve".into(),
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn recovers_exact_affine_relation() {
        let mut rng = Rng::new(1);
        let x = Tensor::random_normal(40, 5, 1.0, &mut rng);
        let w = Tensor::random_normal(5, 3, 1.0, &mut rng);
        let b = vec![0.5, -1.0, 2.0];
        let y = x.matmul(&w).unwrap().add_row(&b).unwrap();
        let fit = ridge_affine_fit(&x, &y, 1e-8).unwrap();
        assert!(fit.residual < 1e-8, "residual {}", fit.residual);
        for (a, e) in fit.weight.data().iter().zip(w.data()) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn identity_recovery_on_equal_data() {
        let mut rng = Rng::new(2);
        let x = Tensor::random_normal(60, 6, 1.0, &mut rng);
        let fit = ridge_affine_fit(&x, &x, 1e-8).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!(
                    (fit.weight.get(r, c) - expected).abs() < 1e-6,
                    "weight[{r}][{c}] = {}",
                    fit.weight.get(r, c)
                );
            }
        }
        for b in &fit.bias {
            assert!(b.abs() < 1e-6);
        }
    }

    #[test]
    fn rank_deficient_inputs_still_solve() {
        let mut rng = Rng::new(3);
        let base = Tensor::random_normal(30, 3, 1.0, &mut rng);
        // duplicate a column to make the design rank-deficient
        let mut rows = Vec::new();
        for r in 0..base.rows() {
            let br = base.row(r);
            rows.push(vec![br[0], br[1], br[2], br[2]]);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let y = Tensor::random_normal(30, 2, 1.0, &mut rng);
        let fit = ridge_affine_fit(&x, &y, 1e-8).unwrap();
        assert!(fit.weight.data().iter().all(|v| v.is_finite()));
        assert!(fit.residual.is_finite());
    }

    #[test]
    fn rejects_mismatched_rows() {
        let x = Tensor::zeros(4, 2);
        let y = Tensor::zeros(5, 2);
        assert!(ridge_affine_fit(&x, &y, 1e-8).is_err());
    }
}
