//! Gram matrices and the kernel dependence scores.
//!
//! [`hsic_biased`] is the plain Hilbert-Schmidt independence criterion,
//! `tr(K̄ L̄) / (n-1)²`. [`conditional_dependence`] is the normalised
//! conditional cross-covariance estimator
//!
//! ```text
//! tr(Rx Rz − 2 Rx Rz Ry + Rx Ry Rz Ry),   R = M̄ (M̄ + nεI)⁻¹
//! ```
//!
//! which is near zero when Z carries no information about X beyond Y.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    /// Wraps a square matrix, rejecting asymmetric input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "Gram matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "Gram matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(GramMatrix(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("Gram rows must have length n".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceScore {
    pub value: f64,
    pub n: usize,
    pub epsilon: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    let dim = points.first().map_or(0, |p| p.as_ref().len());
    if let Some(i) = points.iter().position(|p| p.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "point {i} has dimension {} but point 0 has {dim}",
            points[i].as_ref().len()
        )));
    }
    Ok(dim)
}

/// `K[i][j] = exp(−‖xᵢ − xⱼ‖² / 2σ²)`.
pub fn gaussian_gram<P: AsRef<[f64]> + Sync>(points: &[P], sigma: f64) -> Result<GramMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    check_dims(points)?;
    let n = points.len();
    let denom = 2.0 * sigma * sigma;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = points[i].as_ref();
            (0..n)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        (-squared_distance(xi, points[j].as_ref()) / denom).exp()
                    }
                })
                .collect()
        })
        .collect();
    // Distances are symmetric bit for bit, so the matrix is exactly symmetric.
    Ok(GramMatrix(DMatrix::from_fn(n, n, |i, j| rows[i][j])))
}

/// `K[i][j] = 1` when labels match, else 0.
pub fn delta_gram<T: PartialEq>(labels: &[T]) -> Result<GramMatrix> {
    if labels.is_empty() {
        return Err(Error::InvalidParameter("delta kernel over no labels".into()));
    }
    let n = labels.len();
    Ok(GramMatrix(DMatrix::from_fn(n, n, |i, j| {
        if labels[i] == labels[j] {
            1.0
        } else {
            0.0
        }
    })))
}

/// `H K H` with `H = I − 11ᵀ/n`, computed as double mean removal.
pub fn center_gram(k: &GramMatrix) -> GramMatrix {
    let m = k.matrix();
    let n = m.nrows();
    if n == 0 {
        return k.clone();
    }
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| m.column(j).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut c = DMatrix::from_fn(n, n, |i, j| m[(i, j)] - row_means[i] - col_means[j] + grand);
    // Symmetrise away rounding so downstream factorisations see an exactly
    // symmetric matrix.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    GramMatrix(c)
}

/// Median pairwise Euclidean distance over `i < j`; 1.0 if that median is 0.
/// An even number of pairs averages the two middle distances.
pub fn median_heuristic<P: AsRef<[f64]>>(points: &[P]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter(
            "median heuristic needs at least two points".into(),
        ));
    }
    check_dims(points)?;
    let n = points.len();
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(squared_distance(points[i].as_ref(), points[j].as_ref()).sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

fn same_size(a: &GramMatrix, b: &GramMatrix) -> Result<usize> {
    if a.n() != b.n() {
        return Err(Error::DimensionMismatch(format!(
            "Gram sizes differ: {} vs {}",
            a.n(),
            b.n()
        )));
    }
    Ok(a.n())
}

/// `tr(AB) = Σᵢⱼ A[i,j] B[j,i]` without forming the product.
fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

/// Biased HSIC, `tr(K̄ L̄) / (n−1)²`.
pub fn hsic_biased(k: &GramMatrix, l: &GramMatrix) -> Result<DependenceScore> {
    let n = same_size(k, l)?;
    if n < 2 {
        return Err(Error::InvalidParameter("HSIC needs n >= 2".into()));
    }
    let kc = center_gram(k);
    let lc = center_gram(l);
    let value = trace_of_product(kc.matrix(), lc.matrix()) / ((n - 1) * (n - 1)) as f64;
    Ok(DependenceScore {
        value,
        n,
        epsilon: 0.0,
    })
}

/// `R = M̄ (M̄ + nεI)⁻¹` via a Cholesky solve. `M̄` commutes with the shifted
/// matrix, so `R` is symmetric and equals `(M̄ + nεI)⁻¹ M̄`.
fn regularized_operator(centered: &GramMatrix, epsilon: f64) -> Result<DMatrix<f64>> {
    let m = centered.matrix();
    let n = m.nrows();
    let shifted = m + DMatrix::identity(n, n) * (n as f64 * epsilon);
    let chol = Cholesky::new(shifted).ok_or_else(|| {
        Error::Numerical(format!(
            "regularised Gram not positive definite at epsilon = {epsilon}; increase epsilon"
        ))
    })?;
    let mut r = chol.solve(m);
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (r[(i, j)] + r[(j, i)]);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

/// Conditional dependence of X and Z given Y from their Gram matrices.
pub fn conditional_dependence(
    gx: &GramMatrix,
    gz: &GramMatrix,
    gy: &GramMatrix,
    epsilon: f64,
) -> Result<DependenceScore> {
    let n = same_size(gx, gz)?;
    same_size(gx, gy)?;
    if n < 2 {
        return Err(Error::InvalidParameter(
            "conditional dependence needs n >= 2".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let rx = regularized_operator(&center_gram(gx), epsilon)?;
    let rz = regularized_operator(&center_gram(gz), epsilon)?;
    let ry = regularized_operator(&center_gram(gy), epsilon)?;

    let rz_ry = &rz * &ry;
    let rx_ry = &rx * &ry;
    // tr(Rx Rz) − 2 tr(Rx (Rz Ry)) + tr((Rx Ry)(Rz Ry))
    let t1 = trace_of_product(&rx, &rz);
    let t2 = trace_of_product(&rx, &rz_ry);
    let t3 = trace_of_product(&rx_ry, &rz_ry);
    let value = t1 - 2.0 * t2 + t3;
    if !value.is_finite() {
        return Err(Error::Numerical("conditional dependence is not finite".into()));
    }
    Ok(DependenceScore { value, n, epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_cases() {
        let same = vec![vec![1.0, 2.0]; 4];
        let k = gaussian_gram(&same, 0.7).unwrap();
        assert!(k.matrix().iter().all(|&v| v == 1.0));

        let sigma = 1.3;
        let pts = vec![vec![0.0, 0.0], vec![sigma * 2f64.sqrt(), 0.0], vec![5.0, 1.0]];
        let k = gaussian_gram(&pts, sigma).unwrap();
        assert!((k.get(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((0..3).all(|i| k.get(i, i) == 1.0));
        assert!((k.get(0, 1) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn gaussian_errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(gaussian_gram(&pts, 0.0).is_err());
        assert!(gaussian_gram(&pts, -1.0).is_err());
        let ragged = vec![vec![0.0], vec![1.0, 2.0]];
        assert!(matches!(
            gaussian_gram(&ragged, 1.0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn delta_cases() {
        let k = delta_gram(&["a", "a", "b"]).unwrap();
        assert_eq!(
            k.to_rows(),
            vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]
        );
        assert_eq!(delta_gram(&[1, 2, 3]).unwrap().matrix(), &DMatrix::identity(3, 3));
        assert!(delta_gram(&[7; 4]).unwrap().matrix().iter().all(|&v| v == 1.0));
        assert!(delta_gram::<u8>(&[]).is_err());
    }

    #[test]
    fn centering() {
        let ones = delta_gram(&[0; 5]).unwrap();
        assert!(center_gram(&ones).matrix().iter().all(|v| v.abs() < 1e-15));

        let k = gaussian_gram(&[vec![0.0], vec![0.4], vec![2.0], vec![2.1]], 1.0).unwrap();
        let c = center_gram(&k);
        for i in 0..4 {
            assert!(c.matrix().row(i).sum().abs() < 1e-9);
        }

        let c = center_gram(&GramMatrix::new(DMatrix::identity(2, 2)).unwrap());
        assert_eq!(c.to_rows(), vec![vec![0.5, -0.5], vec![-0.5, 0.5]]);
    }

    #[test]
    fn median_cases() {
        assert_eq!(median_heuristic(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap(), 3.0);
        assert_eq!(median_heuristic(&vec![vec![1.0]; 5]).unwrap(), 1.0);
        assert_eq!(median_heuristic(&[[0.0], [1.0], [10.0]]).unwrap(), 9.0);
        // Four points on a line: distances {1, 2, 3, 1, 2, 1} → median 1.5.
        assert_eq!(median_heuristic(&[[0.0], [1.0], [2.0], [3.0]]).unwrap(), 1.5);
        assert!(median_heuristic(&[[0.0]]).is_err());
    }

    #[test]
    fn hsic_cases() {
        let pts = vec![vec![0.0], vec![0.5], vec![3.0], vec![3.2]];
        let k = gaussian_gram(&pts, 1.0).unwrap();
        let constant = delta_gram(&[1; 4]).unwrap();
        assert!(hsic_biased(&k, &constant).unwrap().value.abs() < 1e-15);

        let l = delta_gram(&["a", "a", "b", "b"]).unwrap();
        let v = hsic_biased(&l, &l).unwrap().value;
        assert!((v - 4.0 / 9.0).abs() < 1e-14, "{v}");

        let a = hsic_biased(&k, &l).unwrap().value;
        let b = hsic_biased(&l, &k).unwrap().value;
        assert!((a - b).abs() < 1e-15);
        assert!(hsic_biased(&k, &delta_gram(&[1, 2, 3]).unwrap()).is_err());
    }

    #[test]
    fn conditional_cases() {
        let labels = [0, 0, 1, 1, 2, 2, 0, 1];
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![(i * i) as f64 * 0.1, i as f64]).collect();
        let gx = gaussian_gram(&pts, 2.0).unwrap();
        let gy = delta_gram(&labels).unwrap();
        let v = conditional_dependence(&gx, &gy, &gy, 1e-6).unwrap();
        assert!(v.value.abs() < 1e-3, "{}", v.value);

        let flat = gaussian_gram(&vec![vec![1.0, 1.0]; 8], 1.0).unwrap();
        let gz = delta_gram(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let v = conditional_dependence(&flat, &gz, &gy, 1e-3).unwrap();
        assert!(v.value.abs() < 1e-12);

        assert!(conditional_dependence(&gx, &gz, &gy, 0.0).is_err());
        assert!(conditional_dependence(&gx, &delta_gram(&[1, 2]).unwrap(), &gy, 1e-3).is_err());
    }

    #[test]
    fn asymmetric_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GramMatrix::new(m).is_err());
    }
}
