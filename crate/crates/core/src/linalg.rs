//! Dense helpers shared by the regression, LASSO and logistic code.
//!
//! The least-squares path uses Householder QR with column-norm pivoting
//! (Businger–Golub), which gives a reliable numerical rank and lets callers
//! name the columns that fall outside it.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Householder QR of an `m x n` matrix with column pivoting, `A P = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Upper triangle holds R; below-diagonal entries are unused.
    r: DMatrix<f64>,
    /// Householder vectors, one per eliminated column, each of length `m - j`.
    reflectors: Vec<(Vec<f64>, f64)>,
    /// `perm[j]` is the original index of the column in pivot position `j`.
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    /// Factorizes `a`; columns whose pivot is below `rel_tol * |R_00|` are rank deficient.
    pub fn new(mut a: DMatrix<f64>, rel_tol: f64) -> Self {
        let (m, n) = a.shape();
        let steps = m.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut reflectors = Vec::with_capacity(steps);

        for j in 0..steps {
            // pivot on the largest remaining column norm; ties keep the lowest index
            let mut best = j;
            let mut best_norm = -1.0;
            for c in j..n {
                let norm: f64 = (j..m).map(|i| a[(i, c)] * a[(i, c)]).sum();
                if norm > best_norm {
                    best_norm = norm;
                    best = c;
                }
            }
            if best != j {
                a.swap_columns(j, best);
                perm.swap(j, best);
            }

            let x: Vec<f64> = (j..m).map(|i| a[(i, j)]).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                reflectors.push((vec![0.0; m - j], 0.0));
                continue;
            }
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            let mut v = x;
            v[0] -= alpha;
            let vtv: f64 = v.iter().map(|t| t * t).sum();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
            for c in j..n {
                let dot: f64 = (j..m).map(|i| v[i - j] * a[(i, c)]).sum();
                let s = beta * dot;
                for i in j..m {
                    a[(i, c)] -= s * v[i - j];
                }
            }
            reflectors.push((v, beta));
        }

        let lead = if steps > 0 { a[(0, 0)].abs() } else { 0.0 };
        let threshold = rel_tol * lead;
        let rank = (0..steps)
            .take_while(|&j| lead > 0.0 && a[(j, j)].abs() > threshold)
            .count();

        PivotedQr {
            r: a,
            reflectors,
            perm,
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ncols(&self) -> usize {
        self.perm.len()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.perm.len()
    }

    /// Original indices of the columns that fell outside the numerical rank.
    pub fn deficient_columns(&self) -> Vec<usize> {
        let mut cols = self.perm[self.rank..].to_vec();
        cols.sort_unstable();
        cols
    }

    fn apply_qt(&self, b: &mut [f64]) {
        for (j, (v, beta)) in self.reflectors.iter().enumerate() {
            let dot: f64 = v.iter().enumerate().map(|(k, vk)| vk * b[j + k]).sum();
            let s = beta * dot;
            for (k, vk) in v.iter().enumerate() {
                b[j + k] -= s * vk;
            }
        }
    }

    /// Least-squares solution of `A x = b`; requires full column rank.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.is_full_rank() {
            return Err(Error::Singular("least squares solve"));
        }
        let n = self.ncols();
        let mut qtb: Vec<f64> = b.iter().copied().collect();
        self.apply_qt(&mut qtb);
        let mut z = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = qtb[i];
            for c in (i + 1)..n {
                acc -= self.r[(i, c)] * z[c];
            }
            z[i] = acc / self.r[(i, i)];
        }
        let mut x = DVector::zeros(n);
        for (pos, &orig) in self.perm.iter().enumerate() {
            x[orig] = z[pos];
        }
        Ok(x)
    }

    /// `(A'A)^{-1}` in the original column order; requires full column rank.
    pub fn gram_inverse(&self) -> Result<DMatrix<f64>> {
        if !self.is_full_rank() {
            return Err(Error::Singular("gram inverse"));
        }
        let n = self.ncols();
        // invert the upper-triangular R by back substitution, column by column
        let mut rinv = DMatrix::<f64>::zeros(n, n);
        for col in 0..n {
            for i in (0..=col).rev() {
                let mut acc = if i == col { 1.0 } else { 0.0 };
                for c in (i + 1)..=col {
                    acc -= self.r[(i, c)] * rinv[(c, col)];
                }
                rinv[(i, col)] = acc / self.r[(i, i)];
            }
        }
        let pinv = &rinv * rinv.transpose();
        let mut out = DMatrix::<f64>::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                out[(self.perm[a], self.perm[b])] = pinv[(a, b)];
            }
        }
        Ok(out)
    }
}

/// Inverse of a symmetric positive definite matrix, with a pivoted-QR fallback
/// for matrices that are semidefinite only up to rounding.
pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.inverse());
    }
    m.clone().try_inverse().ok_or(Error::Singular(what))
}

/// Symmetrize in place, averaging the two triangles.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Weighted mean; weights need not be normalized.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (v, w) in values.iter().zip(weights) {
        num += w * v;
        den += w;
    }
    num / den
}

/// Compensated (Kahan–Neumaier) sum, used where summation order must not leak
/// into results.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Pearson correlation of two equal-length slices; `None` if either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_solves_overdetermined_system() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let qr = PivotedQr::new(a.clone(), 1e-10);
        let x = qr.solve(&b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 2.0).abs() < 1e-12);
        let gi = qr.gram_inverse().unwrap();
        let direct = (a.transpose() * &a).try_inverse().unwrap();
        assert!((gi - direct).abs().max() < 1e-12);
    }

    #[test]
    fn qr_reports_collinear_column() {
        // third column = first + second
        let a = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 2.0, 3.0, 1.0, 5.0, 6.0],
        );
        let qr = PivotedQr::new(a, 1e-10);
        assert_eq!(qr.rank(), 2);
        assert_eq!(qr.deficient_columns().len(), 1);
    }

    #[test]
    fn kahan_matches_exact_small_sum() {
        let v = vec![1e16, 1.0, -1e16];
        assert_eq!(kahan_sum(v), 1.0);
    }
}
