//! Cross-path least squares on total-degree polynomial bases.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Normal matrices with a condition number above this get a larger ridge.
pub const MAX_CONDITION: f64 = 1e12;

/// Exponent tuples of all monomials in `m` variables of total degree at
/// most `degree`, constant first.
pub fn monomial_exponents(m: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; m]];
    for deg in 1..=degree {
        let mut cur = vec![0; m];
        fill(&mut out, &mut cur, 0, deg);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut [usize], i: usize, left: usize) {
    if i + 1 == cur.len() {
        cur[i] = left;
        out.push(cur.to_vec());
        cur[i] = 0;
        return;
    }
    for k in (0..=left).rev() {
        cur[i] = k;
        fill(out, cur, i + 1, left - k);
    }
    cur[i] = 0;
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RegressionDiagnostics {
    pub basis_size: usize,
    pub condition: f64,
    pub ridge: f64,
    /// Features with zero spread are dropped; all dropped means a plain mean.
    pub active_features: usize,
}

/// Basis design for one cross-section of paths. Features are standardized
/// before the monomials are formed.
#[derive(Clone, Debug)]
pub struct Design {
    rows: usize,
    active: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<usize>>,
    /// Multiplier blocks after the plain one, and their column scales.
    mult_scale: Vec<f64>,
    block_cols: Vec<usize>,
    block_offset: Vec<usize>,
    phi: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    pub diagnostics: RegressionDiagnostics,
}

impl Design {
    /// `features` is `rows x m` row-major.
    pub fn new(features: &[f64], m: usize, degree: usize, ridge: f64) -> Self {
        Self::with_multipliers(features, m, degree, ridge, &[], &[])
    }

    /// Basis `psi(x) (1, w_1, .., w_q)` for per-row multipliers `w`
    /// (`rows x q` row-major, `q = block_degree.len()`). Block `b` of a fit is
    /// the coefficient function of `w_b` evaluated at each row, on monomials up
    /// to `block_degree[b - 1]`; block 0 is the plain regression part. A
    /// multiplier that is constant across rows is dropped and fits to zero.
    pub fn with_multipliers(features: &[f64], m: usize, degree: usize, ridge: f64, mult: &[f64], block_degree: &[usize]) -> Self {
        let q = block_degree.len();
        let rows = features.len() / m.max(1);
        let mut active = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for j in 0..m {
            let mut mean = 0.0;
            for r in 0..rows {
                mean += features[r * m + j];
            }
            mean /= rows as f64;
            let mut var = 0.0;
            for r in 0..rows {
                var += (features[r * m + j] - mean).powi(2);
            }
            let sd = (var / rows as f64).sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                active.push(j);
                center.push(mean);
                scale.push(sd);
            }
        }
        let exponents = if active.is_empty() {
            vec![vec![]]
        } else {
            monomial_exponents(active.len(), degree)
        };
        let kb = exponents.len();
        let mut mult_scale = Vec::with_capacity(q);
        let mut block_cols = vec![kb];
        for (b, &deg) in block_degree.iter().enumerate() {
            let col = |r: usize| mult[r * q + b];
            let mean = (0..rows).map(col).sum::<f64>() / rows as f64;
            let ms = (0..rows).map(|r| col(r).powi(2)).sum::<f64>() / rows as f64;
            let var = (0..rows).map(|r| (col(r) - mean).powi(2)).sum::<f64>() / rows as f64;
            if ms == 0.0 || var <= 1e-24 * ms {
                mult_scale.push(0.0);
                block_cols.push(0);
            } else {
                mult_scale.push(1.0 / ms.sqrt());
                block_cols.push(exponents.iter().take_while(|e| e.iter().sum::<usize>() <= deg.min(degree)).count());
            }
        }
        let mut block_offset = vec![0; block_cols.len()];
        for b in 1..block_cols.len() {
            block_offset[b] = block_offset[b - 1] + block_cols[b - 1];
        }
        let k: usize = block_cols.iter().sum();
        let mut phi = DMatrix::<f64>::zeros(rows, k);
        let mut z = vec![0.0; active.len()];
        for r in 0..rows {
            for (a, &j) in active.iter().enumerate() {
                z[a] = (features[r * m + j] - center[a]) / scale[a];
            }
            for (c, ex) in exponents.iter().enumerate() {
                let v: f64 = ex.iter().zip(&z).map(|(&p, &v)| v.powi(p as i32)).product();
                phi[(r, c)] = v;
                for b in 0..q {
                    if c < block_cols[b + 1] {
                        phi[(r, block_offset[b + 1] + c)] = v * mult[r * q + b] * mult_scale[b];
                    }
                }
            }
        }
        let gram = phi.transpose() * &phi;
        let eig: DVector<f64> = gram.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min().max(0.0), eig.max());
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let mut lam = ridge * hi.max(1.0);
        if condition > MAX_CONDITION {
            // Push the smallest eigenvalue up to `hi / MAX_CONDITION`.
            lam = lam.max(hi / MAX_CONDITION - lo);
        }
        // The intercept is left unpenalized so constants are reproduced.
        let mut reg = gram;
        for i in 1..k {
            reg[(i, i)] += lam;
        }
        let chol = Cholesky::new(reg).expect("ridge makes the normal matrix definite");
        Self {
            rows,
            diagnostics: RegressionDiagnostics {
                basis_size: k,
                condition,
                ridge: lam,
                active_features: active.len(),
            },
            active,
            center,
            scale,
            exponents,
            mult_scale,
            block_cols,
            block_offset,
            phi,
            chol,
        }
    }

    /// Number of coefficient blocks, `1 + q`.
    pub fn blocks(&self) -> usize {
        1 + self.mult_scale.len()
    }

    /// Fitted coefficient functions of every block at the design rows, with
    /// standard errors.
    pub fn fit_blocks(&self, target: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let beta = self.solve(target);
        let full = &self.phi * &beta;
        let k = self.phi.ncols();
        let dof = (self.rows as f64 - k as f64).max(1.0);
        let rss: f64 = full.iter().zip(target).map(|(f, t)| (t - f).powi(2)).sum();
        let sigma = (rss / dof).sqrt();
        let inv = self.chol.inverse();
        (0..self.blocks())
            .map(|b| {
                let (kc, off) = (self.block_cols[b], self.block_offset[b]);
                if kc == 0 {
                    return (vec![0.0; self.rows], vec![0.0; self.rows]);
                }
                let scale = if b == 0 { 1.0 } else { self.mult_scale[b - 1] };
                let cov = inv.view((off, off), (kc, kc));
                let coef = beta.rows(off, kc);
                let basis = self.phi.columns(0, kc);
                let vals = (&basis * coef).iter().map(|v| v * scale).collect();
                let se = (0..self.rows)
                    .map(|r| {
                        let row = basis.row(r);
                        let lev = (row * cov * row.transpose())[(0, 0)].max(0.0);
                        sigma * lev.sqrt() * scale
                    })
                    .collect();
                (vals, se)
            })
            .collect()
    }

    /// Column 0 is all ones and unpenalized, so the target mean can be taken
    /// out first: constant targets then give exactly zero slopes.
    fn solve(&self, target: &[f64]) -> DVector<f64> {
        let mean = target.iter().sum::<f64>() / target.len().max(1) as f64;
        let y = DVector::from_iterator(target.len(), target.iter().map(|t| t - mean));
        let mut beta = self.chol.solve(&(self.phi.transpose() * &y));
        beta[0] += mean;
        beta
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Fitted values at the design rows and the standard error of each fit,
    /// `sigma_hat sqrt(phi^T (Phi^T Phi)^{-1} phi)`.
    pub fn fit(&self, target: &[f64]) -> Fit {
        let beta = self.solve(target);
        let fitted = &self.phi * &beta;
        let k = self.exponents.len();
        let dof = (self.rows as f64 - k as f64).max(1.0);
        let rss: f64 = fitted.iter().zip(target).map(|(f, t)| (t - f).powi(2)).sum();
        let sigma = (rss / dof).sqrt();
        let inv = self.chol.inverse();
        let se = (0..self.rows)
            .map(|r| {
                let row = self.phi.row(r);
                let lev = (row * &inv * row.transpose())[(0, 0)].max(0.0);
                sigma * lev.sqrt()
            })
            .collect();
        Fit {
            beta: beta.as_slice().to_vec(),
            fitted: fitted.as_slice().to_vec(),
            se,
        }
    }

    /// Fitted values only.
    pub fn fitted(&self, target: &[f64]) -> Vec<f64> {
        let beta = self.solve(target);
        (&self.phi * &beta).as_slice().to_vec()
    }

    /// Evaluate coefficients at a new feature vector.
    pub fn predict(&self, beta: &[f64], x: &[f64]) -> f64 {
        let z: Vec<f64> = self
            .active
            .iter()
            .enumerate()
            .map(|(a, &j)| (x[j] - self.center[a]) / self.scale[a])
            .collect();
        self.exponents
            .iter()
            .zip(beta)
            .map(|(ex, b)| b * ex.iter().zip(&z).map(|(&p, &v)| v.powi(p as i32)).product::<f64>())
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct Fit {
    pub beta: Vec<f64>,
    pub fitted: Vec<f64>,
    pub se: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_counts_match_binomials() {
        assert_eq!(monomial_exponents(1, 3).len(), 4);
        assert_eq!(monomial_exponents(2, 3).len(), 10);
        assert_eq!(monomial_exponents(3, 2).len(), 10);
        assert!(monomial_exponents(2, 3).iter().all(|e| e.iter().sum::<usize>() <= 3));
    }

    #[test]
    fn cubic_is_reproduced_and_predicts() {
        let xs: Vec<f64> = (0..50).map(|i| 0.5 + i as f64 / 25.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let d = Design::new(&xs, 1, 3, 1e-14);
        let f = d.fit(&ys);
        for (a, b) in f.fitted.iter().zip(&ys) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(f.se.iter().all(|s| *s < 1e-8));
        assert!((d.predict(&f.beta, &[1.3]) - (1.0 - 2.6 + 0.5 * 1.3f64.powi(3))).abs() < 1e-8);
    }

    #[test]
    fn constant_features_fall_back_to_mean() {
        let xs = vec![2.0; 10];
        let ys: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let d = Design::new(&xs, 1, 3, 1e-10);
        assert_eq!(d.diagnostics.active_features, 0);
        let f = d.fit(&ys);
        assert!(f.fitted.iter().all(|v| (v - 4.5).abs() < 1e-8));
        let sd = (ys.iter().map(|y| (y - 4.5) * (y - 4.5)).sum::<f64>() / 9.0).sqrt();
        assert!((f.se[0] - sd / 10f64.sqrt()).abs() < 1e-8);
    }

    #[test]
    fn multiplier_blocks_recover_coefficient_functions() {
        let xs: Vec<f64> = (0..200).map(|i| (i % 20) as f64 / 10.0).collect();
        let w: Vec<f64> = (0..200).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().zip(&w).map(|(x, w)| 1.0 + x + (0.5 - x * x) * w).collect();
        let d = Design::with_multipliers(&xs, 1, 2, 1e-14, &w, &[2]);
        let b = d.fit_blocks(&ys);
        for (r, x) in xs.iter().enumerate() {
            assert!((b[0].0[r] - (1.0 + x)).abs() < 1e-8);
            assert!((b[1].0[r] - (0.5 - x * x)).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_multiplier_is_dropped() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 10.0).collect();
        let w = vec![-0.25; 30];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - x).collect();
        let b = Design::with_multipliers(&xs, 1, 3, 1e-10, &w, &[3]).fit_blocks(&ys);
        assert!(b[0].0.iter().zip(&ys).all(|(a, y)| (a - y).abs() < 1e-7));
        assert!(b[1].0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn collinear_features_raise_ridge() {
        let xs: Vec<f64> = (0..40).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let d = Design::new(&xs, 2, 2, 1e-10);
        assert!(d.diagnostics.condition > MAX_CONDITION);
        let ys: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert!(d.fit(&ys).fitted.iter().zip(&ys).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
