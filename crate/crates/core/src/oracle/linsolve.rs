//! Sparse linear solvers for the grid operator.
//!
//! The operator is a stencil matrix: a diagonal plus, per axis, one lower and
//! one upper neighbour coefficient. It is strictly diagonally dominant with
//! non-positive off-diagonals, so banded LU without pivoting is stable.

use crate::error::{Error, Result};

/// `(A v)_i = diag_i v_i + Σ_k lo_ik v_{i - s_k} + hi_ik v_{i + s_k}`.
#[derive(Debug, Clone)]
pub struct StencilMatrix {
    pub n: usize,
    pub strides: Vec<usize>,
    pub diag: Vec<f64>,
    /// `n × axes`, row-major.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StencilMatrix {
    pub fn new(n: usize, strides: Vec<usize>) -> Self {
        let k = strides.len();
        Self {
            n,
            strides,
            diag: vec![0.0; n],
            lo: vec![0.0; n * k],
            hi: vec![0.0; n * k],
        }
    }

    fn axes(&self) -> usize {
        self.strides.len()
    }

    pub fn matvec(&self, v: &[f64], out: &mut [f64]) {
        let k = self.axes();
        for i in 0..self.n {
            let mut acc = self.diag[i] * v[i];
            for (ax, &s) in self.strides.iter().enumerate() {
                let l = self.lo[i * k + ax];
                if l != 0.0 {
                    acc += l * v[i - s];
                }
                let h = self.hi[i * k + ax];
                if h != 0.0 {
                    acc += h * v[i + s];
                }
            }
            out[i] = acc;
        }
    }

    pub fn bandwidth(&self) -> usize {
        self.strides.iter().cloned().max().unwrap_or(0)
    }

    /// Smallest row margin `|a_ii| - Σ_j |a_ij|`.
    pub fn dominance_margin(&self) -> f64 {
        let k = self.axes();
        (0..self.n)
            .map(|i| {
                let off: f64 = (0..k)
                    .map(|ax| self.lo[i * k + ax].abs() + self.hi[i * k + ax].abs())
                    .sum();
                self.diag[i].abs() - off
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// LU factors in band storage, `2·bw + 1` entries per row.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedLu {
    pub fn factor(a: &StencilMatrix) -> Result<Self> {
        let n = a.n;
        let bw = a.bandwidth();
        let width = 2 * bw + 1;
        let mut band = vec![0.0; n * width];
        let k = a.strides.len();
        // entry (i, j) lives at band[i * width + (j + bw - i)]
        for i in 0..n {
            band[i * width + bw] = a.diag[i];
            for (ax, &s) in a.strides.iter().enumerate() {
                if a.lo[i * k + ax] != 0.0 {
                    band[i * width + bw - s] += a.lo[i * k + ax];
                }
                if a.hi[i * k + ax] != 0.0 {
                    band[i * width + bw + s] += a.hi[i * k + ax];
                }
            }
        }
        for p in 0..n {
            let pivot = band[p * width + bw];
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(Error::Oracle(format!("zero pivot at row {p}")));
            }
            let last = (p + bw).min(n - 1);
            for i in p + 1..=last {
                let idx = i * width + (p + bw - i);
                let l = band[idx] / pivot;
                if l == 0.0 {
                    continue;
                }
                band[idx] = l;
                for j in p + 1..=last {
                    let u = band[p * width + (j + bw - p)];
                    if u != 0.0 {
                        band[i * width + (j + bw - i)] -= l * u;
                    }
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.n, self.bw);
        let width = 2 * bw + 1;
        let mut x = rhs.to_vec();
        for i in 0..n {
            let first = i.saturating_sub(bw);
            let mut acc = x[i];
            for j in first..i {
                acc -= self.band[i * width + (j + bw - i)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let last = (i + bw).min(n - 1);
            let mut acc = x[i];
            for j in i + 1..=last {
                acc -= self.band[i * width + (j + bw - i)] * x[j];
            }
            x[i] = acc / self.band[i * width + bw];
        }
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Jacobi-preconditioned BiCGSTAB to relative residual `tol`.
pub fn bicgstab(a: &StencilMatrix, rhs: &[f64], x0: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.n;
    let inv_d: Vec<f64> = a.diag.iter().map(|d| 1.0 / d).collect();
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    let mut r = vec![0.0; n];
    a.matvec(&x, &mut r);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    let bnorm = dot(rhs, rhs).sqrt().max(1e-300);
    if dot(&r, &r).sqrt() / bnorm < tol {
        return Ok(x);
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut zz = vec![0.0; n];
    let mut t = vec![0.0; n];
    for _ in 0..max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            return Err(Error::Oracle("BiCGSTAB breakdown".into()));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv_d[i] * p[i];
        }
        a.matvec(&y, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if dot(&s, &s).sqrt() / bnorm < tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(x);
        }
        for i in 0..n {
            zz[i] = inv_d[i] * s[i];
        }
        a.matvec(&zz, &mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * y[i] + omega * zz[i];
            r[i] = s[i] - omega * t[i];
        }
        if dot(&r, &r).sqrt() / bnorm < tol {
            return Ok(x);
        }
        if !omega.is_finite() || omega == 0.0 {
            return Err(Error::Oracle("BiCGSTAB stagnated".into()));
        }
    }
    Err(Error::Oracle(format!("BiCGSTAB did not converge in {max_iter} iterations")))
}

/// Direct factorization below `1e5` unknowns, iterative above.
pub fn solve(a: &StencilMatrix, rhs: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
    if a.n < 100_000 {
        Ok(BandedLu::factor(a)?.solve(rhs))
    } else {
        bicgstab(a, rhs, guess, 1e-12, 20_000)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2D diagonally dominant test operator on an `nx × ny` grid.
    fn operator(nx: usize, ny: usize) -> StencilMatrix {
        let n = nx * ny;
        let mut a = StencilMatrix::new(n, vec![1, nx]);
        for j in 0..ny {
            for i in 0..nx {
                let p = i + nx * j;
                let mut off = 0.0;
                if i > 0 {
                    a.lo[2 * p] = -1.0 - 0.1 * (p % 3) as f64;
                    off -= a.lo[2 * p];
                }
                if i + 1 < nx {
                    a.hi[2 * p] = -0.7;
                    off += 0.7;
                }
                if j > 0 {
                    a.lo[2 * p + 1] = -0.4;
                    off += 0.4;
                }
                if j + 1 < ny {
                    a.hi[2 * p + 1] = -1.3;
                    off += 1.3;
                }
                a.diag[p] = off + 0.5;
            }
        }
        a
    }

    #[test]
    fn banded_lu_and_bicgstab_agree() {
        let a = operator(17, 11);
        let x_true: Vec<f64> = (0..a.n).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let mut b = vec![0.0; a.n];
        a.matvec(&x_true, &mut b);
        let lu = BandedLu::factor(&a).unwrap().solve(&b);
        let it = bicgstab(&a, &b, None, 1e-13, 5000).unwrap();
        for i in 0..a.n {
            assert!((lu[i] - x_true[i]).abs() < 1e-10);
            assert!((it[i] - x_true[i]).abs() < 1e-8);
        }
        assert!((a.dominance_margin() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tridiagonal_case() {
        let mut a = StencilMatrix::new(5, vec![1]);
        for i in 0..5 {
            a.diag[i] = 4.0;
            if i > 0 {
                a.lo[i] = -1.0;
            }
            if i < 4 {
                a.hi[i] = -1.0;
            }
        }
        let x = solve(&a, &[1.0; 5], None).unwrap();
        let mut back = vec![0.0; 5];
        a.matvec(&x, &mut back);
        for v in back {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }
}
