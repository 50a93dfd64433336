//! Discounted algebraic Riccati equation for unconstrained LQR.
//!
//! With `V(x) = -xᵀPx + c` and `Ã = A - (λ/2) I` the HJB equation reduces to
//!
//! ```text
//! ÃᵀP + PÃ - P B R⁻¹ Bᵀ P + Q = 0,     c = -tr(σσᵀ P) / λ,
//! ```
//!
//! solved here by Newton–Kleinman iteration on Lyapunov equations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problems::Lqr;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub c: f64,
    /// Feedback gain `K = R⁻¹BᵀP`; the optimal control is `u = -Kx`.
    pub gain: DMatrix<f64>,
    /// Frobenius norm of the Riccati residual after each Newton step.
    pub residual_history: Vec<f64>,
}

impl RiccatiSolution {
    pub fn value(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        -(v.transpose() * &self.p * &v)[(0, 0)] + self.c
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(x);
        (&self.p * v * -2.0).iter().cloned().collect()
    }

    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(x);
        (&self.gain * v * -1.0).iter().cloned().collect()
    }

    /// Residual of the unconstrained HJB equation at `x` for the quadratic value.
    pub fn hjb_residual(&self, lqr: &Lqr, sigma_sq: &DMatrix<f64>, lambda: f64, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let u = DVector::from_vec(self.control(x));
        let grad = DVector::from_vec(self.gradient(x));
        let drift = &lqr.a * &xv + &lqr.b * &u;
        let reward = -(xv.transpose() * &lqr.q * &xv)[(0, 0)] - (u.transpose() * &lqr.r * &u)[(0, 0)];
        let trace = (sigma_sq * &self.p).trace() * -2.0;
        lambda * self.value(x) - 0.5 * trace - drift.dot(&grad) - reward
    }
}

/// Solve `MᵀX + XM + C = 0` through the Kronecker-product linear system.
pub fn solve_lyapunov(m: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let n = d * d;
    // column-major vec: (I ⊗ Mᵀ + Mᵀ ⊗ I) vec(X) = -vec(C)
    let mut k = DMatrix::zeros(n, n);
    for j in 0..d {
        for i in 0..d {
            let row = i + j * d;
            for l in 0..d {
                k[(row, l + j * d)] += m[(l, i)];
                k[(row, i + l * d)] += m[(l, j)];
            }
        }
    }
    let rhs = DVector::from_iterator(n, c.iter().map(|v| -v));
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Oracle("singular Lyapunov operator".into()))?;
    let x = DMatrix::from_column_slice(d, d, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

fn max_real_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn riccati_residual(at: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, rinv: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (at.transpose() * p + p * at - p * b * rinv * b.transpose() * p + q).norm()
}

/// Newton–Kleinman solution of the discounted Riccati equation.
pub fn solve_riccati_discounted(lqr: &Lqr, lambda: f64, sigma_sq: &DMatrix<f64>) -> Result<RiccatiSolution> {
    let (a, b, q, r) = (&lqr.a, &lqr.b, &lqr.q, &lqr.r);
    let d = a.nrows();
    if lambda <= 0.0 {
        return Err(Error::Oracle("discount rate must be positive".into()));
    }
    let rinv = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Oracle("R is not positive definite".into()))?
        .inverse();
    let at = a - DMatrix::identity(d, d) * (0.5 * lambda);

    let mut k = initial_gain(&at, b)?;
    let mut history = Vec::new();
    let tol = 1e-10 * q.norm().max(1.0);
    let mut p = DMatrix::zeros(d, d);
    for _ in 0..100 {
        let closed = &at - b * &k;
        let forcing = q + k.transpose() * r * &k;
        p = solve_lyapunov(&closed, &forcing)?;
        k = &rinv * b.transpose() * &p;
        let res = riccati_residual(&at, b, q, &rinv, &p);
        history.push(res);
        if !res.is_finite() {
            return Err(Error::Oracle("Riccati iteration diverged".into()));
        }
        // one extra step once converged: Newton is quadratic, so this lands
        // at rounding level
        if res < tol && history.len() >= 2 && history[history.len() - 2] < tol {
            let c = -(sigma_sq * &p).trace() / lambda;
            return Ok(RiccatiSolution {
                p,
                c,
                gain: k,
                residual_history: history,
            });
        }
    }
    Err(Error::Oracle(format!(
        "Newton–Kleinman did not converge (residual {:e})",
        riccati_residual(&at, b, q, &rinv, &p)
    )))
}

/// Zero if `Ã` is already Hurwitz, otherwise Bass's stabilizing gain.
fn initial_gain(at: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = at.nrows();
    let m = b.ncols();
    if max_real_eigenvalue(at) < 0.0 {
        return Ok(DMatrix::zeros(m, d));
    }
    let beta = at
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re.abs())
        .fold(0.0, f64::max)
        + 1.0;
    // (Ã + βI) Z + Z (Ã + βI)ᵀ = 2 B Bᵀ, written as MᵀZ + ZM + C = 0 with M = -(Ã + βI)ᵀ
    let shifted = at + DMatrix::identity(d, d) * beta;
    let z = solve_lyapunov(&(-shifted.transpose()), &(b * b.transpose() * 2.0))?;
    let zinv = z
        .cholesky()
        .ok_or_else(|| Error::Oracle("pair (A - λ/2 I, B) is not stabilizable".into()))?
        .inverse();
    let k = b.transpose() * zinv;
    if max_real_eigenvalue(&(at - b * &k)) >= 0.0 {
        return Err(Error::Oracle("could not find a stabilizing initial gain".into()));
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::seeded_rng;
    use crate::problems::random_lqr_matrices;
    use rand::Rng;

    fn scalar(a: f64, b: f64, q: f64, r: f64) -> Lqr {
        let one = |v| DMatrix::from_element(1, 1, v);
        Lqr {
            a: one(a),
            b: one(b),
            q: one(q),
            r: one(r),
        }
    }

    #[test]
    fn scalar_closed_form() {
        let s = DMatrix::from_element(1, 1, 0.01);
        let sol = solve_riccati_discounted(&scalar(0.0, 1.0, 1.0, 1.0), 2.0, &s).unwrap();
        let p = 2f64.sqrt() - 1.0;
        assert!((sol.p[(0, 0)] - p).abs() < 1e-12);
        assert!((sol.c + 0.01 * p / 2.0).abs() < 1e-14);
        assert!((sol.c + 0.0020711).abs() < 1e-7);
        // -2P - P² + 1 = 0
        assert!((-2.0 * p - p * p + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_cost_gives_zero_solution() {
        let s = DMatrix::from_element(1, 1, 0.01);
        let sol = solve_riccati_discounted(&scalar(-1.0, 1.0, 0.0, 1.0), 1.0, &s).unwrap();
        assert_eq!(sol.p[(0, 0)], 0.0);
        assert_eq!(sol.c, 0.0);
        assert_eq!(sol.control(&[2.0]), vec![0.0]);
    }

    #[test]
    fn unstable_but_stabilizable_system() {
        let s = DMatrix::from_element(1, 1, 0.04);
        let lqr = scalar(3.0, 1.0, 1.0, 1.0);
        let sol = solve_riccati_discounted(&lqr, 1.0, &s).unwrap();
        // scalar ARE: 2(a - λ/2)P - P²/r + q = 0
        let at = 3.0 - 0.5;
        let p = at + (at * at + 1.0f64).sqrt();
        assert!((sol.p[(0, 0)] - p).abs() < 1e-10);
        assert!(matches!(
            solve_riccati_discounted(&scalar(3.0, 0.0, 1.0, 1.0), 1.0, &s),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn random_5d_hjb_residual_is_tiny() {
        let lqr = random_lqr_matrices(5, 5, 3);
        let s = DMatrix::identity(5, 5) * 0.01;
        let sol = solve_riccati_discounted(&lqr, 1.0, &s).unwrap();
        assert!((&sol.p - sol.p.transpose()).amax() < 1e-12);
        assert!(sol.p.clone().symmetric_eigen().eigenvalues.min() >= 0.0);
        let mut rng = seeded_rng(0, 0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(sol.hjb_residual(&lqr, &s, 1.0, &x).abs() < 1e-8);
        }
        let h = &sol.residual_history;
        for w in h.windows(2).skip(1) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn lyapunov_solution_satisfies_equation() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -3.0]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let x = solve_lyapunov(&m, &c).unwrap();
        assert!((m.transpose() * &x + &x * &m + c).norm() < 1e-12);
    }
}
