//! Reference solvers used to check the learned value functions: the
//! discounted Riccati solution of unconstrained LQR and exact policy
//! iteration on a finite-difference grid.

pub mod grid;
pub mod linsolve;
pub mod riccati;

pub use grid::{grid_howard_pi, grid_solve_policy, GridConfig, GridSolution, GridSpec};
pub use riccati::{solve_riccati_discounted, RiccatiSolution};

use crate::domain::{seeded_rng, BoxSet};
use crate::error::{Error, Result};

/// Monte-Carlo L² distance with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// `sqrt(vol · mean (f - g)²)` over `m` uniform points of `domain`.
pub fn l2_distance(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
    domain: &BoxSet,
    m: usize,
    seed: u64,
) -> Result<L2Estimate> {
    if m < 1000 {
        return Err(Error::Config("l2_distance needs at least 1000 points".into()));
    }
    let d = domain.dim();
    let pts = domain.sample_uniform(m, &mut seeded_rng(seed, 0x12));
    let sq: Vec<f64> = pts
        .chunks_exact(d)
        .map(|x| (f(x) - g(x)).powi(2))
        .collect();
    Ok(l2_from_squares(&sq, domain.volume()))
}

/// L² estimate from squared pointwise differences at uniform samples of a
/// region of volume `vol`. The standard error follows from the delta method.
pub fn l2_from_squares(sq: &[f64], vol: f64) -> L2Estimate {
    let n = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = if sq.len() > 1 {
        sq.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let value = (vol * mean).sqrt();
    let se_mean = (var / n).sqrt();
    let stderr = if value > 0.0 {
        vol * se_mean / (2.0 * value)
    } else {
        (vol * se_mean).sqrt()
    };
    L2Estimate { value, stderr }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let unit = BoxSet::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let one = |_: &[f64]| 1.0;
        let zero = |_: &[f64]| 0.0;
        assert_eq!(l2_distance(&one, &one, &unit, 1000, 0).unwrap().value, 0.0);
        let e = l2_distance(&one, &zero, &unit, 1000, 0).unwrap();
        assert!((e.value - 1.0).abs() < 1e-15);
        assert_eq!(e.stderr, 0.0);

        let line = BoxSet::new(vec![0.0], vec![1.0]).unwrap();
        let id = |x: &[f64]| x[0];
        let e = l2_distance(&id, &zero, &line, 20_000, 3).unwrap();
        assert!((e.value - 1.0 / 3f64.sqrt()).abs() < 4.0 * e.stderr);
        assert!(l2_distance(&id, &zero, &line, 10, 3).is_err());
    }

    #[test]
    fn metric_properties_on_a_fixed_sample() {
        let b = BoxSet::symmetric(2, 1.0);
        let f = |x: &[f64]| x[0].sin() + x[1];
        let g = |x: &[f64]| x[0] * x[1];
        let h = |x: &[f64]| (x[0] - x[1]).cos();
        let fg = l2_distance(&f, &g, &b, 4000, 5).unwrap().value;
        let gf = l2_distance(&g, &f, &b, 4000, 5).unwrap().value;
        let gh = l2_distance(&g, &h, &b, 4000, 5).unwrap().value;
        let fh = l2_distance(&f, &h, &b, 4000, 5).unwrap().value;
        assert_eq!(fg, gf);
        assert!(fh <= fg + gh + 1e-12);
    }
}
