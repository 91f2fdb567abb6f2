//! Brute-force reference computations.

use cremem::data::Dataset;
use cremem::inference::f_upper_tail;
use cremem::reml::FitProblem;
use nalgebra::{DMatrix, DVector};

/// Profiled REML deviance from the explicit marginal covariance
/// `V = I + Σ_u [same group] z_iᵀ S_u z_j`, where `S_u` is the relative
/// covariance of one group of unit `u`. Nothing of the sparse factorization
/// is reused; returns `(deviance, σ̂²)`.
pub fn dense_deviance(problem: &FitProblem, theta: &[f64]) -> (f64, f64) {
    let design = &problem.design;
    let n = design.n_obs();
    let mut v = DMatrix::<f64>::identity(n, n);
    for ud in &design.units {
        let ui = problem
            .structure
            .units
            .iter()
            .position(|u| u.unit == ud.unit)
            .expect("every design unit is in the structure");
        let s = problem.structure.relative_cov(ui, theta);
        let zs = &ud.values * &s;
        for i in 0..n {
            for j in 0..n {
                if ud.group[i] == ud.group[j] {
                    v[(i, j)] += zs.row(i).dot(&ud.values.row(j));
                }
            }
        }
    }
    restricted_deviance(&v, &design.x, &design.y)
}

/// `log|V| + log|XᵀV⁻¹X| + (n−p)(1 + log(2π·r/(n−p)))` with
/// `r = (y−Xβ̂)ᵀV⁻¹(y−Xβ̂)` and `β̂` the GLS estimate.
pub fn restricted_deviance(v: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> (f64, f64) {
    let vc = v.clone().cholesky().expect("V is positive definite");
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let vix = vc.solve(x);
    let viy = vc.solve(y);
    let xvx = x.transpose() * &vix;
    let xc = xvx.cholesky().expect("X has full column rank");
    let beta = xc.solve(&(x.transpose() * &viy));
    let r = y - x * &beta;
    let rss = r.dot(&vc.solve(&r));
    let nmp = (x.nrows() - x.ncols()) as f64;
    let s2 = rss / nmp;
    let d = logdet(&vc.l()) + logdet(&xc.l()) + nmp * (1.0 + (2.0 * std::f64::consts::PI * s2).ln());
    (d, s2)
}

/// Normalized Helmert basis: `k × (k−1)`, orthonormal columns summing to zero.
pub fn helmert(k: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(k, k - 1);
    for j in 1..k {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            c[(i, j - 1)] = 1.0 / norm;
        }
        c[(j, j - 1)] = -(j as f64) / norm;
    }
    c
}

/// Classical repeated-measures ANOVA of `Am` within `PT` on cell means:
/// `F = MS_A / MS_{P×A}`. Returns `(F, df_error, p)`.
pub fn ranova(d: &Dataset, np: usize, levels: usize) -> (f64, f64, f64) {
    let y = d.real("y").expect("response");
    let pt = &d.categorical("PT").expect("participants").codes;
    let am = &d.categorical("Am").expect("factor").codes;
    let mut sum = DMatrix::<f64>::zeros(np, levels);
    let mut cnt = DMatrix::<f64>::zeros(np, levels);
    for i in 0..y.len() {
        sum[(pt[i], am[i])] += y[i];
        cnt[(pt[i], am[i])] += 1.0;
    }
    let cell = sum.component_div(&cnt);
    let r = cnt[(0, 0)];
    let grand = cell.mean();
    let pm: Vec<f64> = (0..np).map(|p| cell.row(p).mean()).collect();
    let am_m: Vec<f64> = (0..levels).map(|a| cell.column(a).mean()).collect();
    let ss_a = am_m.iter().map(|m| (m - grand).powi(2)).sum::<f64>() * np as f64 * r;
    let mut ss_pa = 0.0;
    for p in 0..np {
        for a in 0..levels {
            ss_pa += (cell[(p, a)] - pm[p] - am_m[a] + grand).powi(2);
        }
    }
    ss_pa *= r;
    let df_a = (levels - 1) as f64;
    let df_pa = ((levels - 1) * (np - 1)) as f64;
    let f = (ss_a / df_a) / (ss_pa / df_pa);
    (f, df_pa, f_upper_tail(f, df_a, df_pa))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helmert_is_orthonormal_and_zero_sum() {
        for k in 2..6 {
            let c = helmert(k);
            let g = c.transpose() * &c;
            assert!((g - DMatrix::identity(k - 1, k - 1)).abs().max() < 1e-14);
            assert!(c.row_sum().abs().max() < 1e-14);
        }
    }

    #[test]
    fn restricted_deviance_of_iid_normal() {
        // With V = I and X = 1 the deviance depends only on the sample variance.
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0, 7.0]);
        let x = DMatrix::from_element(4, 1, 1.0);
        let (d, s2) = restricted_deviance(&DMatrix::identity(4, 4), &x, &y);
        let mean = 3.5;
        let want_s2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((s2 - want_s2).abs() < 1e-12);
        let want = 4f64.ln() + 3.0 * (1.0 + (2.0 * std::f64::consts::PI * want_s2).ln());
        assert!((d - want).abs() < 1e-12);
    }
}
