use cremem::reml::{fit, FitOptions};
use cremem_testkit::{dense_deviance, random_problem};

#[test]
fn profiled_deviance_matches_dense_covariance_oracle() {
    for index in 0..30 {
        let rp = random_problem(index, 1000 + index as u64);
        assert!(rp.data.n_obs() <= 200);
        let (d, _, s2) = rp.problem.profiled_deviance(&rp.theta).unwrap();
        let (od, os2) = dense_deviance(&rp.problem, &rp.theta);
        assert!((d - od).abs() <= 1e-6 * od.abs(), "{} #{index}: {d} vs {od}", rp.family);
        assert!((s2 - os2).abs() <= 1e-6 * os2);
    }
}

#[test]
fn fitted_deviance_matches_oracle_at_the_optimum() {
    for index in 0..12 {
        let rp = random_problem(index, 77 + index as u64);
        let f = fit(&rp.problem, &FitOptions::default());
        let (od, os2) = dense_deviance(&rp.problem, &f.theta_hat);
        assert!((f.deviance - od).abs() <= 1e-6 * od.abs(), "{}: {} vs {od}", rp.family, f.deviance);
        assert!((f.sigma2_hat - os2).abs() <= 1e-6 * os2);
        let (start, _) = dense_deviance(&rp.problem, &rp.problem.structure.theta0());
        assert!(f.deviance <= start + 1e-9);
    }
}
