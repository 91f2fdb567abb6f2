use cremem_testkit::scenarios::{
    contrast_case, cspca_case, cspca_data, dominance_case, infeasible_boundary_case, quasi_case, ranova_case,
    variance_map_case, CsPcaTruth,
};

#[test]
fn ganova_deviance_never_worse_than_ril() {
    for seed in 0..10 {
        let (g, r) = dominance_case(seed, false);
        assert!(g <= r + 1e-6, "seed {seed}: {g} > {r}");
    }
}

#[test]
fn ganova_strictly_better_in_the_infeasible_region() {
    for seed in 0..4 {
        let (g, r) = dominance_case(500 + seed, true);
        assert!(r - g > 1e-3, "seed {seed}: gap {}", r - g);
    }
}

#[test]
fn variance_map_links_feasible_fits() {
    let mut errs: Vec<f64> = (0..8).map(|s| variance_map_case(s, 30)).collect();
    errs.sort_by(f64::total_cmp);
    assert!(errs[errs.len() / 2] < 0.05, "{errs:?}");
}

#[test]
fn ganova_is_basis_free_and_zcp_is_not() {
    let (fixed, fitted, zcp) = contrast_case(3);
    assert!(fixed < 1e-8, "{fixed}");
    assert!(fitted < 1e-8, "{fitted}");
    assert!(zcp > 1e-4, "{zcp}");
}

#[test]
fn mixed_model_p_values_track_quasi_f() {
    let mut gaps: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for r in 0..10 {
        for (effect, p, q) in quasi_case(11, r) {
            gaps.entry(effect).or_default().push((p - q).abs());
        }
    }
    assert_eq!(gaps.len(), 7);
    for (effect, mut g) in gaps {
        g.sort_by(f64::total_cmp);
        assert!(g[g.len() / 2] < 0.02, "{effect}: {g:?}");
    }
}

#[test]
fn single_unit_ganova_reduces_to_repeated_measures_anova() {
    for (levels, reps) in [(2, 2), (3, 3), (4, 2)] {
        let ((f, p, df), (rf, rp, rdf)) = ranova_case(levels, reps, levels as u64);
        assert!((f - rf).abs() < 1e-6, "F {f} vs {rf}");
        assert!((p - rp).abs() < 1e-6, "p {p} vs {rp}");
        assert!((df - rdf).abs() < 0.5, "df {df} vs {rdf}");
    }
}

#[test]
fn ril_intercept_hits_the_boundary_when_the_map_is_infeasible() {
    let hits = (0..50).filter(|&s| infeasible_boundary_case(s, 30)).count();
    assert!(hits >= 35, "{hits}/50");
}

#[test]
fn cs_pca_keeps_only_intercepts_for_intercept_data() {
    let n = 50;
    let ok = (0..n)
        .filter(|&s| cspca_case(s, CsPcaTruth::InterceptsOnly).map(|o| o.intercepts_only).unwrap_or(false))
        .count();
    assert!(ok * 10 >= n as usize * 8, "{ok}/{n}");
}

#[test]
fn cs_pca_prefers_correlations_for_correlated_slopes() {
    let n = 20;
    let ok = (0..n)
        .filter(|&s| {
            cspca_case(100 + s, CsPcaTruth::CorrelatedSlopes { rho: 0.9 })
                .map(|o| o.initial_correlated)
                .unwrap_or(false)
        })
        .count();
    assert!(ok * 2 > n as usize, "{ok}/{n}");
}

#[test]
fn cs_pca_reports_a_failed_maximal_fit() {
    use cremem::formula::{parse_formula, Factor, FactorKind, FactorTable};
    use cremem::inference::{cs_pca_select, InferenceError, SelectionProcedure};
    use cremem::reml::FitOptions;
    let data = cspca_data(1, CsPcaTruth::CorrelatedSlopes { rho: 0.9 });
    let t = FactorTable::new("PT", "SM").with_factor(Factor::new("Am", FactorKind::M, 2).unwrap());
    let spec = parse_formula("y ~ Am + (1 + Am|PT) + (1 + Am|SM)", &t).unwrap();
    let starved = FitOptions { max_evals: 3, ..FitOptions::default() };
    let err = cs_pca_select(&data, &spec, SelectionProcedure::default(), &starved).unwrap_err();
    assert!(matches!(err, InferenceError::MaxFitFailed));
}
