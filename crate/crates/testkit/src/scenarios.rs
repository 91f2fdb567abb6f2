//! Seeded fitting scenarios whose outcomes the tests compare against
//! closed forms or against each other.

use cremem::contrasts::ContrastKind;
use cremem::covariance::{realize, realize_coded, CovFamily, FamilyTag};
use cremem::data::Dataset;
use cremem::formula::{parse_formula, Factor, FactorKind, FactorTable, ModelSpec};
use cremem::inference::{anova, map_ganova_to_ril, quasi_f, type3_test};
use cremem::reml::{fit, FitOptions, FitProblem, FitResult};
use cremem::simulation::{generate_replicate, GenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::gen::{one_factor, OneFactor};
use crate::oracle::ranova;

fn table(levels: usize) -> FactorTable {
    FactorTable::new("PT", "SM").with_factor(Factor::new("Am", FactorKind::M, levels).expect("valid factor"))
}

fn fitted(formula: &str, levels: usize, data: &Dataset, tag: FamilyTag) -> (FitProblem, FitResult) {
    let spec = parse_formula(formula, &table(levels)).expect("valid formula");
    let pr = FitProblem::from_family(&spec, data, CovFamily::new(tag, false)).expect("valid problem");
    let f = fit(&pr, &FitOptions::default());
    (pr, f)
}

/// Minimized deviances `(gANOVA, RI-L)` on participant × stimulus × `Am`
/// data. `crafted` data have no participant intercept variance, which puts
/// the gANOVA truth outside what RI-L can express.
pub fn dominance_case(seed: u64, crafted: bool) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = if crafted { 3 } else { rng.gen_range(2..=4) };
    let cfg = OneFactor {
        np: if crafted { 24 } else { rng.gen_range(8..=16) },
        levels,
        reps: 1,
        ns: if crafted { 6 } else { rng.gen_range(3..=6) },
        sd_i: if crafted { 0.0 } else { rng.gen_range(0.0..1.5) },
        sd_f: if crafted { 1.5 } else { rng.gen_range(0.0..1.5) },
        sd_s: 0.7,
        sd_e: 1.0,
        effect: 0.3,
    };
    let data = one_factor(&cfg, seed);
    let (_, g) = fitted("y ~ Am + (1|PT|Am) + (1|SM)", levels, &data, FamilyTag::Ganova);
    let (_, r) = fitted("y ~ Am + (1|PT) + (1|PT:Am) + (1|SM)", levels, &data, FamilyTag::RiL);
    (g.deviance, r.deviance)
}

/// Largest relative gap between fitted RI-L variances and the image of the
/// fitted gANOVA variances under the variance map, on feasible-region data.
pub fn variance_map_case(seed: u64, np: usize) -> f64 {
    let levels = 3;
    let cfg = OneFactor { np, levels, reps: 3, ns: 0, sd_i: 1.0, sd_f: 0.7, sd_s: 0.0, sd_e: 1.0, effect: 0.3 };
    let data = one_factor(&cfg, seed);
    let (gp, g) = fitted("y ~ Am + (1|PT|Am)", levels, &data, FamilyTag::Ganova);
    let (rp, r) = fitted("y ~ Am + (1|PT) + (1|PT:Am)", levels, &data, FamilyTag::RiL);
    assert_eq!(gp.structure.theta_names(), ["PT", "PT:Am"]);
    assert_eq!(rp.structure.theta_names(), ["PT", "PT:Am"]);
    let var = |f: &FitResult, k: usize| f.sigma2_hat * f.theta_hat[k].powi(2);
    let map = map_ganova_to_ril(var(&g, 0), var(&g, 1), g.sigma2_hat, levels);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    rel(map.sigma2_intercept_uc, var(&r, 0))
        .max(rel(map.sigma2_f_uc, var(&r, 1)))
        .max(rel(map.sigma2_eps_uc, r.sigma2_hat))
}

/// Participant × stimulus × 3-level `Am` data whose participant-by-`Am`
/// variance sits on the first level only, so contrast-wise variances
/// depend on the basis.
pub fn anisotropic_data(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let (np, ns, levels) = (16, 6, 3);
    let se: Vec<f64> = (0..ns).map(|_| 0.5 * normal()).collect();
    let (mut pt, mut sm, mut am, mut y) = (vec![], vec![], vec![], vec![]);
    for p in 0..np {
        let u = normal();
        let first = 2.0 * normal();
        for (s, e) in se.iter().enumerate() {
            for a in 0..levels {
                pt.push(p);
                sm.push(s);
                am.push(a);
                y.push(0.2 * a as f64 + u + if a == 0 { first } else { 0.0 } + e + normal());
            }
        }
    }
    let mut d = Dataset::new();
    d.add_real("y", y).expect("fresh column");
    d.add_indexed("PT", np, pt).expect("fresh column");
    d.add_indexed("SM", ns, sm).expect("fresh column");
    d.add_indexed("Am", levels, am).expect("fresh column");
    d
}

/// Coding comparison on [`anisotropic_data`]:
/// `(max |Δ| of gANOVA deviance at fixed θ between polynomial and Helmert
/// bases, |Δ| of fitted gANOVA deviances, |Δ| of fitted ZCP deviances
/// between sum and polynomial coding)`.
pub fn contrast_case(seed: u64) -> (f64, f64, f64) {
    let data = anisotropic_data(seed);
    let t = table(3);
    let g_spec = parse_formula("y ~ Am + (1|PT|Am) + (1|SM)", &t).expect("valid formula");
    let g = CovFamily::new(FamilyTag::Ganova, false);
    let poly = FitProblem::new(&g_spec, &data, realize(&g_spec, g).expect("realizable")).expect("problem");
    let helm = FitProblem::new(
        &g_spec,
        &data,
        realize_coded(&g_spec, g, ContrastKind::OrthonormalHelmert).expect("realizable"),
    )
    .expect("problem");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut fixed_gap: f64 = 0.0;
    for _ in 0..5 {
        let th: Vec<f64> = (0..poly.n_theta()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let a = poly.evaluate(&th).expect("evaluates").deviance;
        let b = helm.evaluate(&th).expect("evaluates").deviance;
        fixed_gap = fixed_gap.max((a - b).abs());
    }
    let fitted_gap = (fit(&poly, &FitOptions::default()).deviance - fit(&helm, &FitOptions::default()).deviance).abs();

    let z_spec = parse_formula("y ~ Am + (1 + Am||PT) + (1|SM)", &t).expect("valid formula");
    let zcp = |tag| {
        let pr = FitProblem::from_family(&z_spec, &data, CovFamily::new(tag, false)).expect("problem");
        fit(&pr, &FitOptions::default()).deviance
    };
    (fixed_gap, fitted_gap, (zcp(FamilyTag::ZcpSum) - zcp(FamilyTag::ZcpPoly)).abs())
}

/// Per effect `(effect, Satterthwaite p on the gANOVA+ fit, quasi-F p)` for
/// one balanced M1 replicate.
pub fn quasi_case(seed: u64, replicate: u64) -> Vec<(String, f64, f64)> {
    let cfg = GenConfig { seed, ..GenConfig::default() };
    let data = generate_replicate(&cfg, replicate).expect("valid config").data;
    let family = CovFamily::new(FamilyTag::Ganova, true);
    let spec = ModelSpec::saturated("y", &cfg.design.factors(), family).expect("saturated spec");
    let pr = FitProblem::from_family(&spec, &data, family).expect("problem");
    let f = fit(&pr, &FitOptions::default());
    let tests = anova(&pr, &f).expect("tests");
    tests
        .into_iter()
        .map(|t| {
            let q = quasi_f(&data, &spec, &t.effect).expect("quasi-F");
            (t.effect, t.p_value, q.p_value)
        })
        .collect()
}

/// `((F, p, df) of the gANOVA type-III test, (F, p, df) of the classical
/// repeated-measures ANOVA)` for `levels` levels and `reps` replications.
pub fn ranova_case(levels: usize, reps: usize, seed: u64) -> ((f64, f64, f64), (f64, f64, f64)) {
    let np = 12;
    let cfg = OneFactor { np, levels, reps, ns: 0, ..OneFactor::default() };
    let data = one_factor(&cfg, seed);
    let (pr, f) = fitted("y ~ Am + (1|PT|Am)", levels, &data, FamilyTag::Ganova);
    let t = type3_test(&pr, &f, "Am").expect("test");
    let (rf, rdf, rp) = ranova(&data, np, levels);
    ((t.f, t.p_value, t.df_den), (rf, rp, rdf))
}

/// Random-effect truth for [`cspca_case`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CsPcaTruth {
    /// Only participant and stimulus intercepts vary.
    InterceptsOnly,
    /// Participant and stimulus intercepts and `Am` slopes with strong
    /// correlation `rho`.
    CorrelatedSlopes { rho: f64 },
}

/// Participant × stimulus × 2-level `Am` data, one observation per cell.
pub fn cspca_data(seed: u64, truth: CsPcaTruth) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let (np, ns) = (16, 12);
    let mut draw = |sd: f64| -> (f64, f64) {
        let (a, b) = (normal(), normal());
        match truth {
            CsPcaTruth::InterceptsOnly => (sd * a, 0.0),
            CsPcaTruth::CorrelatedSlopes { rho } => (sd * a, sd * (rho * a + (1.0 - rho * rho).sqrt() * b)),
        }
    };
    let pe: Vec<(f64, f64)> = (0..np).map(|_| draw(1.0)).collect();
    let se: Vec<(f64, f64)> = (0..ns).map(|_| draw(0.8)).collect();
    let (mut pt, mut sm, mut am, mut y) = (vec![], vec![], vec![], vec![]);
    for (p, (pu, pv)) in pe.iter().enumerate() {
        for (s, (su, sv)) in se.iter().enumerate() {
            for a in 0..2 {
                let sign = if a == 0 { -1.0 } else { 1.0 };
                pt.push(p);
                sm.push(s);
                am.push(a);
                y.push(0.2 * sign + pu + su + sign * (pv + sv) + 0.7 * normal());
            }
        }
    }
    let mut d = Dataset::new();
    d.add_real("y", y).expect("fresh column");
    d.add_indexed("PT", np, pt).expect("fresh column");
    d.add_indexed("SM", ns, sm).expect("fresh column");
    d.add_indexed("Am", 2, am).expect("fresh column");
    d
}

/// Outcome of one CS-PCA selection on [`cspca_data`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsPcaOutcome {
    pub intercepts_only: bool,
    pub initial_correlated: bool,
    pub correlated: bool,
}

pub fn cspca_case(seed: u64, truth: CsPcaTruth) -> Result<CsPcaOutcome, cremem::inference::InferenceError> {
    let data = cspca_data(seed, truth);
    let spec = parse_formula("y ~ Am + (1 + Am|PT) + (1 + Am|SM)", &table(2)).expect("valid formula");
    let sel = cremem::inference::cs_pca_select(
        &data,
        &spec,
        cremem::inference::SelectionProcedure::default(),
        &FitOptions::default(),
    )?;
    Ok(CsPcaOutcome {
        intercepts_only: sel.spec.random_terms.iter().all(|t| t.is_intercept()),
        initial_correlated: sel.initial_correlated,
        correlated: sel.correlated,
    })
}

/// Whether the RI-L participant intercept lands on the boundary for data
/// whose gANOVA intercept variance is zero, i.e. outside what RI-L can
/// express.
pub fn infeasible_boundary_case(seed: u64, np: usize) -> bool {
    let levels = 3;
    let cfg = OneFactor { np, levels, reps: 3, ns: 0, sd_i: 0.0, sd_f: 1.5, sd_s: 0.0, sd_e: 1.0, effect: 0.3 };
    let data = one_factor(&cfg, seed);
    let (pr, f) = fitted("y ~ Am + (1|PT) + (1|PT:Am)", levels, &data, FamilyTag::RiL);
    assert_eq!(pr.structure.theta_names()[0], "PT");
    f.boundary_flags[0]
}
