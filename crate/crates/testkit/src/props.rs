//! Property checks used both by the proptest suites and by the acceptance
//! runner.

use cremem::covariance::{CovFamily, FamilyTag};
use cremem::formula::{
    estimable, parse_formula, saturated_terms, BarKind, Design, FactorKind, FactorTable, ModelSpec, UnitKind,
};
use cremem::inference::anova;
use cremem::reml::{fit, FitOptions, FitProblem};
use cremem::simulation::{generate_replicate, run_study, GenConfig, StudyOptions};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use crate::gen::{random_problem, shuffled};

pub type PropResult = Result<(), TestCaseError>;

const BARS: [BarKind; 4] = [BarKind::Single, BarKind::Constrained, BarKind::Correlated, BarKind::Independent];

/// A spec over one of the five designs: per unit, either no terms or one
/// bar style with a subset of the saturated terms. Grouped bars always
/// carry the unit intercept, as they do when written out.
pub fn build_spec(design: Design, choices: &[(u8, u64)]) -> Option<ModelSpec> {
    let factors = design.factors();
    let saturated = saturated_terms(&factors, true);
    let mut terms = Vec::new();
    for (unit, &(choice, mask)) in UnitKind::ALL.iter().zip(choices) {
        if choice == 0 {
            continue;
        }
        let bar = BARS[(choice as usize - 1) % BARS.len()];
        let unit_terms: Vec<_> = saturated.iter().filter(|t| t.unit.tag == *unit).collect();
        for (k, t) in unit_terms.iter().enumerate() {
            let keep = mask & (1 << (k % 64)) != 0 || (bar != BarKind::Single && t.is_intercept());
            if keep {
                let mut t = (*t).clone();
                t.bar = bar;
                terms.push(t);
            }
        }
    }
    if terms.is_empty() {
        return None;
    }
    ModelSpec::new("y", factors.clone(), ModelSpec::full_factorial(factors.len()), terms).ok()
}

pub fn spec_strategy() -> impl Strategy<Value = (Design, ModelSpec)> {
    (0..Design::ALL.len(), prop::collection::vec((0u8..5, any::<u64>()), 3)).prop_filter_map(
        "spec violates a model invariant",
        |(d, choices)| {
            let design = Design::ALL[d];
            build_spec(design, &choices).map(|s| (design, s))
        },
    )
}

/// `parse(render(spec)) == spec`.
pub fn check_round_trip(design: Design, spec: &ModelSpec) -> PropResult {
    let table = FactorTable::from_factors(&design.factors());
    let text = spec.render();
    let back = parse_formula(&text, &table).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
    prop_assert_eq!(&back, spec, "round trip of {}", text);
    Ok(())
}

/// The expected estimability pattern: rows are units, columns the
/// intercept followed by the five factor kinds.
pub const ESTIMABLE: [(UnitKind, [bool; 6]); 3] = [
    (UnitKind::Participant, [true, false, true, true, true, true]),
    (UnitKind::Stimulus, [true, true, false, true, true, true]),
    (UnitKind::ParticipantStimulus, [true, false, false, true, false, true]),
];

/// Checks all 18 cells through both [`estimable`] and the parser; returns
/// the number of cells checked.
pub fn check_estimability_matrix() -> Result<usize, String> {
    let table = FactorTable::from_factors(&Design::M5.factors());
    let kinds = [FactorKind::P, FactorKind::S, FactorKind::M, FactorKind::PS, FactorKind::O];
    let names = ["Ap", "As", "Am1", "Aps", "Ao"];
    let mut cells = 0;
    for (unit, row) in ESTIMABLE {
        let id = match unit {
            UnitKind::Participant => "PT",
            UnitKind::Stimulus => "SM",
            UnitKind::ParticipantStimulus => "PT:SM",
        };
        for (col, &want) in row.iter().enumerate() {
            let term = if col == 0 { format!("(1|{id})") } else { format!("(1|{id}:{})", names[col - 1]) };
            if col > 0 && estimable(unit, kinds[col - 1]) != want {
                return Err(format!("estimable({unit:?}, {:?}) != {want}", kinds[col - 1]));
            }
            let formula = format!("y ~ Ap*As*Am1*Am2*Aps*Ao + {term}");
            let parsed = parse_formula(&formula, &table).is_ok();
            if parsed != want {
                return Err(format!("{formula}: parsed = {parsed}, expected {want}"));
            }
            cells += 1;
        }
    }
    Ok(cells)
}

/// Same seed, same data, same fit, same study report whatever the thread count.
pub fn check_determinism(seed: u64) -> PropResult {
    let cfg = GenConfig { seed, ..GenConfig::default() };
    let a = generate_replicate(&cfg, 2).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let b = generate_replicate(&cfg, 2).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(&a.data, &b.data);

    let family = CovFamily::new(FamilyTag::Ganova, true);
    let spec = ModelSpec::saturated("y", &cfg.design.factors(), family).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let pr = FitProblem::from_family(&spec, &a.data, family).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let f1 = fit(&pr, &FitOptions::default());
    let f2 = fit(&pr, &FitOptions::default());
    prop_assert_eq!(f1.deviance.to_bits(), f2.deviance.to_bits());
    prop_assert_eq!(&f1.theta_hat, &f2.theta_hat);

    let study = |threads| {
        let opts = StudyOptions { n_replicates: 3, threads, ..Default::default() };
        run_study(std::slice::from_ref(&cfg), &[CovFamily::new(FamilyTag::Ri, true)], &opts)
            .map(|r| format!("{:?}", r.rows))
            .map_err(|e| TestCaseError::fail(e.to_string()))
    };
    prop_assert_eq!(study(1)?, study(2)?);
    Ok(())
}

/// Reordering rows changes no reported quantity: the deviance at a fixed
/// θ, the fit and the type-III tests agree to 1e-9.
pub fn check_permutation_invariance(index: usize, seed: u64, perm_seed: u64) -> PropResult {
    let rp = random_problem(index, seed);
    let data = shuffled(&rp.data, perm_seed);
    let pr = FitProblem::from_family(&rp.spec, &data, rp.family).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let d0 = rp.problem.evaluate(&rp.theta).map_err(|e| TestCaseError::fail(e.to_string()))?.deviance;
    let d1 = pr.evaluate(&rp.theta).map_err(|e| TestCaseError::fail(e.to_string()))?.deviance;
    prop_assert!((d0 - d1).abs() <= 1e-9 * (1.0 + d0.abs()), "{} vs {}", d0, d1);

    let f0 = fit(&rp.problem, &FitOptions::default());
    let f1 = fit(&pr, &FitOptions::default());
    prop_assert!((f0.deviance - f1.deviance).abs() <= 1e-9 * (1.0 + f0.deviance.abs()));
    for (a, b) in f0.theta_hat.iter().zip(&f1.theta_hat) {
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "theta {} vs {}", a, b);
    }
    for (a, b) in f0.beta_hat.iter().zip(f1.beta_hat.iter()) {
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "beta {} vs {}", a, b);
    }

    if f0.converged {
        let a0 = anova(&rp.problem, &f0).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let a1 = anova(&pr, &f1).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for (x, y) in a0.iter().zip(&a1) {
            prop_assert_eq!(&x.effect, &y.effect);
            prop_assert!((x.f - y.f).abs() <= 1e-9 * (1.0 + x.f.abs()), "{}: F {} vs {}", x.effect, x.f, y.f);
            prop_assert!((x.df_den - y.df_den).abs() <= 1e-9 * (1.0 + x.df_den), "{}: df", x.effect);
            prop_assert!((x.p_value - y.p_value).abs() <= 1e-9, "{}: p", x.effect);
        }
    }
    Ok(())
}

/// Runs a property under a fixed-seed runner, as used outside `proptest!`.
pub fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> PropResult,
) -> Result<(), String> {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, proptest::test_runner::TestRng::deterministic_rng(
        proptest::test_runner::RngAlgorithm::ChaCha,
    ));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// The four headless property suites; one `(name, outcome)` per suite.
pub fn property_suites(scale: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        (
            "formula round-trip",
            run_property(64 * scale, spec_strategy(), |(d, s)| check_round_trip(d, &s)),
        ),
        ("estimability matrix", check_estimability_matrix().and_then(|n| {
            if n == 18 { Ok(()) } else { Err(format!("{n} cells checked")) }
        })),
        ("determinism", run_property(2 * scale, any::<u64>(), check_determinism)),
        (
            "permutation invariance",
            run_property(6 * scale, (0usize..12, any::<u64>(), any::<u64>()), |(i, s, p)| {
                check_permutation_invariance(i, s, p)
            }),
        ),
    ]
}
