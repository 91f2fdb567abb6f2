//! Acceptance run: one PASS/FAIL line per criterion. With
//! `CREMEM_ACCEPT_STRICT=1` the exit status is 1 if any criterion fails.
//!
//! `CREMEM_ACCEPT_CONVERGENCE_REPLICATES` sets the replicate count of the
//! convergence criterion (default 60; 200 for the full run).

use std::collections::BTreeMap;
use std::process::{Command, ExitCode};
use std::time::Instant;

use cremem::covariance::{CovFamily, FamilyTag};
use cremem::simulation::{agresti_coull_ci, convergence_study, run_study, GenConfig, SimReport, StudyOptions};
use cremem::formula::Design;
use cremem_testkit::props::property_suites;
use cremem_testkit::scenarios::{contrast_case, dominance_case, quasi_case, ranova_case, variance_map_case};
use cremem_testkit::{dense_deviance, random_problem};

const TABLE: [[u64; 5]; 10] = [
    [2, 2, 2, 2, 2],
    [8, 8, 16, 16, 64],
    [20, 90, 342, 342, 5256],
    [8, 18, 36, 36, 144],
    [8, 8, 16, 16, 64],
    [3, 3, 3, 3, 3],
    [9, 9, 19, 17, 71],
    [21, 91, 352, 343, 5311],
    [9, 19, 40, 37, 154],
    [9, 9, 19, 17, 71],
];

type Outcome = (bool, String);

fn param_count_table() -> Outcome {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_cremem"))
        .args(["param-count", "--designs", "M1..M5", "--families", "all"])
        .output()
        .expect("binary runs");
    let secs = t.elapsed().as_secs_f64();
    if !out.status.success() {
        return (false, String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).expect("JSON");
    let counts: Vec<Vec<u64>> = serde_json::from_value(v["counts"].clone()).expect("counts");
    let want: Vec<Vec<u64>> = TABLE.iter().map(|r| r.to_vec()).collect();
    let matching = counts.iter().flatten().zip(want.iter().flatten()).filter(|(a, b)| a == b).count();
    let cells = counts.iter().map(Vec::len).sum::<usize>();
    (
        counts == want && secs < 1.0,
        format!("{matching}/50 cells equal ({cells} reported), {secs:.2} s"),
    )
}

fn dense_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut max_n = 0;
    for index in 0..30 {
        let rp = random_problem(index, 9000 + index as u64);
        max_n = max_n.max(rp.data.n_obs());
        let d = rp.problem.evaluate(&rp.theta).map(|e| e.deviance).unwrap_or(f64::NAN);
        let (od, _) = dense_deviance(&rp.problem, &rp.theta);
        let rel = (d - od).abs() / od.abs();
        worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
    }
    let secs = t.elapsed().as_secs_f64();
    (
        worst < 1e-6 && max_n <= 200 && secs < 60.0,
        format!("30 problems, 12 family variants, n_obs <= {max_n}, max relative gap {worst:.1e}, {secs:.1} s"),
    )
}

fn dominance() -> Outcome {
    let mut violations = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..80 {
        let (g, r) = dominance_case(seed, false);
        worst = worst.max(g - r);
        violations += usize::from(g > r + 1e-6);
    }
    let mut strict = 0;
    let mut smallest_gap = f64::INFINITY;
    for seed in 0..20 {
        let (g, r) = dominance_case(10_000 + seed, true);
        worst = worst.max(g - r);
        violations += usize::from(g > r + 1e-6);
        strict += usize::from(r - g > 1e-3);
        smallest_gap = smallest_gap.min(r - g);
    }
    (
        violations == 0 && strict == 20,
        format!(
            "100 datasets: {violations} with gANOVA worse (max dev_g - dev_rl {worst:.2e}); \
             crafted infeasible subset strict on {strict}/20 (smallest gap {smallest_gap:.3})"
        ),
    )
}

fn variance_map() -> Outcome {
    let mut errs: Vec<f64> = (0..50).map(|s| variance_map_case(20_000 + s, 30)).collect();
    errs.sort_by(f64::total_cmp);
    let median = (errs[24] + errs[25]) / 2.0;
    (median < 0.05, format!("n_P = 30, 50 seeds: median max relative gap {median:.2e}, worst {:.2e}", errs[49]))
}

fn contrasts() -> Outcome {
    let (fixed, fitted, zcp) = contrast_case(31);
    (
        fixed < 1e-8 && fitted < 1e-8 && zcp > 1e-4,
        format!(
            "gANOVA polynomial vs Helmert: |Δ| {fixed:.1e} at fixed θ, {fitted:.1e} fitted; \
             ZCP sum vs polynomial: |Δ| {zcp:.4}"
        ),
    )
}

fn nominal_interval(report: &SimReport, structure: &str, effect: &str, alpha: f64) -> Option<(f64, f64, f64)> {
    let row = report.row(structure, effect)?;
    let k = (alpha * row.n_used as f64).round() as usize;
    let (lo, hi) = agresti_coull_ci(k, row.n_used, 0.95);
    Some((row.rate, lo, hi))
}

fn null_calibration() -> Outcome {
    let t = Instant::now();
    let cfg = GenConfig { seed: 20_240_601, ..GenConfig::default() };
    let families = [CovFamily::new(FamilyTag::Ganova, true), CovFamily::new(FamilyTag::Ri, true)];
    let opts = StudyOptions { n_replicates: 500, ..Default::default() };
    let report = match run_study(&[cfg], &families, &opts) {
        Ok(r) => r,
        Err(e) => return (false, e.to_string()),
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for row in report.rows.iter().filter(|r| r.structure == "gANOVA+") {
        let Some((rate, lo, hi)) = nominal_interval(&report, "gANOVA+", &row.effect, 0.05) else { continue };
        let inside = rate >= lo && rate <= hi;
        ok &= inside;
        parts.push(format!("{} {:.3}{}", row.effect, rate, if inside { "" } else { "!" }));
    }
    let ri = report.row("RI+", "Ap:Am").map_or(f64::NAN, |r| r.rate);
    ok &= ri > 0.08;
    let (_, lo, hi) = nominal_interval(&report, "gANOVA+", "Am", 0.05).unwrap_or((0.0, 0.0, 0.0));
    (
        ok,
        format!(
            "gANOVA+ rates [{}] vs interval [{lo:.3}, {hi:.3}]; RI+ Ap:Am {ri:.3}; {:.0} s",
            parts.join(", "),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn no_intercepts() -> Outcome {
    let t = Instant::now();
    let cfg = GenConfig { seed: 20_240_602, random_intercepts: false, ..GenConfig::default() };
    let families = [CovFamily::new(FamilyTag::RiL, true), CovFamily::new(FamilyTag::Ganova, true)];
    let opts = StudyOptions { n_replicates: 300, ..Default::default() };
    let report = match run_study(&[cfg], &families, &opts) {
        Ok(r) => r,
        Err(e) => return (false, e.to_string()),
    };
    let ril = report.row("RI-L+", "Am").map_or(f64::NAN, |r| r.rate);
    let Some((g, lo, hi)) = nominal_interval(&report, "gANOVA+", "Am", 0.05) else {
        return (false, "no gANOVA+ row".into());
    };
    let ril_off = !(0.03..=0.07).contains(&ril);
    let g_in = g >= lo && g <= hi;
    (
        ril_off && g_in,
        format!(
            "Am: RI-L+ {ril:.3} (outside [.03, .07]: {ril_off}), gANOVA+ {g:.3} in [{lo:.3}, {hi:.3}]: {g_in}; {:.0} s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn convergence_ordering() -> Outcome {
    let t = Instant::now();
    let n: usize = std::env::var("CREMEM_ACCEPT_CONVERGENCE_REPLICATES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(60);
    let cfg = GenConfig { design: Design::M2, seed: 20_240_603, ..GenConfig::default() };
    let families = [
        CovFamily::new(FamilyTag::Max, true),
        CovFamily::new(FamilyTag::Ganova, true),
        CovFamily::new(FamilyTag::Ri, true),
    ];
    let opts = StudyOptions { n_replicates: n, ..Default::default() };
    let report = match convergence_study(&[cfg], &families, &opts) {
        Ok(r) => r,
        Err(e) => return (false, e.to_string()),
    };
    let count = |s: &str| report.rows.iter().find(|r| r.structure == s).map_or(usize::MAX, |r| r.failures);
    let (m, g, r) = (count("MAX+"), count("gANOVA+"), count("RI+"));
    (
        m > g && m > r,
        format!(
            "M2 12x12, {n} replicates: failures MAX+ {m}, gANOVA+ {g}, RI+ {r}; {:.0} s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn quasi_agreement() -> Outcome {
    let mut gaps: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in 0..50 {
        for (effect, p, q) in quasi_case(20_240_604, r) {
            gaps.entry(effect).or_default().push((p - q).abs());
        }
    }
    let mut ok = gaps.len() == 7;
    let mut parts = Vec::new();
    for (effect, mut g) in gaps {
        g.sort_by(f64::total_cmp);
        let median = (g[24] + g[25]) / 2.0;
        ok &= median < 0.02;
        parts.push(format!("{effect} {median:.4}"));
    }
    (ok, format!("50 M1 datasets, median |Δp|: {}", parts.join(", ")))
}

fn ranova_reduction() -> Outcome {
    let mut ok = true;
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for (levels, reps) in [(2, 1), (2, 3), (3, 2), (4, 2), (5, 1)] {
        let ((f, p, df), (rf, rp, rdf)) = ranova_case(levels, reps, 40 + levels as u64);
        let gaps = ((f - rf).abs(), (p - rp).abs(), (df - rdf).abs());
        ok &= gaps.0 < 1e-6 && gaps.1 < 1e-6 && gaps.2 < 0.5;
        worst = (worst.0.max(gaps.0), worst.1.max(gaps.1), worst.2.max(gaps.2));
    }
    (
        ok,
        format!("5 designs: max |ΔF| {:.1e}, max |Δp| {:.1e}, max |Δdf| {:.2}", worst.0, worst.1, worst.2),
    )
}

fn property_suites_green() -> Outcome {
    let results = property_suites(1);
    let ok = results.iter().all(|(_, r)| r.is_ok());
    let parts: Vec<String> = results
        .iter()
        .map(|(name, r)| match r {
            Ok(()) => format!("{name} ok"),
            Err(e) => format!("{name} FAILED ({e})"),
        })
        .collect();
    (ok, parts.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("parameter-count table", param_count_table),
        ("dense-oracle equivalence", dense_oracle),
        ("deviance dominance", dominance),
        ("variance-map identity", variance_map),
        ("contrast invariance", contrasts),
        ("null-rate calibration", null_calibration),
        ("RI-L failure without intercepts", no_intercepts),
        ("convergence ordering", convergence_ordering),
        ("quasi-F agreement", quasi_agreement),
        ("rANOVA reduction", ranova_reduction),
        ("property suites", property_suites_green),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (ok, detail) = run();
        failed += usize::from(!ok);
        println!("criterion {:>2} {} {name}: {detail}", i + 1, if ok { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    let strict = std::env::var("CREMEM_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
