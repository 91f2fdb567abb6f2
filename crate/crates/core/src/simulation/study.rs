//! Monte-Carlo studies: rejection rates under the null, power curves and
//! convergence-failure rates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::generator::{generate_replicate, GenConfig};
use super::SimError;
use crate::covariance::{CovFamily, FamilyTag};
use crate::formula::ModelSpec;
use crate::inference::anova;
use crate::reml::{fit, FitOptions, FitProblem};

pub const REPORT_SCHEMA: &str = "cremem.sim-report.v1";
pub const POWER_SCHEMA: &str = "cremem.power-report.v1";
pub const CONVERGENCE_SCHEMA: &str = "cremem.convergence-report.v1";

/// Adjusted-Wald interval: `ñ = n + z²`, `p̃ = (x + z²/2)/ñ`,
/// `p̃ ± z·√(p̃(1 − p̃)/ñ)`, clipped to `[0, 1]`.
pub fn agresti_coull_ci(successes: usize, n: usize, level: f64) -> (f64, f64) {
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0);
    let z2 = z * z;
    let nt = n as f64 + z2;
    let pt = (successes as f64 + z2 / 2.0) / nt;
    let h = z * (pt * (1.0 - pt) / nt).sqrt();
    ((pt - h).max(0.0), (pt + h).min(1.0))
}

/// Outcome of one structure on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    NotConverged,
    /// Converged but the tests could not be computed.
    TestFailed,
    /// One p-value per fixed effect, in fixed-term order.
    Tested(Vec<f64>),
    /// Converged; tests not requested.
    Converged,
}

/// Raw results of a study: `outcomes[config][structure][replicate]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRun {
    pub configs: Vec<GenConfig>,
    pub structures: Vec<CovFamily>,
    pub effects: Vec<Vec<String>>,
    pub outcomes: Vec<Vec<Vec<Outcome>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOptions {
    pub n_replicates: usize,
    pub alpha: f64,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    pub fit: FitOptions,
    /// Run the type III tests; off for convergence-only studies.
    pub test: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { n_replicates: 500, alpha: 0.05, threads: 0, fit: FitOptions::default(), test: true }
    }
}

fn one(config: &GenConfig, family: CovFamily, replicate: u64, opts: &StudyOptions) -> Result<Outcome, SimError> {
    let data = generate_replicate(config, replicate)?.data;
    let spec = ModelSpec::saturated("y", &config.design.factors(), family)?;
    let problem = FitProblem::from_family(&spec, &data, family)?;
    let r = fit(&problem, &opts.fit);
    if !r.converged {
        return Ok(Outcome::NotConverged);
    }
    if !opts.test {
        return Ok(Outcome::Converged);
    }
    Ok(match anova(&problem, &r) {
        Ok(tests) => Outcome::Tested(tests.iter().map(|t| t.p_value).collect()),
        Err(_) => Outcome::TestFailed,
    })
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, SimError> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok(pool.install(f))
}

/// Fits every structure to every replicate of every configuration.
/// Replicate `r` of a configuration always sees the same data, whatever
/// the thread count or execution order.
pub fn run_replicates(
    configs: &[GenConfig],
    structures: &[CovFamily],
    opts: &StudyOptions,
) -> Result<StudyRun, SimError> {
    if opts.n_replicates == 0 {
        return Err(SimError::InvalidConfig("need at least one replicate".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let effects = configs
        .iter()
        .map(|c| Ok(c.spec()?.fixed_labels()))
        .collect::<Result<Vec<_>, SimError>>()?;
    let jobs: Vec<(usize, usize, u64)> = (0..configs.len())
        .flat_map(|c| {
            (0..structures.len()).flat_map(move |s| (0..opts.n_replicates as u64).map(move |r| (c, s, r)))
        })
        .collect();
    let results: Vec<Result<Outcome, SimError>> = in_pool(opts.threads, || {
        jobs.par_iter().map(|&(c, s, r)| one(&configs[c], structures[s], r, opts)).collect()
    })?;
    let mut it = results.into_iter();
    let mut outcomes = Vec::with_capacity(configs.len());
    for _ in configs {
        let mut per_s = Vec::with_capacity(structures.len());
        for _ in structures {
            per_s.push((0..opts.n_replicates).map(|_| it.next().expect("one result per job")).collect::<Result<Vec<_>, _>>()?);
        }
        outcomes.push(per_s);
    }
    Ok(StudyRun { configs: configs.to_vec(), structures: structures.to_vec(), effects, outcomes })
}

/// One row of a null or power report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub config: usize,
    pub effect_scale: f64,
    pub structure: String,
    pub include_ps: bool,
    pub effect: String,
    pub rejections: usize,
    /// Replicates that converged and were tested.
    pub n_used: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub conv_failures: usize,
    pub test_failures: usize,
    pub n_replicates: usize,
    pub conv_fail_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub schema: String,
    pub alpha: f64,
    pub configs: Vec<GenConfig>,
    pub rows: Vec<SimRow>,
}

impl SimReport {
    pub fn row(&self, structure: &str, effect: &str) -> Option<&SimRow> {
        self.rows.iter().find(|r| r.structure == structure && r.effect == effect)
    }
}

fn count(outcomes: &[Outcome]) -> (usize, usize) {
    let nc = outcomes.iter().filter(|o| matches!(o, Outcome::NotConverged)).count();
    let tf = outcomes.iter().filter(|o| matches!(o, Outcome::TestFailed)).count();
    (nc, tf)
}

/// Rejection rates at `alpha`, over the replicates without convergence
/// failure. `critical` replaces `alpha` as the p-value threshold when set.
fn aggregate(run: &StudyRun, critical: impl Fn(usize, usize) -> f64) -> Vec<SimRow> {
    let mut rows = Vec::new();
    for (ci, cfg) in run.configs.iter().enumerate() {
        for (si, fam) in run.structures.iter().enumerate() {
            let outs = &run.outcomes[ci][si];
            let (nc, tf) = count(outs);
            for (ei, effect) in run.effects[ci].iter().enumerate() {
                let ps: Vec<f64> = outs
                    .iter()
                    .filter_map(|o| match o {
                        Outcome::Tested(p) => Some(p[ei]),
                        _ => None,
                    })
                    .collect();
                let thr = critical(si, ei);
                let k = ps.iter().filter(|&&p| p < thr).count();
                let n = ps.len();
                let (lo, hi) = if n > 0 { agresti_coull_ci(k, n, 0.95) } else { (f64::NAN, f64::NAN) };
                rows.push(SimRow {
                    config: ci,
                    effect_scale: cfg.effect_scale,
                    structure: fam.to_string(),
                    include_ps: fam.include_ps,
                    effect: effect.clone(),
                    rejections: k,
                    n_used: n,
                    rate: if n > 0 { k as f64 / n as f64 } else { f64::NAN },
                    ci_low: lo,
                    ci_high: hi,
                    conv_failures: nc,
                    test_failures: tf,
                    n_replicates: outs.len(),
                    conv_fail_rate: nc as f64 / outs.len() as f64,
                });
            }
        }
    }
    rows
}

pub fn run_study(
    configs: &[GenConfig],
    structures: &[CovFamily],
    opts: &StudyOptions,
) -> Result<SimReport, SimError> {
    let opts = StudyOptions { test: true, ..opts.clone() };
    let run = run_replicates(configs, structures, &opts)?;
    Ok(report(&run, opts.alpha))
}

pub fn report(run: &StudyRun, alpha: f64) -> SimReport {
    SimReport {
        schema: REPORT_SCHEMA.into(),
        alpha,
        configs: run.configs.clone(),
        rows: aggregate(run, |_, _| alpha),
    }
}

/// Convergence-failure rate per structure and configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub config: usize,
    pub design: String,
    pub structure: String,
    pub include_ps: bool,
    pub failures: usize,
    pub n_replicates: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub schema: String,
    pub configs: Vec<GenConfig>,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    pub fn rate(&self, structure: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.structure == structure).map(|r| r.rate)
    }
}

pub fn convergence_study(
    configs: &[GenConfig],
    structures: &[CovFamily],
    opts: &StudyOptions,
) -> Result<ConvergenceReport, SimError> {
    let opts = StudyOptions { test: false, ..opts.clone() };
    let run = run_replicates(configs, structures, &opts)?;
    let mut rows = Vec::new();
    for (ci, cfg) in configs.iter().enumerate() {
        for (si, fam) in structures.iter().enumerate() {
            let outs = &run.outcomes[ci][si];
            let (nc, _) = count(outs);
            rows.push(ConvergenceRow {
                config: ci,
                design: cfg.design.to_string(),
                structure: fam.to_string(),
                include_ps: fam.include_ps,
                failures: nc,
                n_replicates: outs.len(),
                rate: nc as f64 / outs.len() as f64,
            });
        }
    }
    Ok(ConvergenceReport { schema: CONVERGENCE_SCHEMA.into(), configs: configs.to_vec(), rows })
}

/// Fractions of the maximal effect at which power is evaluated; the first
/// point is the null.
pub const POWER_SCALES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub structure: String,
    pub effect: String,
    pub effect_scale: f64,
    pub rate: f64,
    /// Rate with the structure's own empirical null critical value.
    pub corrected_rate: f64,
    /// Ratios to the gANOVA structure with the same pair-unit setting.
    pub ratio_to_ganova: Option<f64>,
    pub corrected_ratio_to_ganova: Option<f64>,
    pub n_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerReport {
    pub schema: String,
    pub alpha: f64,
    pub max_effect: f64,
    pub config: GenConfig,
    pub points: Vec<PowerPoint>,
}

/// `alpha`-quantile of null p-values: the threshold giving an empirical
/// type I error rate of `alpha`.
fn empirical_critical(ps: &mut [f64], alpha: f64) -> f64 {
    if ps.is_empty() {
        return alpha;
    }
    ps.sort_by(f64::total_cmp);
    let k = ((alpha * ps.len() as f64).floor() as usize).min(ps.len() - 1);
    // Reject p strictly below the (k+1)-th smallest null p-value.
    ps[k]
}

pub fn power_study(
    config: &GenConfig,
    structures: &[CovFamily],
    max_effect: f64,
    opts: &StudyOptions,
) -> Result<PowerReport, SimError> {
    let configs: Vec<GenConfig> = POWER_SCALES
        .iter()
        .map(|&s| GenConfig { effect_scale: s, effect_size: max_effect, ..config.clone() })
        .collect();
    let opts = StudyOptions { test: true, ..opts.clone() };
    let run = run_replicates(&configs, structures, &opts)?;
    let n_eff = run.effects[0].len();
    let mut crit = vec![vec![opts.alpha; n_eff]; structures.len()];
    for (si, row) in crit.iter_mut().enumerate() {
        for (ei, c) in row.iter_mut().enumerate() {
            let mut ps: Vec<f64> = run.outcomes[0][si]
                .iter()
                .filter_map(|o| match o {
                    Outcome::Tested(p) => Some(p[ei]),
                    _ => None,
                })
                .collect();
            *c = empirical_critical(&mut ps, opts.alpha);
        }
    }
    let plain = aggregate(&run, |_, _| opts.alpha);
    let corrected = aggregate(&run, |s, e| crit[s][e]);
    let mut points: Vec<PowerPoint> = plain
        .iter()
        .zip(&corrected)
        .map(|(p, c)| PowerPoint {
            structure: p.structure.clone(),
            effect: p.effect.clone(),
            effect_scale: p.effect_scale,
            rate: p.rate,
            corrected_rate: c.rate,
            ratio_to_ganova: None,
            corrected_ratio_to_ganova: None,
            n_used: p.n_used,
        })
        .collect();
    // Reference rows: gANOVA with the same pair-unit setting.
    let lookup = points.clone();
    for pt in &mut points {
        let include_ps = structures.iter().find(|f| f.to_string() == pt.structure).map(|f| f.include_ps);
        let refname = CovFamily::new(FamilyTag::Ganova, include_ps.unwrap_or(false)).to_string();
        if let Some(g) = lookup
            .iter()
            .find(|q| q.structure == refname && q.effect == pt.effect && q.effect_scale == pt.effect_scale)
        {
            pt.ratio_to_ganova = Some(pt.rate / g.rate);
            pt.corrected_ratio_to_ganova = Some(pt.corrected_rate / g.corrected_rate);
        }
    }
    Ok(PowerReport { schema: POWER_SCHEMA.into(), alpha: opts.alpha, max_effect, config: config.clone(), points })
}
