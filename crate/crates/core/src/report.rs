//! Study configuration, report assembly and the text/CSV views of reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::{count_params, realize, CovError, CovFamily};
use crate::data::{ingest_csv, CsvSchema, DataError, Dataset};
use crate::formula::{parse_formula, Design, Factor, FactorKind, FactorTable, FormulaError, ModelSpec, UnitKind};
use crate::inference::{anova, cs_pca_select, InferenceError, SelectionProcedure, TestResult};
use crate::reml::{fit, FitError, FitOptions, FitProblem, FitResult};
use crate::simulation::{
    convergence_study, power_study, run_study, ConvergenceReport, GenConfig, PowerReport, SimError, SimReport,
    StudyOptions,
};

pub const FIT_SCHEMA: &str = "cremem.fit-report.v1";
pub const PARAM_COUNT_SCHEMA: &str = "cremem.param-count.v1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("configuration: {0}")]
    Json(#[from] serde_json::Error),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("data: {0}")]
    Layout(String),
    #[error("formula: {0}")]
    Formula(#[from] FormulaError),
    #[error("covariance structure: {0}")]
    Cov(#[from] CovError),
    #[error("fit: {0}")]
    Fit(#[from] FitError),
    #[error("inference: {0}")]
    Inference(#[from] InferenceError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ReportError {
    /// Process exit status: 2 for configuration errors, 3 for data errors,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Json(_) | Self::Formula(_) | Self::Cov(_) => 2,
            Self::Sim(SimError::InvalidConfig(_) | SimError::Formula(_) | SimError::Cov(_)) => 2,
            Self::Data(_) | Self::Layout(_) | Self::Io { .. } => 3,
            Self::Fit(
                FitError::Design(_)
                | FitError::SingularFixedDesign
                | FitError::TooFewObservations { .. }
                | FitError::NonFiniteResponse,
            ) => 3,
            Self::Inference(InferenceError::Data(_) | InferenceError::UnbalancedDesign(_)) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    FitData,
    NullStudy,
    PowerStudy,
    ParamCount,
    Convergence,
}

/// Everything needed to run one command; reports embed it as resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub mode: StudyMode,
    /// Model formula (fit mode).
    pub formula: Option<String>,
    /// Long-format CSV (fit mode).
    pub data_path: Option<String>,
    /// Factor kinds for data columns not named by the `Ap`/`As`/`Am`/`Aps`/`Ao`
    /// prefix convention.
    pub factor_kinds: IndexMap<String, FactorKind>,
    /// One family, a comma-separated list, `all`, or `cs-pca` in fit mode.
    pub family: String,
    /// Designs for the parameter-count table.
    pub designs: Vec<Design>,
    /// Data generator (study modes).
    pub gen: GenConfig,
    /// Largest effect of the power curves.
    pub max_effect: f64,
    /// CS-PCA selection rule (fit mode with `cs-pca`).
    pub selection: SelectionProcedure,
    pub output_path: Option<String>,
    pub replicates: usize,
    pub alpha: f64,
    /// Worker threads for replicates; 0 uses all cores.
    pub threads: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            mode: StudyMode::ParamCount,
            formula: None,
            data_path: None,
            factor_kinds: IndexMap::new(),
            family: "all".into(),
            designs: Design::ALL.to_vec(),
            gen: GenConfig::default(),
            max_effect: 0.2,
            selection: SelectionProcedure::default(),
            output_path: None,
            replicates: 500,
            alpha: 0.05,
            threads: 0,
        }
    }
}

/// Family requested for a data fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitFamily {
    Fixed(CovFamily),
    CsPca,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ReportError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// Checks that the fields the mode needs are present and sane.
    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |m: &str| Err(ReportError::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        match self.mode {
            StudyMode::FitData => {
                if self.formula.is_none() {
                    return bad("fit mode needs a formula");
                }
                if self.data_path.is_none() {
                    return bad("fit mode needs a data path");
                }
                self.fit_family()?;
            }
            StudyMode::NullStudy | StudyMode::PowerStudy | StudyMode::Convergence => {
                if self.replicates == 0 {
                    return bad("replicates must be positive");
                }
                self.gen.validate()?;
                self.families()?;
                if self.mode == StudyMode::PowerStudy && !(self.max_effect > 0.0 && self.max_effect.is_finite()) {
                    return bad("max_effect must be positive");
                }
            }
            StudyMode::ParamCount => {
                if self.designs.is_empty() {
                    return bad("no designs given");
                }
                self.families()?;
            }
        }
        Ok(())
    }

    /// The families of a study or table.
    pub fn families(&self) -> Result<Vec<CovFamily>, ReportError> {
        parse_families(&self.family)
    }

    pub fn fit_family(&self) -> Result<FitFamily, ReportError> {
        let norm: String = self.family.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        if norm.eq_ignore_ascii_case("cspca") {
            return Ok(FitFamily::CsPca);
        }
        match parse_families(&self.family)?.as_slice() {
            [f] => Ok(FitFamily::Fixed(*f)),
            _ => Err(ReportError::Config("a fit takes exactly one family".into())),
        }
    }

    fn study_options(&self) -> StudyOptions {
        StudyOptions { n_replicates: self.replicates, alpha: self.alpha, threads: self.threads, ..Default::default() }
    }
}

/// `all` (the ten table rows) or a comma-separated list of family names.
pub fn parse_families(s: &str) -> Result<Vec<CovFamily>, ReportError> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(CovFamily::table_rows());
    }
    let out: Vec<CovFamily> = s
        .split(',')
        .map(|p| CovFamily::parse(p).ok_or_else(|| ReportError::Config(format!("unknown family `{}`", p.trim()))))
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(ReportError::Config("no family given".into()));
    }
    Ok(out)
}

/// `M1..M5` style ranges or comma-separated design names.
pub fn parse_designs(s: &str) -> Result<Vec<Design>, ReportError> {
    let parse = |p: &str| Design::parse(p).ok_or_else(|| ReportError::Config(format!("unknown design `{}`", p.trim())));
    let mut out = Vec::new();
    for part in s.split(',') {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b) = (parse(a)?, parse(b)?);
            let ia = Design::ALL.iter().position(|d| *d == a).unwrap_or(0);
            let ib = Design::ALL.iter().position(|d| *d == b).unwrap_or(0);
            if ia > ib {
                return Err(ReportError::Config(format!("empty design range `{part}`")));
            }
            out.extend_from_slice(&Design::ALL[ia..=ib]);
        } else {
            out.push(parse(part)?);
        }
    }
    Ok(out)
}

/// Kind implied by the `Ap`/`As`/`Am`/`Aps`/`Ao` naming convention.
pub fn kind_from_name(name: &str) -> Option<FactorKind> {
    let prefixed = |p: &str| {
        name.strip_prefix(p)
            .is_some_and(|rest| rest.chars().next().map_or(true, |c| !c.is_ascii_lowercase()))
    };
    [("Aps", FactorKind::PS), ("Ap", FactorKind::P), ("As", FactorKind::S), ("Am", FactorKind::M), ("Ao", FactorKind::O)]
        .into_iter()
        .find(|(p, _)| prefixed(p))
        .map(|(_, k)| k)
}

fn formula_identifiers(formula: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for tok in formula.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.')) {
        if !tok.is_empty() && !tok.chars().all(|c| c.is_ascii_digit()) && !out.iter().any(|t| t == tok) {
            out.push(tok.to_string());
        }
    }
    out
}

/// Reads the columns a formula refers to and builds the matching factor
/// table. Factor kinds come from `kinds` or the naming convention; levels
/// from the data.
pub fn load_for_formula(
    path: &Path,
    formula: &str,
    kinds: &IndexMap<String, FactorKind>,
) -> Result<(Dataset, ModelSpec), ReportError> {
    let (lhs, _) = formula
        .split_once('~')
        .ok_or_else(|| ReportError::Config("formula has no `~`".into()))?;
    let response = lhs.trim().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(DataError::from)?;
    let headers: Vec<String> = rdr.headers().map_err(DataError::from)?.iter().map(String::from).collect();
    let ids = formula_identifiers(formula);
    let is_factor = |n: &str| kinds.contains_key(n) || kind_from_name(n).is_some();
    let (participant, stimulus) = unit_columns(formula, is_factor)?;

    let mut schema = CsvSchema::new().real(&response);
    schema = schema.categorical(&participant, None).categorical(&stimulus, None);
    let mut factor_names = Vec::new();
    for name in &ids {
        if *name == response || *name == participant || *name == stimulus || !headers.contains(name) {
            continue;
        }
        let kind = kinds.get(name).copied().or_else(|| kind_from_name(name)).ok_or_else(|| {
            ReportError::Config(format!("kind of factor `{name}` is unknown; declare it"))
        })?;
        schema = schema.categorical(name, None);
        factor_names.push((name.clone(), kind));
    }
    let data = ingest_csv(path, &schema)?;

    let mut table = FactorTable::new(participant.clone(), stimulus.clone());
    for (name, kind) in &factor_names {
        let n_levels = data.categorical(name)?.levels.len();
        let factor = Factor::new(name.clone(), *kind, n_levels)?;
        check_kind(&data, &factor, &participant, &stimulus)?;
        table = table.with_factor(factor);
    }
    let spec = parse_formula(formula, &table)?;
    Ok((data, spec))
}

/// The participant and stimulus identifiers: the non-factor names of the
/// grouping expressions of the random terms, first-seen order.
fn unit_columns(formula: &str, is_factor: impl Fn(&str) -> bool) -> Result<(String, String), ReportError> {
    let mut units: Vec<String> = Vec::new();
    for part in formula.split('(').skip(1) {
        let inner = part.split(')').next().unwrap_or("");
        let pieces: Vec<&str> = inner.split('|').map(str::trim).filter(|p| !p.is_empty()).collect();
        if pieces.len() < 2 {
            continue;
        }
        for name in pieces[1].split(':') {
            let name = name.trim().to_string();
            if !name.is_empty() && !is_factor(&name) && !units.contains(&name) {
                units.push(name);
            }
        }
    }
    match units.as_slice() {
        [p, s] => Ok((p.clone(), s.clone())),
        _ => Err(ReportError::Config(
            "the random part must name exactly two grouping columns (participants, stimuli)".into(),
        )),
    }
}

/// Between-unit factors must be constant within their unit.
fn check_kind(data: &Dataset, factor: &Factor, participant: &str, stimulus: &str) -> Result<(), ReportError> {
    let codes = &data.categorical(factor.name())?.codes;
    let p = &data.categorical(participant)?.codes;
    let s = &data.categorical(stimulus)?.codes;
    let key = |i: usize| -> Option<(usize, usize)> {
        match factor.kind() {
            FactorKind::P => Some((p[i], 0)),
            FactorKind::S => Some((0, s[i])),
            FactorKind::PS => Some((p[i], s[i])),
            FactorKind::M | FactorKind::O => None,
        }
    };
    let mut seen = std::collections::HashMap::new();
    for (i, &c) in codes.iter().enumerate() {
        if let Some(k) = key(i) {
            if *seen.entry(k).or_insert(c) != c {
                return Err(ReportError::Layout(format!(
                    "factor `{}` declared {} varies within a grouping unit (row {})",
                    factor.name(),
                    factor.kind(),
                    i + 1
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub unit: UnitKind,
    pub term: String,
    /// Variances of the block's random-effect columns (σ² scale).
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: String,
    pub formula: String,
    pub family: String,
    pub converged: bool,
    pub optimizer: String,
    pub n_evals: usize,
    pub deviance: f64,
    pub sigma2: f64,
    pub theta: Vec<f64>,
    pub theta_names: Vec<String>,
    pub beta: Vec<f64>,
    pub beta_names: Vec<String>,
    pub boundary: Vec<bool>,
    pub variances: Vec<VarianceRow>,
    pub anova: Vec<TestResult>,
    /// Present when the structure was chosen by CS-PCA.
    pub selection: Option<SelectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub correlated: bool,
    pub dimensions: Vec<(UnitKind, usize)>,
    pub selected_formula: String,
}

/// Fits `spec` on `data` with the requested family and tests every fixed term.
pub fn fit_report(
    data: &Dataset,
    spec: &ModelSpec,
    family: FitFamily,
    procedure: SelectionProcedure,
    options: &FitOptions,
) -> Result<FitReport, ReportError> {
    let (problem, result, label, selection) = match family {
        FitFamily::Fixed(f) => {
            let problem = FitProblem::new(spec, data, realize(spec, f)?)?;
            let result = fit(&problem, options);
            (problem, result, f.to_string(), None)
        }
        FitFamily::CsPca => {
            let sel = cs_pca_select(data, spec, procedure, options)?;
            let summary = SelectionSummary {
                correlated: sel.correlated,
                dimensions: sel.dimensions.clone(),
                selected_formula: sel.spec.render(),
            };
            (sel.problem, sel.fit, "CS-PCA".to_string(), Some(summary))
        }
    };
    let tests = anova(&problem, &result)?;
    Ok(assemble(&problem, &result, spec.render(), label, tests, selection))
}

fn assemble(
    problem: &FitProblem,
    result: &FitResult,
    formula: String,
    family: String,
    anova: Vec<TestResult>,
    selection: Option<SelectionSummary>,
) -> FitReport {
    let st = &problem.structure;
    let mut variances = Vec::new();
    for b in &st.blocks {
        let Some(ui) = st.units.iter().position(|u| u.unit == b.unit) else { continue };
        let rel = st.relative_cov(ui, &result.theta_hat);
        variances.push(VarianceRow {
            unit: b.unit,
            term: b.label.clone(),
            variances: b.columns.clone().map(|c| result.sigma2_hat * rel[(c, c)]).collect(),
        });
    }
    let d = &problem.design;
    let mut beta_names = Vec::new();
    for (label, cols) in d.fixed_labels.iter().zip(&d.fixed_cols) {
        if cols.len() == 1 {
            beta_names.push(label.clone());
        } else {
            beta_names.extend((1..=cols.len()).map(|k| format!("{label}[{k}]")));
        }
    }
    FitReport {
        schema: FIT_SCHEMA.into(),
        formula,
        family,
        converged: result.converged,
        optimizer: format!("{:?}", result.optimizer_used),
        n_evals: result.n_evals,
        deviance: result.deviance,
        sigma2: result.sigma2_hat,
        theta: result.theta_hat.clone(),
        theta_names: st.theta_names(),
        beta: result.beta_hat.clone(),
        beta_names,
        boundary: result.boundary_flags.clone(),
        variances,
        anova,
        selection,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub schema: String,
    pub designs: Vec<Design>,
    pub families: Vec<String>,
    /// `counts[family][design]`, residual variance excluded.
    pub counts: Vec<Vec<usize>>,
}

pub fn param_count(designs: &[Design], families: &[CovFamily]) -> Result<ParamCountReport, ReportError> {
    let mut counts = Vec::with_capacity(families.len());
    for &f in families {
        counts.push(designs.iter().map(|d| count_params(f, &d.factors())).collect::<Result<Vec<_>, _>>()?);
    }
    Ok(ParamCountReport {
        schema: PARAM_COUNT_SCHEMA.into(),
        designs: designs.to_vec(),
        families: families.iter().map(|f| f.to_string()).collect(),
        counts,
    })
}

/// A report together with the configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WithConfig<T> {
    #[serde(flatten)]
    pub report: T,
    pub config: StudyConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Report {
    Fit(WithConfig<FitReport>),
    Null(WithConfig<SimReport>),
    Power(WithConfig<PowerReport>),
    ParamCount(WithConfig<ParamCountReport>),
    Convergence(WithConfig<ConvergenceReport>),
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn to_text(&self) -> String {
        match self {
            Report::Fit(r) => fit_text(&r.report),
            Report::Null(r) => sim_text(&r.report),
            Report::Power(r) => power_text(&r.report),
            Report::ParamCount(r) => param_count_text(&r.report),
            Report::Convergence(r) => convergence_text(&r.report),
        }
    }

    /// CSV view where one exists.
    pub fn to_csv(&self) -> Option<String> {
        match self {
            Report::Null(r) => Some(sim_csv(&r.report)),
            Report::Power(r) => Some(power_csv(&r.report)),
            Report::ParamCount(r) => Some(param_count_csv(&r.report)),
            Report::Convergence(r) => Some(convergence_csv(&r.report)),
            Report::Fit(_) => None,
        }
    }
}

/// Runs the command a configuration describes.
pub fn execute(config: &StudyConfig) -> Result<Report, ReportError> {
    config.validate()?;
    let cfg = config.clone();
    Ok(match config.mode {
        StudyMode::FitData => {
            let formula = config.formula.as_deref().unwrap_or_default();
            let path = PathBuf::from(config.data_path.as_deref().unwrap_or_default());
            let (data, spec) = load_for_formula(&path, formula, &config.factor_kinds)?;
            let report = fit_report(&data, &spec, config.fit_family()?, config.selection, &FitOptions::default())?;
            Report::Fit(WithConfig { report, config: cfg })
        }
        StudyMode::NullStudy => {
            let report = run_study(std::slice::from_ref(&config.gen), &config.families()?, &config.study_options())?;
            Report::Null(WithConfig { report, config: cfg })
        }
        StudyMode::PowerStudy => {
            let report = power_study(&config.gen, &config.families()?, config.max_effect, &config.study_options())?;
            Report::Power(WithConfig { report, config: cfg })
        }
        StudyMode::ParamCount => {
            let report = param_count(&config.designs, &config.families()?)?;
            Report::ParamCount(WithConfig { report, config: cfg })
        }
        StudyMode::Convergence => {
            let report =
                convergence_study(std::slice::from_ref(&config.gen), &config.families()?, &config.study_options())?;
            Report::Convergence(WithConfig { report, config: cfg })
        }
    })
}

/// Left-aligned first column, right-aligned others.
fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let n = header.len();
    let mut w: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(n) {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{:<width$}", c, width = w[0]);
            } else {
                let _ = write!(s, "  {:>width$}", c, width = w[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    let total: usize = w.iter().sum::<usize>() + 2 * (n.saturating_sub(1));
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn p4(p: f64) -> String {
    if p < 1e-4 {
        "<.0001".into()
    } else {
        format!("{p:.4}")
    }
}

pub fn fit_text(r: &FitReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Formula: {}", r.formula);
    let _ = writeln!(out, "Structure: {}", r.family);
    if let Some(s) = &r.selection {
        let dims: Vec<String> = s.dimensions.iter().map(|(u, d)| format!("{u} {d}")).collect();
        let _ = writeln!(
            out,
            "Selected: {} ({}); dimensions {}",
            s.selected_formula,
            if s.correlated { "correlated" } else { "uncorrelated" },
            dims.join(", ")
        );
    }
    let _ = writeln!(
        out,
        "REML deviance {:.4}, {} after {} evaluations{}",
        r.deviance,
        if r.converged { "converged" } else { "NOT converged" },
        r.n_evals,
        if r.boundary.iter().any(|&b| b) { ", boundary fit" } else { "" }
    );
    out.push_str("\nVariance components\n");
    let mut rows: Vec<Vec<String>> = r
        .variances
        .iter()
        .map(|v| {
            let vals: Vec<String> = v.variances.iter().map(|x| format!("{x:.4}")).collect();
            vec![v.unit.to_string(), v.term.clone(), vals.join(" ")]
        })
        .collect();
    rows.push(vec!["Residual".into(), String::new(), format!("{:.4}", r.sigma2)]);
    out.push_str(&table(&["Unit".into(), "Term".into(), "Variance".into()], &rows));
    out.push_str("\nFixed effects\n");
    let rows: Vec<Vec<String>> =
        r.beta_names.iter().zip(&r.beta).map(|(n, b)| vec![n.clone(), format!("{b:.4}")]).collect();
    out.push_str(&table(&["Coefficient".into(), "Estimate".into()], &rows));
    out.push_str("\nType III tests (Satterthwaite)\n");
    out.push_str(&anova_text(&r.anova));
    out
}

pub fn anova_text(tests: &[TestResult]) -> String {
    let rows: Vec<Vec<String>> = tests
        .iter()
        .map(|t| {
            vec![
                t.effect.clone(),
                format!("{:.4}", t.f),
                format!("{}", t.df_num),
                format!("{:.2}", t.df_den),
                p4(t.p_value),
            ]
        })
        .collect();
    table(&["Effect".into(), "F".into(), "df1".into(), "df2".into(), "p".into()], &rows)
}

pub fn sim_text(r: &SimReport) -> String {
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|x| {
            vec![
                x.structure.clone(),
                x.effect.clone(),
                p4(x.rate),
                format!("[{:.4}, {:.4}]", x.ci_low, x.ci_high),
                x.n_used.to_string(),
                format!("{:.4}", x.conv_fail_rate),
            ]
        })
        .collect();
    let header = ["Structure", "Effect", "Rate", "95% CI", "n", "Non-conv"].map(String::from);
    table(&header, &rows)
}

pub fn sim_csv(r: &SimReport) -> String {
    let mut out = String::from("structure,include_ps,effect,rate,ci_low,ci_high,n_used,conv_fail_rate\n");
    for x in &r.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            x.structure, x.include_ps, x.effect, x.rate, x.ci_low, x.ci_high, x.n_used, x.conv_fail_rate
        );
    }
    out
}

pub fn power_text(r: &PowerReport) -> String {
    let rows: Vec<Vec<String>> = r
        .points
        .iter()
        .map(|p| {
            let ratio = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
            vec![
                p.structure.clone(),
                p.effect.clone(),
                format!("{:.1}", p.effect_scale),
                p4(p.rate),
                p4(p.corrected_rate),
                ratio(p.ratio_to_ganova),
                ratio(p.corrected_ratio_to_ganova),
            ]
        })
        .collect();
    let header = ["Structure", "Effect", "Scale", "Power", "Corrected", "Ratio", "Corr. ratio"].map(String::from);
    table(&header, &rows)
}

pub fn power_csv(r: &PowerReport) -> String {
    let mut out = String::from(
        "structure,effect,effect_scale,rate,corrected_rate,ratio_to_ganova,corrected_ratio_to_ganova,n_used\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for p in &r.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.structure,
            p.effect,
            p.effect_scale,
            p.rate,
            p.corrected_rate,
            opt(p.ratio_to_ganova),
            opt(p.corrected_ratio_to_ganova),
            p.n_used
        );
    }
    out
}

pub fn param_count_text(r: &ParamCountReport) -> String {
    let mut header = vec!["Structure".to_string()];
    header.extend(r.designs.iter().map(|d| d.to_string()));
    let rows: Vec<Vec<String>> = r
        .families
        .iter()
        .zip(&r.counts)
        .map(|(f, c)| std::iter::once(f.clone()).chain(c.iter().map(|v| v.to_string())).collect())
        .collect();
    table(&header, &rows)
}

pub fn param_count_csv(r: &ParamCountReport) -> String {
    let mut out = String::from("structure");
    for d in &r.designs {
        let _ = write!(out, ",{d}");
    }
    out.push('\n');
    for (f, c) in r.families.iter().zip(&r.counts) {
        out.push_str(f);
        for v in c {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Structures as rows, designs (one per configuration) as columns.
pub fn convergence_text(r: &ConvergenceReport) -> String {
    let mut structures: Vec<String> = Vec::new();
    for row in &r.rows {
        if !structures.contains(&row.structure) {
            structures.push(row.structure.clone());
        }
    }
    let mut header = vec!["Structure".to_string()];
    header.extend(r.configs.iter().map(|c| c.design.to_string()));
    let rows: Vec<Vec<String>> = structures
        .iter()
        .map(|s| {
            let mut line = vec![s.clone()];
            for ci in 0..r.configs.len() {
                let cell = r
                    .rows
                    .iter()
                    .find(|x| x.config == ci && &x.structure == s)
                    .map_or("-".to_string(), |x| format!("{:.3} ({}/{})", x.rate, x.failures, x.n_replicates));
                line.push(cell);
            }
            line
        })
        .collect();
    table(&header, &rows)
}

pub fn convergence_csv(r: &ConvergenceReport) -> String {
    let mut out = String::from("design,structure,include_ps,failures,n_replicates,rate\n");
    for x in &r.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            x.design, x.structure, x.include_ps, x.failures, x.n_replicates, x.rate
        );
    }
    out
}
