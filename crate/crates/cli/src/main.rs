use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cremem::formula::{Design, FactorKind};
use cremem::inference::SelectionProcedure;
use cremem::report::{execute, parse_designs, Report, ReportError, StudyConfig, StudyMode};
use cremem::simulation::{GenConfig, RePattern};
use indexmap::IndexMap;

#[derive(Parser)]
#[command(name = "cremem", version, about = "Crossed random-effects mixed models for participant/stimulus designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a long-format CSV and test every fixed term.
    Fit(FitArgs),
    /// Type I error rates on data generated under the null.
    SimulateNull(SimArgs),
    /// Power curves over increasing effect sizes.
    SimulatePower(PowerArgs),
    /// Number of covariance parameters per structure and design.
    ParamCount(CountArgs),
    /// Convergence-failure rates per structure.
    Convergence(SimArgs),
    /// Run a JSON study configuration.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
    Csv,
}

#[derive(Args)]
struct Output {
    /// Output view; JSON is the machine interface.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write to this file instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Selection {
    Lrt,
    Aic,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    formula: String,
    /// Covariance structure, e.g. ganova, ri-l+, max, zcp, cs-pca.
    #[arg(long, default_value = "ganova")]
    family: String,
    /// Factor kind for a column outside the Ap/As/Am/Aps/Ao naming convention, as NAME=KIND.
    #[arg(long = "factor", value_parser = parse_kind)]
    factors: Vec<(String, FactorKind)>,
    /// CS-PCA comparison rule.
    #[arg(long, value_enum, default_value = "lrt")]
    selection: Selection,
    /// Level of the CS-PCA likelihood-ratio tests.
    #[arg(long, default_value_t = 0.05)]
    selection_alpha: f64,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "M1", value_parser = parse_design)]
    design: Design,
    #[arg(long, default_value_t = 12)]
    participants: usize,
    #[arg(long, default_value_t = 12)]
    stimuli: usize,
    /// Random-effect pattern of the generated data.
    #[arg(long, value_enum, default_value = "spherical")]
    pattern: Pattern,
    /// Generate without participant:stimulus random effects.
    #[arg(long)]
    no_ps_effects: bool,
    /// Generate with zero random-intercept variances.
    #[arg(long)]
    no_intercepts: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pattern {
    Spherical,
    Correlated,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    gen: GenArgs,
    /// Structures to fit: a comma-separated list or `all`.
    #[arg(long, default_value = "ganova+,ri-l+,ri+")]
    family: String,
    #[arg(long, default_value_t = 500)]
    replicates: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct PowerArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Fixed-effect size at the top of the curve.
    #[arg(long, default_value_t = 0.2)]
    max_effect: f64,
}

#[derive(Args)]
struct CountArgs {
    /// Designs, e.g. `M1..M5` or `M1,M4`.
    #[arg(long, default_value = "M1..M5")]
    designs: String,
    /// Structures: a comma-separated list or `all`.
    #[arg(long, default_value = "all")]
    families: String,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct RunArgs {
    /// JSON file mirroring the study configuration.
    config: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

fn parse_kind(s: &str) -> Result<(String, FactorKind), String> {
    let (name, kind) = s.split_once('=').ok_or("expected NAME=KIND")?;
    let kind = FactorKind::parse(kind).ok_or_else(|| format!("unknown factor kind `{kind}`"))?;
    Ok((name.trim().to_string(), kind))
}

fn parse_design(s: &str) -> Result<Design, String> {
    Design::parse(s).ok_or_else(|| format!("unknown design `{s}`"))
}

impl GenArgs {
    fn config(&self) -> GenConfig {
        GenConfig {
            design: self.design,
            n_participants: self.participants,
            n_stimuli: self.stimuli,
            re_pattern: match self.pattern {
                Pattern::Spherical => RePattern::Spherical,
                Pattern::Correlated => RePattern::Correlated,
            },
            include_ps_effects: !self.no_ps_effects,
            random_intercepts: !self.no_intercepts,
            seed: self.seed,
            ..GenConfig::default()
        }
    }
}

impl SimArgs {
    fn config(&self, mode: StudyMode) -> StudyConfig {
        StudyConfig {
            mode,
            family: self.family.clone(),
            gen: self.gen.config(),
            replicates: self.replicates,
            alpha: self.alpha,
            threads: self.threads,
            output_path: self.out.output.as_ref().map(|p| p.to_string_lossy().into()),
            ..StudyConfig::default()
        }
    }
}

fn build(command: Command) -> Result<(StudyConfig, Format), ReportError> {
    Ok(match command {
        Command::Fit(a) => {
            let cfg = StudyConfig {
                mode: StudyMode::FitData,
                formula: Some(a.formula),
                data_path: Some(a.data.to_string_lossy().into()),
                factor_kinds: a.factors.into_iter().collect::<IndexMap<_, _>>(),
                family: a.family,
                selection: match a.selection {
                    Selection::Lrt => SelectionProcedure::Lrt { alpha: a.selection_alpha },
                    Selection::Aic => SelectionProcedure::Aic,
                },
                output_path: a.out.output.map(|p| p.to_string_lossy().into()),
                ..StudyConfig::default()
            };
            (cfg, a.out.format)
        }
        Command::SimulateNull(a) => (a.config(StudyMode::NullStudy), a.out.format),
        Command::Convergence(a) => (a.config(StudyMode::Convergence), a.out.format),
        Command::SimulatePower(a) => {
            let cfg = StudyConfig { max_effect: a.max_effect, ..a.sim.config(StudyMode::PowerStudy) };
            (cfg, a.sim.out.format)
        }
        Command::ParamCount(a) => {
            let cfg = StudyConfig {
                mode: StudyMode::ParamCount,
                designs: parse_designs(&a.designs)?,
                family: a.families,
                output_path: a.out.output.map(|p| p.to_string_lossy().into()),
                ..StudyConfig::default()
            };
            (cfg, a.out.format)
        }
        Command::Run(a) => (StudyConfig::from_file(&a.config)?, a.format),
    })
}

fn render(report: &Report, format: Format) -> Result<String, ReportError> {
    match format {
        Format::Json => Ok(report.to_json()),
        Format::Text => Ok(report.to_text()),
        Format::Csv => report
            .to_csv()
            .ok_or_else(|| ReportError::Config("this report has no CSV view; use json or text".into())),
    }
}

fn run(cli: Cli) -> Result<(), ReportError> {
    let (config, format) = build(cli.command)?;
    let report = execute(&config)?;
    let body = render(&report, format)?;
    match &config.output_path {
        Some(path) => {
            let path = PathBuf::from(path);
            std::fs::write(&path, body).map_err(|source| ReportError::Io { path, source })
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
