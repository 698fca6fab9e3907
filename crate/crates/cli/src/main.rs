//! `pivsem`: fit, moments and simulate subcommands.

mod io;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pivsem::{
    anchor_spec, apply_anchors, assemble_omega_with, fit_moments, infer_metas, parameterize,
    parse_model, run_study, stage1_for, FitOptions, MomentInput, NpdPolicy, Parameterization,
    StudyConfig, VariableKind, VariableMeta, Weight,
};

const PAPER_DESIGN: &str = include_str!("../configs/paper_design.json");

#[derive(Parser)]
#[command(
    name = "pivsem",
    version,
    about = "Polychoric instrumental variable SEM estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to raw data or to a moment bundle.
    Fit(FitArgs),
    /// Compute the moment bundle (polychoric/polyserial moments and their covariance).
    Moments(MomentsArgs),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Standard,
    Alternative,
}

impl From<ParamArg> for Parameterization {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::Standard => Parameterization::Standard,
            ParamArg::Alternative => Parameterization::Alternative,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightArg {
    Full,
    Diagonal,
    Identity,
}

impl From<WeightArg> for Weight {
    fn from(w: WeightArg) -> Self {
        match w {
            WeightArg::Full => Weight::Full,
            WeightArg::Diagonal => Weight::Diagonal,
            WeightArg::Identity => Weight::Identity,
        }
    }
}

#[derive(Args)]
struct Common {
    /// CSV data file with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Variable types, e.g. `y6=ordinal,y7=ordinal`. Undeclared variables are continuous.
    #[arg(long = "types", value_name = "NAME=KIND,...")]
    types: Vec<String>,
    #[arg(long, value_enum)]
    parameterization: Option<ParamArg>,
    /// Fixed thresholds, e.g. `deg=t1:12,t3:16`. Implies the alternative parameterization.
    #[arg(long = "anchors", value_name = "VAR=tK:VALUE,...")]
    anchors: Vec<String>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Model syntax file.
    #[arg(long)]
    model: PathBuf,
    /// Moment bundle written by `moments --out` or `fit --moments-out`.
    #[arg(long, conflicts_with = "data")]
    from_moments: Option<PathBuf>,
    /// Also write the stage-one moment bundle.
    #[arg(long)]
    moments_out: Option<PathBuf>,
    /// Weight matrix for the variance parameters.
    #[arg(long, value_enum, default_value = "diagonal")]
    weight: WeightArg,
}

#[derive(Args)]
struct MomentsArgs {
    #[command(flatten)]
    common: Common,
    /// Restrict to the model's variables and apply its threshold anchors.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write the moment bundle as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PolicyArg {
    Exclude,
    Include,
    Both,
}

#[derive(Args)]
struct SimulateArgs {
    /// Study configuration (JSON). Defaults to the bundled five-factor design.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample sizes, e.g. `100,3200`.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    parameterization: Option<ParamArg>,
    #[arg(long, value_enum)]
    npd_policy: Option<PolicyArg>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Directory for summary.csv, rates.csv, shea.csv, summary.json and table.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn classify(error: anyhow::Error) -> Failure {
    let code = match error
        .chain()
        .find_map(|e| e.downcast_ref::<pivsem::Error>())
    {
        Some(e) => match e.root() {
            pivsem::Error::Validation(_)
            | pivsem::Error::Parse { .. }
            | pivsem::Error::Specification(_)
            | pivsem::Error::EmptyCategory { .. } => 2,
            _ => 1,
        },
        None => 2,
    };
    Failure { code, error }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Moments(a) => cmd_moments(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    };
    match out {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let f = classify(e);
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn fit_options(common: &Common, weight: Weight) -> Result<FitOptions> {
    Ok(FitOptions {
        parameterization: common.parameterization.map(Into::into),
        anchors: io::parse_anchors(&common.anchors)?,
        weight,
        ..FitOptions::default()
    })
}

fn cmd_fit(a: &FitArgs) -> Result<String> {
    let model = parse_model(&io::read_text(&a.model, "model file")?)?;
    let options = fit_options(&a.common, a.weight.into())?;
    let input = match (&a.from_moments, &a.common.data) {
        (Some(path), _) => {
            if !a.common.types.is_empty() {
                bail!("--types has no effect with --from-moments; types are stored in the bundle");
            }
            io::read_moments(path)?
        }
        (None, Some(path)) => {
            let data = io::read_csv(path)?;
            let types = io::parse_types(&a.common.types)?;
            let metas = infer_metas(&model, &data, &io::ordinal_names(&types))?;
            let st = stage1_for(&model, &data, &metas, &options)?;
            MomentInput::from_stage1(&st)
        }
        (None, None) => bail!("give --data or --from-moments"),
    };
    if let Some(path) = &a.moments_out {
        io::write_moments(path, &input)?;
    }
    let fit = fit_moments(&model, &input, &options)?;
    Ok(report::fit(&fit, options.weight, a.common.format))
}

fn cmd_moments(a: &MomentsArgs) -> Result<String> {
    let c = &a.common;
    let path = c.data.as_ref().context("give --data")?;
    let data = io::read_csv(path)?;
    let types = io::parse_types(&c.types)?;
    let options = fit_options(c, Weight::default())?;
    let input = match &a.model {
        Some(m) => {
            let model = parse_model(&io::read_text(m, "model file")?)?;
            let metas = infer_metas(&model, &data, &io::ordinal_names(&types))?;
            let st = stage1_for(&model, &data, &metas, &options)?;
            parameterize(&model, &MomentInput::from_stage1(&st), &options)?.0
        }
        None => {
            for name in types.keys() {
                if data.index_of(name).is_none() {
                    bail!(pivsem::Error::Validation(format!(
                        "data has no column `{name}`"
                    )));
                }
            }
            let metas = data
                .names()
                .iter()
                .enumerate()
                .map(|(j, name)| match types.get(name) {
                    Some(VariableKind::Ordinal) => {
                        VariableMeta::ordinal_from_column(name.clone(), data.column(j))
                    }
                    _ => Ok(VariableMeta::continuous(name.clone())),
                })
                .collect::<pivsem::Result<Vec<_>>>()?;
            let st = assemble_omega_with(&data.complete_cases(), &metas, &options.stage1)?;
            let input = MomentInput::from_stage1(&st);
            let param = options
                .parameterization
                .unwrap_or(if options.anchors.is_empty() {
                    Parameterization::Standard
                } else {
                    Parameterization::Alternative
                });
            let spec = anchor_spec(&input, &options.anchors, param)?;
            apply_anchors(&input, &spec)?
        }
    };
    if let Some(out) = &a.out {
        io::write_moments(out, &input)?;
    }
    report::moments(&input, c.format)
}

fn study_config(a: &SimulateArgs) -> Result<StudyConfig> {
    let text = match &a.config {
        Some(p) => io::read_text(p, "study config")?,
        None => PAPER_DESIGN.to_string(),
    };
    let mut config: StudyConfig =
        serde_json::from_str(&text).context("study config is not valid")?;
    if let Some(r) = a.reps {
        config.replications = r;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(sizes) = &a.sizes {
        config.sample_sizes = sizes.clone();
    }
    if let Some(p) = a.parameterization {
        config.parameterizations = vec![p.into()];
    }
    match a.npd_policy {
        Some(PolicyArg::Exclude) => config.npd_policies = vec![NpdPolicy::Exclude],
        Some(PolicyArg::Include) => config.npd_policies = vec![NpdPolicy::Include],
        Some(PolicyArg::Both) => config.npd_policies = vec![NpdPolicy::Exclude, NpdPolicy::Include],
        None => {}
    }
    Ok(config)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<String> {
    let config = study_config(a)?;
    let summary = run_study(&config)?;
    if let Some(dir) = &a.out {
        write_study(dir, &summary)?;
    }
    report::study(&summary, a.format)
}

fn write_study(dir: &Path, summary: &pivsem::StudySummary) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let files = [
        ("summary.csv", summary.to_csv()),
        ("rates.csv", summary.rates_csv()),
        ("shea.csv", report::shea_csv(summary)),
        ("summary.json", report::study(summary, Format::Json)?),
        ("table.txt", summary.to_table()),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}
