//! `mixrrm`: fit and post-process random regret minimization models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mixrrm", version, about = "Classical and mixed random regret minimization models")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate a classical (no --rand) or mixed RRM model.
    Fit(FitArgs),
    /// Append simulated choice probabilities (`pred_p`) to a data file.
    Predict(PredictArgs),
    /// Individual-level conditional means of the random coefficients.
    Betas(BetasArgs),
    /// Median, mean and sd of a log-normal coefficient.
    Lognormal(LognormalArgs),
    /// Convert a wide file (one row per choice situation) to long format.
    Reshape(ReshapeArgs),
    /// Histogram of one column of a CSV file as SVG.
    Plot(PlotArgs),
    /// Dump the Halton draws used for a given data shape.
    Draws(DrawsArgs),
}

/// Long-format column names.
#[derive(Args, Debug, Clone, Default)]
pub struct ColumnArgs {
    /// Individual identifier column.
    #[arg(long)]
    id: Option<String>,
    /// Choice situation identifier column.
    #[arg(long)]
    group: Option<String>,
    /// Alternative identifier column.
    #[arg(long)]
    alternatives: Option<String>,
    /// 0/1 choice column.
    #[arg(long)]
    choice: Option<String>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Long-format CSV file.
    input: PathBuf,
    #[command(flatten)]
    columns: ColumnArgs,
    /// Attributes with fixed coefficients.
    #[arg(long, value_delimiter = ',')]
    fixed: Vec<String>,
    /// Attributes with random coefficients.
    #[arg(long, value_delimiter = ',')]
    rand: Vec<String>,
    /// The last N random attributes are log-normal.
    #[arg(long, default_value_t = 0)]
    ln: usize,
    /// Halton draws per individual.
    #[arg(long, default_value_t = 50)]
    nrep: usize,
    /// Leading Halton elements discarded.
    #[arg(long, default_value_t = 15)]
    burn: usize,
    /// Omit alternative-specific constants.
    #[arg(long)]
    noconstant: bool,
    /// Alternative whose constant is normalized to zero.
    #[arg(long)]
    basealternative: Option<i64>,
    /// Cluster-robust standard errors by this column.
    #[arg(long, conflicts_with = "robust")]
    cluster: Option<String>,
    /// Robust (sandwich) standard errors.
    #[arg(long)]
    robust: bool,
    /// Confidence level in percent.
    #[arg(long, default_value_t = 95.0)]
    level: f64,
    /// Starting values as a JSON array in packing order.
    #[arg(long)]
    from: Option<String>,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Gradient tolerance (largest absolute component).
    #[arg(long, default_value_t = 1e-6)]
    gtol: f64,
    /// Write the fit as JSON.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Long-format CSV file.
    input: PathBuf,
    /// Fit JSON written by `fit --output`.
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    columns: ColumnArgs,
    /// Draws per individual (default: as in the fit).
    #[arg(long)]
    nrep: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
    /// Output CSV (default: stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BetasArgs {
    /// Long-format CSV file.
    input: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    columns: ColumnArgs,
    /// Output CSV with one row per individual.
    #[arg(long)]
    saving: PathBuf,
    /// Overwrite an existing output file.
    #[arg(long)]
    replace: bool,
    /// Write `<attr>_hist.svg` next to the output for these attributes
    /// (all random attributes if none are named).
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    plot: Option<Vec<String>>,
    /// Multiply these attributes' betas by -1 before saving.
    #[arg(long, value_delimiter = ',')]
    negate: Vec<String>,
    #[arg(long)]
    nrep: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
}

#[derive(Args, Debug)]
pub struct LognormalArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Log-normal attribute.
    attr: String,
    /// Report for the sign-reversed coefficient.
    #[arg(long)]
    negate: bool,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
pub struct ReshapeArgs {
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// `name=prefix`: columns `prefix1..prefixJ` become column `name`.
    #[arg(long, required = true)]
    stub: Vec<String>,
    /// Columns identifying a row (individual and choice situation).
    #[arg(long, value_delimiter = ',', required = true)]
    ids: Vec<String>,
    /// Number of alternatives.
    #[arg(long)]
    alternatives: usize,
    /// Column holding the chosen alternative (1-based).
    #[arg(long)]
    choice: Option<String>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    input: PathBuf,
    #[arg(long)]
    column: String,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    title: Option<String>,
}

#[derive(Args, Debug)]
pub struct DrawsArgs {
    #[arg(long)]
    individuals: usize,
    #[arg(long)]
    dims: usize,
    #[arg(long, default_value_t = 50)]
    nrep: usize,
    #[arg(long, default_value_t = 15)]
    burn: usize,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Fit(args) => commands::fit(args),
        Command::Predict(args) => commands::predict(args),
        Command::Betas(args) => commands::betas(args),
        Command::Lognormal(args) => commands::lognormal(args),
        Command::Reshape(args) => commands::reshape(args),
        Command::Plot(args) => commands::plot(args),
        Command::Draws(args) => commands::draws(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
