use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use mixrrm::dataset::{cluster_index, load_long_csv, reshape_wide_to_long, LongColumns, WideLayout};
use mixrrm::draws::DrawSet;
use mixrrm::estimation::{
    fit_classical, fit_mixed, CovarianceChoice, EstimationError, FitOptions, FitResult,
};
use mixrrm::optimize::BfgsOptions;
use mixrrm::postestimation::{
    histogram_svg, individual_betas, lognormal_summary, predict_probabilities, write_beta_file,
    LognormalSummary,
};
use mixrrm::regret::ModelSpec;

use crate::{BetasArgs, ColumnArgs, DrawsArgs, FitArgs, LognormalArgs, PlotArgs, PredictArgs, ReshapeArgs};

const NON_CONVERGENCE: u8 = 2;

fn required(value: Option<String>, flag: &str) -> Result<String> {
    value.ok_or_else(|| anyhow!("--{flag} is required"))
}

/// Column names from the flags, falling back to those recorded in a fit.
fn resolve_columns(flags: ColumnArgs, recorded: Option<&LongColumns>, attributes: Vec<String>) -> Result<LongColumns> {
    let pick = |flag: Option<String>, stored: Option<&String>, name: &str| {
        required(flag.or_else(|| stored.cloned()), name)
    };
    Ok(LongColumns::new(
        pick(flags.id, recorded.map(|c| &c.id), "id")?,
        pick(flags.group, recorded.map(|c| &c.group), "group")?,
        pick(flags.alternatives, recorded.map(|c| &c.alternative), "alternatives")?,
        pick(flags.choice, recorded.map(|c| &c.choice), "choice")?,
        attributes,
    ))
}

fn read_fit(path: &Path) -> Result<FitResult> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    FitResult::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn model_attributes(spec: &ModelSpec) -> Vec<String> {
    spec.fixed_attrs.iter().chain(&spec.random_attrs).cloned().collect()
}

pub fn fit(args: FitArgs) -> Result<ExitCode> {
    if args.fixed.is_empty() && args.rand.is_empty() {
        bail!("no attributes given; use --fixed and/or --rand");
    }
    let mut spec = if args.rand.is_empty() {
        if args.ln > 0 {
            bail!("--ln needs random attributes (--rand)");
        }
        ModelSpec::classical(args.fixed.clone())
    } else {
        ModelSpec::mixed(args.fixed.clone(), args.rand.clone(), args.ln)
    };
    if !args.noconstant {
        spec = spec.with_asc(args.basealternative);
    } else if args.basealternative.is_some() {
        bail!("--basealternative has no effect with --noconstant");
    }

    let mut columns = resolve_columns(args.columns, None, model_attributes(&spec))?;
    if let Some(cluster) = &args.cluster {
        if cluster != &columns.id && !columns.attributes.contains(cluster) {
            columns = columns.with_extras(vec![cluster.clone()]);
        }
    }
    let ds = load_long_csv(&args.input, &columns)
        .with_context(|| format!("loading {}", args.input.display()))?;

    let covariance = match (&args.cluster, args.robust) {
        (Some(col), _) => CovarianceChoice::Cluster(cluster_index(&ds, Some(col))?),
        (None, true) => CovarianceChoice::Robust,
        (None, false) => CovarianceChoice::Hessian,
    };
    let start = match &args.from {
        Some(text) => Some(serde_json::from_str::<Vec<f64>>(text).context("--from must be a JSON array of numbers")?),
        None => None,
    };
    let opts = FitOptions {
        nrep: args.nrep,
        burn: args.burn,
        level: args.level,
        optimizer: BfgsOptions {
            max_iter: args.max_iter,
            gtol: args.gtol,
            ..BfgsOptions::default()
        },
        covariance,
        start,
        ..FitOptions::default()
    };
    if !(opts.level > 0.0 && opts.level < 100.0) {
        bail!("--level must lie strictly between 0 and 100");
    }

    let outcome = if spec.is_mixed() {
        fit_mixed(&ds, &spec, &opts)
    } else {
        fit_classical(&ds, &spec, &opts)
    };
    let (mut result, code) = match outcome {
        Ok(r) => (r, ExitCode::SUCCESS),
        Err(EstimationError::NonConvergence { result, reason, .. }) => {
            eprintln!("warning: estimation did not converge ({reason}); results are not reliable");
            (*result, ExitCode::from(NON_CONVERGENCE))
        }
        Err(e) => return Err(e.into()),
    };
    result.columns = Some(columns);

    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", format_table(&result));
    if let Some(path) = &args.output {
        fs::write(path, result.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(code)
}

fn format_table(fit: &FitResult) -> String {
    let title = if fit.is_mixed() {
        "Mixed random regret minimization model"
    } else {
        "Random regret minimization model"
    };
    let mut out = String::new();
    out += &format!("{title}\n");
    out += &format!("Number of individuals = {}\n", fit.n_individuals);
    out += &format!("Number of choice situations = {}\n", fit.n_situations);
    if fit.is_mixed() {
        out += &format!("Halton draws = {} (burn {})\n", fit.nrep, fit.burn);
    }
    out += &format!("Log likelihood = {:.4}\n", fit.loglik);
    out += &format!("Covariance: {:?}", fit.covariance_kind).to_lowercase();
    if let Some(c) = fit.n_clusters {
        out += &format!(" ({c} clusters)");
    }
    out += "\n\n";
    let width = fit.parameter_names.iter().map(String::len).max().unwrap_or(4).max(9);
    let level = format!("[{}% CI]", fit.level);
    out += &format!(
        "{:<width$} {:>10} {:>10} {:>8} {:>7} {:>21}\n",
        "Parameter", "Coef.", "Std. Err.", "z", "P>|z|", level
    );
    for row in fit.estimates() {
        out += &format!(
            "{:<width$} {:>10.4} {:>10.4} {:>8.2} {:>7.3} {:>10.4} {:>10.4}\n",
            row.name, row.coef, row.se, row.z, row.p, row.ci_low, row.ci_high
        );
    }
    if fit.spec.ln_count > 0 {
        out += "\nmean:/sd: rows of log-normal attributes are b and s of ln(beta).\n";
    }
    out
}

pub fn predict(args: PredictArgs) -> Result<ExitCode> {
    let fit = read_fit(&args.fit)?;
    let columns = resolve_columns(args.columns, fit.columns.as_ref(), model_attributes(&fit.spec))?;
    let ds = load_long_csv(&args.input, &columns)
        .with_context(|| format!("loading {}", args.input.display()))?;
    let nrep = args.nrep.unwrap_or(if fit.nrep > 0 { fit.nrep } else { 50 });
    let burn = args.burn.unwrap_or(if fit.is_mixed() { fit.burn } else { 15 });
    let probs = predict_probabilities(&ds, &fit, nrep, burn)?;

    let mut reader = csv::Reader::from_path(&args.input)?;
    let mut headers = reader.headers()?.clone();
    headers.push_field("pred_p");
    let sink: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(&headers)?;
    for (row, record) in reader.records().enumerate() {
        let mut record = record?;
        record.push_field(&probs[row].to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(ExitCode::SUCCESS)
}

pub fn betas(args: BetasArgs) -> Result<ExitCode> {
    let fit = read_fit(&args.fit)?;
    if !fit.is_mixed() {
        bail!("no random coefficients in this fit");
    }
    for attr in args.negate.iter().chain(args.plot.iter().flatten()) {
        if !fit.spec.random_attrs.contains(attr) {
            bail!("`{attr}` is not a random attribute of the fit");
        }
    }
    let columns = resolve_columns(args.columns, fit.columns.as_ref(), model_attributes(&fit.spec))?;
    let ds = load_long_csv(&args.input, &columns)
        .with_context(|| format!("loading {}", args.input.display()))?;
    let mut table = individual_betas(
        &ds,
        &fit,
        args.nrep.unwrap_or(fit.nrep),
        args.burn.unwrap_or(fit.burn),
    )?;
    for attr in &args.negate {
        let k = table.attr_names.iter().position(|a| a == attr).expect("checked above");
        table.rows.iter_mut().for_each(|(_, v)| v[k] = -v[k]);
    }
    write_beta_file(&table, &args.saving, args.replace)?;
    eprintln!("saved {} individuals to {}", table.len(), args.saving.display());

    if let Some(requested) = &args.plot {
        let attrs = if requested.is_empty() { &table.attr_names } else { requested };
        let dir = args.saving.parent().map(Path::to_path_buf).unwrap_or_default();
        for attr in attrs {
            let values = table.column(attr).expect("checked above");
            let path: PathBuf = dir.join(format!("{attr}_hist.svg"));
            histogram_svg(&values, &format!("Distribution of {attr} coefficient"), attr, &path)?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn lognormal(args: LognormalArgs) -> Result<ExitCode> {
    let fit = read_fit(&args.fit)?;
    let summary = lognormal_summary(&fit, &args.attr, args.negate)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{}", format_lognormal(&summary));
    }
    Ok(ExitCode::SUCCESS)
}

fn format_lognormal(s: &LognormalSummary) -> String {
    let mut out = format!("Log-normal coefficient {}", s.attr);
    if s.sign < 0.0 {
        out += " (sign reversed)";
    }
    out += "\n";
    out += &format!("{:<8} {:>10} {:>10}\n", "", "Estimate", "Std. Err.");
    for (name, e) in [("median", s.median), ("mean", s.mean), ("sd", s.sd)] {
        out += &format!("{:<8} {:>10.4} {:>10.4}\n", name, e.value, e.se);
    }
    out
}

pub fn reshape(args: ReshapeArgs) -> Result<ExitCode> {
    let stubs = args
        .stub
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(n, p)| (n.to_string(), p.to_string()))
                .ok_or_else(|| anyhow!("--stub expects name=prefix, got `{s}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut layout = WideLayout::new(stubs, args.ids, args.alternatives);
    if let Some(choice) = args.choice {
        layout = layout.with_choice(choice);
    }
    let table = reshape_wide_to_long(&args.input, &layout)?;
    table.save(&args.output)?;
    Ok(ExitCode::SUCCESS)
}

pub fn plot(args: PlotArgs) -> Result<ExitCode> {
    let mut reader = csv::Reader::from_path(&args.input)?;
    let col = reader
        .headers()?
        .iter()
        .position(|h| h == args.column)
        .ok_or_else(|| anyhow!("column `{}` not found", args.column))?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let field = record.get(col).unwrap_or("").trim();
        values.push(
            field
                .parse::<f64>()
                .with_context(|| format!("row {}: `{field}` is not a number", i + 1))?,
        );
    }
    let title = args
        .title
        .unwrap_or_else(|| format!("Distribution of {} coefficient", args.column));
    histogram_svg(&values, &title, &args.column, &args.output)?;
    Ok(ExitCode::SUCCESS)
}

pub fn draws(args: DrawsArgs) -> Result<ExitCode> {
    let set = DrawSet::halton(args.individuals, args.dims, args.nrep, args.burn)?;
    match &args.output {
        Some(path) => set.save_csv(path, None)?,
        None => set.write_csv(io::stdout().lock(), None)?,
    }
    Ok(ExitCode::SUCCESS)
}
