//! Predicted probabilities, individual-level coefficients, log-normal
//! summaries, beta files and histograms.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ChoiceDataset;
use crate::draws::{DrawError, DrawSet};
use crate::estimation::FitResult;
use crate::regret::{realize_into, Coefficient, Distribution, Model, ParameterVector, PanelData, Scratch};
use crate::stats::log_sum_exp;

#[derive(Debug, Error)]
pub enum PostEstimationError {
    #[error("fit does not match the data: {0}")]
    SpecMismatch(String),
    #[error("the fit has no random coefficients")]
    NoRandomCoefficients,
    #[error("`{0}` is not a log-normal random attribute of the fit")]
    AttrNotLognormal(String),
    #[error("{0} already exists; pass replace to overwrite")]
    FileExists(PathBuf),
    #[error("no values to plot")]
    EmptyInput,
    #[error("values to plot must be finite")]
    NonFinite,
    #[error("malformed beta file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Draw(#[from] DrawError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PostEstimationError>;

/// Resolves the fitted model against `ds`.
fn resolve(ds: &ChoiceDataset, fit: &FitResult) -> Result<(Model, ParameterVector)> {
    let model = Model::new(fit.spec.clone(), ds).map_err(|e| PostEstimationError::SpecMismatch(e.to_string()))?;
    if fit.spec.use_asc && ds.alternative_labels != fit.alternative_labels {
        return Err(PostEstimationError::SpecMismatch(format!(
            "alternatives {:?} differ from the fitted {:?}",
            ds.alternative_labels, fit.alternative_labels
        )));
    }
    let theta = ParameterVector::unpack(&model, &fit.theta())
        .map_err(|e| PostEstimationError::SpecMismatch(e.to_string()))?;
    Ok((model, theta))
}

fn draws_for(ds: &ChoiceDataset, model: &Model, nrep: usize, burn: usize) -> Result<DrawSet> {
    if model.n_random() == 0 {
        Ok(DrawSet::degenerate(ds.n_individuals()))
    } else {
        Ok(DrawSet::halton(ds.n_individuals(), model.n_random(), nrep, burn)?)
    }
}

/// Simulated choice probability of every data row, indexed by
/// [`crate::dataset::Alternative::row`]. Classical fits use the closed form.
pub fn predict_probabilities(ds: &ChoiceDataset, fit: &FitResult, nrep: usize, burn: usize) -> Result<Vec<f64>> {
    let per_individual = situation_probabilities(ds, fit, nrep, burn)?;
    let mut out = vec![f64::NAN; ds.n_rows()];
    for (block, probs) in ds.individuals.iter().zip(per_individual) {
        for (sit, p) in block.situations.iter().zip(probs) {
            for (alt, &v) in sit.alternatives.iter().zip(&p.mean) {
                out[alt.row] = v;
            }
        }
    }
    Ok(out)
}

struct SituationProbabilities {
    /// `(1/R) Σ_r P(β^r)` per alternative.
    mean: Vec<f64>,
    /// `P_chosen(β^r)` per draw.
    chosen_by_draw: Vec<f64>,
}

fn situation_probabilities(
    ds: &ChoiceDataset,
    fit: &FitResult,
    nrep: usize,
    burn: usize,
) -> Result<Vec<Vec<SituationProbabilities>>> {
    let (model, theta) = resolve(ds, fit)?;
    let draws = draws_for(ds, &model, nrep, burn)?;
    let panel = PanelData::compile(&model, ds);
    let asc = theta.asc_by_alternative(&model);
    let reps = draws.nrep();
    Ok(panel
        .individuals
        .par_iter()
        .enumerate()
        .map(|(n, ind)| {
            let mut scratch = Scratch::default();
            let mut beta = Vec::new();
            let mut out: Vec<SituationProbabilities> = ind
                .situations
                .iter()
                .map(|s| SituationProbabilities {
                    mean: vec![0.0; s.n_alternatives()],
                    chosen_by_draw: Vec::with_capacity(reps),
                })
                .collect();
            for r in 0..reps {
                realize_into(&model, &theta, &draws.draw(n, r), &mut beta);
                for (sit, acc) in ind.situations.iter().zip(out.iter_mut()) {
                    let p = sit.probabilities(&beta, &asc, &mut scratch);
                    acc.mean.iter_mut().zip(&p).for_each(|(m, v)| *m += v);
                    acc.chosen_by_draw.push(p[sit.chosen()]);
                }
            }
            for acc in &mut out {
                acc.mean.iter_mut().for_each(|m| *m /= reps as f64);
            }
            out
        })
        .collect())
}

/// Log-likelihood rebuilt from the per-draw situation probabilities used for
/// prediction: `Σ_n ln{(1/R) Σ_r Π_s P_ns(β^r)}`.
pub fn recombined_loglik(ds: &ChoiceDataset, fit: &FitResult, nrep: usize, burn: usize) -> Result<f64> {
    let per_individual = situation_probabilities(ds, fit, nrep, burn)?;
    Ok(per_individual
        .iter()
        .map(|sits| {
            let reps = sits.first().map_or(1, |s| s.chosen_by_draw.len());
            let logs: Vec<f64> = (0..reps)
                .map(|r| sits.iter().map(|s| s.chosen_by_draw[r].ln()).sum())
                .collect();
            log_sum_exp(&logs) - (reps as f64).ln()
        })
        .sum())
}

/// Conditional means of the random coefficients, one row per individual.
#[derive(Clone, Debug, PartialEq)]
pub struct IndividualBetaTable {
    pub id_name: String,
    /// Random attributes, in the order they were declared.
    pub attr_names: Vec<String>,
    pub rows: Vec<(i64, Vec<f64>)>,
}

impl IndividualBetaTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, attr: &str) -> Option<Vec<f64>> {
        let k = self.attr_names.iter().position(|a| a == attr)?;
        Some(self.rows.iter().map(|(_, v)| v[k]).collect())
    }
}

/// Per-individual draw weights `w_r ∝ P_n(y_n | β^r)` and realized random
/// coefficients `β^r` (coefficient scale) for every draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalDraws {
    pub weights: Vec<f64>,
    /// `draws[r][k]` is random attribute `k` at draw `r`.
    pub draws: Vec<Vec<f64>>,
}

pub fn conditional_draws(
    ds: &ChoiceDataset,
    fit: &FitResult,
    nrep: usize,
    burn: usize,
) -> Result<Vec<ConditionalDraws>> {
    let (model, theta) = resolve(ds, fit)?;
    if model.n_random() == 0 {
        return Err(PostEstimationError::NoRandomCoefficients);
    }
    let draws = draws_for(ds, &model, nrep, burn)?;
    let panel = PanelData::compile(&model, ds);
    let asc = theta.asc_by_alternative(&model);
    let mut random_terms = vec![0; model.n_random()];
    for (t, term) in model.terms().iter().enumerate() {
        if let Coefficient::Random(k) = term.coefficient {
            random_terms[k] = t;
        }
    }
    Ok(panel
        .individuals
        .par_iter()
        .enumerate()
        .map(|(n, ind)| {
            let mut scratch = Scratch::default();
            let mut beta = Vec::new();
            let mut logs = Vec::with_capacity(nrep);
            let mut realized = Vec::with_capacity(nrep);
            for r in 0..draws.nrep() {
                realize_into(&model, &theta, &draws.draw(n, r), &mut beta);
                logs.push(ind.sequence_log_prob(&beta, &asc, &mut scratch));
                realized.push(random_terms.iter().map(|&t| beta[t]).collect());
            }
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            ConditionalDraws {
                weights,
                draws: realized,
            }
        })
        .collect())
}

/// `β̄_n = Σ_r w_r β^r` for every individual and random attribute.
pub fn individual_betas(ds: &ChoiceDataset, fit: &FitResult, nrep: usize, burn: usize) -> Result<IndividualBetaTable> {
    let conditional = conditional_draws(ds, fit, nrep, burn)?;
    let k = fit.spec.random_attrs.len();
    let rows = ds
        .individuals
        .iter()
        .zip(conditional)
        .map(|(block, c)| {
            let mut mean = vec![0.0; k];
            for (w, d) in c.weights.iter().zip(&c.draws) {
                mean.iter_mut().zip(d).for_each(|(m, v)| *m += w * v);
            }
            (block.individual_id, mean)
        })
        .collect();
    Ok(IndividualBetaTable {
        id_name: ds.id_column.clone().unwrap_or_else(|| "id".to_string()),
        attr_names: fit.spec.random_attrs.clone(),
        rows,
    })
}

/// A value with its delta-method standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Back-transformed moments of a log-normal coefficient `exp(b + s z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LognormalSummary {
    pub attr: String,
    /// `+1` or `-1`, applied to the median and mean.
    pub sign: f64,
    pub median: Estimate,
    pub mean: Estimate,
    pub sd: Estimate,
}

/// Median, mean and standard deviation of a log-normal coefficient with
/// delta-method standard errors from the `(b, s)` covariance block.
pub fn lognormal_summary(fit: &FitResult, attr: &str, negate: bool) -> Result<LognormalSummary> {
    let spec = &fit.spec;
    let k = spec
        .random_attrs
        .iter()
        .position(|a| a == attr)
        .filter(|&k| spec.distribution(k) == Distribution::LogNormal)
        .ok_or_else(|| PostEstimationError::AttrNotLognormal(attr.to_string()))?;
    let b = fit.theta_hat.rand_location[k];
    let s = fit.theta_hat.rand_scale[k];
    let loc = spec.fixed_attrs.len() + k;
    let scale = loc + spec.random_attrs.len();
    let cov = [
        [fit.covariance[(loc, loc)], fit.covariance[(loc, scale)]],
        [fit.covariance[(scale, loc)], fit.covariance[(scale, scale)]],
    ];
    let (values, jacobian) = lognormal_moments(b, s);
    let se = |j: [f64; 2]| {
        let v = j[0] * (cov[0][0] * j[0] + cov[0][1] * j[1]) + j[1] * (cov[1][0] * j[0] + cov[1][1] * j[1]);
        v.max(0.0).sqrt()
    };
    let sign = if negate { -1.0 } else { 1.0 };
    Ok(LognormalSummary {
        attr: attr.to_string(),
        sign,
        median: Estimate {
            value: sign * values[0],
            se: se(jacobian[0]),
        },
        mean: Estimate {
            value: sign * values[1],
            se: se(jacobian[1]),
        },
        sd: Estimate {
            value: values[2],
            se: se(jacobian[2]),
        },
    })
}

/// `[median, mean, sd]` of `exp(b + s z)` and their gradients in `(b, s)`.
///
/// At `s = 0` the sd is not differentiable in `s`; the right derivative
/// (the mean) is used.
pub fn lognormal_moments(b: f64, s: f64) -> ([f64; 3], [[f64; 2]; 3]) {
    let median = b.exp();
    let mean = (b + 0.5 * s * s).exp();
    let q = (s * s).exp_m1().sqrt();
    let sd = mean * q;
    let dsd_ds = if q > 0.0 {
        s * sd + mean * s * (s * s).exp() / q
    } else {
        mean
    };
    (
        [median, mean, sd],
        [[median, 0.0], [mean, s * mean], [sd, dsd_ds]],
    )
}

/// Writes the table as CSV with header `id, attr...`.
pub fn write_beta_file(table: &IndividualBetaTable, path: impl AsRef<Path>, replace: bool) -> Result<()> {
    let path = path.as_ref();
    let file = if replace {
        OpenOptions::new().write(true).create(true).truncate(true).open(path)?
    } else {
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => PostEstimationError::FileExists(path.to_path_buf()),
                _ => e.into(),
            })?
    };
    let mut writer = csv::Writer::from_writer(file);
    let mut rows: Vec<&(i64, Vec<f64>)> = table.rows.iter().collect();
    rows.sort_by_key(|(id, _)| *id);
    writer.write_record(std::iter::once(table.id_name.as_str()).chain(table.attr_names.iter().map(String::as_str)))?;
    for (id, values) in rows {
        writer.write_record(std::iter::once(id.to_string()).chain(values.iter().map(|v| v.to_string())))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_beta_file(path: impl AsRef<Path>) -> Result<IndividualBetaTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let Some(id_name) = headers.get(0) else {
        return Err(PostEstimationError::Malformed("empty header".into()));
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let bad = |f: &str| PostEstimationError::Malformed(format!("cannot parse `{f}`"));
        let id = record[0].trim().parse().map_err(|_| bad(&record[0]))?;
        let values = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse().map_err(|_| bad(f)))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((id, values));
    }
    Ok(IndividualBetaTable {
        id_name: id_name.to_string(),
        attr_names: headers.iter().skip(1).map(String::from).collect(),
        rows,
    })
}

/// Number of histogram bins for `n` values: `ceil(sqrt(n))` within `[5, 50]`.
pub fn bin_count(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).clamp(5, 50)
}

/// Frequency counts over equal-width bins spanning the data, with the bin
/// edges. Identical values are centered in a unit-width range.
pub fn histogram(values: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if values.is_empty() {
        return Err(PostEstimationError::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PostEstimationError::NonFinite);
    }
    let bins = bin_count(values.len());
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let i = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok((edges, counts))
}

/// Writes a standalone SVG histogram of `values`.
pub fn histogram_svg(values: &[f64], title: &str, x_label: &str, path: impl AsRef<Path>) -> Result<()> {
    let svg = render_histogram(values, title, x_label)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(svg.as_bytes())?;
    Ok(())
}

pub fn render_histogram(values: &[f64], title: &str, x_label: &str) -> Result<String> {
    let (edges, counts) = histogram(values)?;
    let (width, height) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 60.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let max_count = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let bar_w = plot_w / counts.len() as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (i, &c) in counts.iter().enumerate() {
        let h = plot_h * c as f64 / max_count;
        let _ = writeln!(
            svg,
            r##"<rect class="bin" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0" stroke="white" data-count="{c}" data-lower="{}" data-upper="{}"/>"##,
            left + bar_w * i as f64,
            top + plot_h - h,
            bar_w,
            h,
            edges[i],
            edges[i + 1]
        );
    }
    let axis_y = top + plot_h;
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#,
        left + plot_w
    );
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{axis_y}" stroke="black"/>"#);
    for (i, edge) in [edges[0], edges[edges.len() / 2], edges[edges.len() - 1]].iter().enumerate() {
        let x = left + plot_w * i as f64 / 2.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{:.3}</text>"#,
            axis_y + 16.0,
            edge
        );
    }
    for frac in [0.0, 0.5, 1.0] {
        let y = axis_y - plot_h * frac;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{y:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            left - 6.0,
            (max_count * frac).round()
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        left + plot_w / 2.0,
        height - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {})">Frequency</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
