//! Maximum (simulated) likelihood estimation and covariance estimators.
//!
//! The classical model maximizes `Σ_n Σ_s ln P(chosen)`. The mixed model
//! maximizes `Σ_n ln{(1/R) Σ_r P_n(α, β^r)}` with the Halton draws held
//! fixed for the whole optimization. Both share one objective: a classical
//! fit is a simulated fit with a single draw and no random dimensions.
//!
//! Per-individual contributions are evaluated with rayon and summed in
//! dataset order, so results are bit-reproducible regardless of the thread
//! count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ChoiceDataset, ClusterMap, LongColumns};
use crate::draws::{DrawError, DrawSet};
use crate::optimize::{self, BfgsOptions, Termination};
use crate::regret::{Distribution, Model, ModelError, ModelSpec, PanelData, ParameterVector};
use crate::stats::two_sided_p;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Draw(#[from] DrawError),
    #[error("optimizer stopped before convergence ({reason}); gradient norm {gradient_norm:.3e}")]
    NonConvergence {
        reason: String,
        gradient_norm: f64,
        result: Box<FitResult>,
    },
    #[error("Hessian is singular or not negative definite at the estimates")]
    SingularHessian,
    #[error("starting vector has length {found}, expected {expected}")]
    InvalidStart { expected: usize, found: usize },
    #[error("a classical fit cannot have random attributes")]
    RandomInClassical,
    #[error("a mixed fit needs at least one random attribute")]
    NoRandomAttributes,
    #[error("draw set covers {found_individuals} individuals x {found_dims} dimensions, expected {individuals} x {dims}")]
    DrawShape {
        individuals: usize,
        dims: usize,
        found_individuals: usize,
        found_dims: usize,
    },
    #[error("cluster map covers {found} individuals, expected {expected}")]
    ClusterShape { expected: usize, found: usize },
    #[error("cluster-robust covariance needs at least 2 clusters, found {0}")]
    InsufficientClusters(usize),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Hessian,
    Robust,
    Cluster,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum CovarianceChoice {
    #[default]
    Hessian,
    Robust,
    Cluster(ClusterMap),
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub nrep: usize,
    pub burn: usize,
    /// Confidence level in percent.
    pub level: f64,
    pub optimizer: BfgsOptions,
    pub covariance: CovarianceChoice,
    /// Starting values in packing order.
    pub start: Option<Vec<f64>>,
    /// Relative step of the finite-difference Hessian.
    pub hessian_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            nrep: 50,
            burn: 15,
            level: 95.0,
            optimizer: BfgsOptions::default(),
            covariance: CovarianceChoice::Hessian,
            start: None,
            hessian_step: 1e-5,
        }
    }
}

/// Simulated log-likelihood over a dataset with a fixed draw set.
pub struct SimulatedLikelihood<'a> {
    model: &'a Model,
    panel: PanelData,
    draws: DrawSet,
}

impl<'a> SimulatedLikelihood<'a> {
    pub fn new(model: &'a Model, ds: &ChoiceDataset, draws: DrawSet) -> Result<Self> {
        if draws.n_individuals() != ds.n_individuals() || draws.dims() != model.n_random() {
            return Err(EstimationError::DrawShape {
                individuals: ds.n_individuals(),
                dims: model.n_random(),
                found_individuals: draws.n_individuals(),
                found_dims: draws.dims(),
            });
        }
        Ok(Self {
            model,
            panel: PanelData::compile(model, ds),
            draws,
        })
    }

    /// Classical log-likelihood (no random dimensions, one draw).
    pub fn classical(model: &'a Model, ds: &ChoiceDataset) -> Result<Self> {
        Self::new(model, ds, DrawSet::degenerate(ds.n_individuals()))
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn draws(&self) -> &DrawSet {
        &self.draws
    }

    fn unpack(&self, theta: &[f64]) -> ParameterVector {
        ParameterVector::unpack(self.model, theta).expect("parameter length checked by caller")
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let params = self.unpack(theta);
        let nrep = self.draws.nrep();
        let terms: Vec<f64> = self
            .panel
            .individuals
            .par_iter()
            .enumerate()
            .map(|(n, ind)| ind.simulated_loglik(self.model, &params, self.draws.individual(n), nrep, None))
            .collect();
        terms.iter().sum()
    }

    /// Per-individual log-likelihood terms and gradients (scores).
    pub fn contributions(&self, theta: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let params = self.unpack(theta);
        let nrep = self.draws.nrep();
        let p = self.model.n_params();
        self.panel
            .individuals
            .par_iter()
            .enumerate()
            .map(|(n, ind)| {
                let mut g = vec![0.0; p];
                let v = ind.simulated_loglik(self.model, &params, self.draws.individual(n), nrep, Some(&mut g));
                (v, g)
            })
            .collect()
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut grad = vec![0.0; self.model.n_params()];
        for (v, g) in self.contributions(theta) {
            total += v;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        (total, grad)
    }

    /// Hessian by central differences of the analytic gradient, symmetrized.
    pub fn numeric_hessian(&self, theta: &[f64], relative_step: f64) -> DMatrix<f64> {
        let p = theta.len();
        let mut h = DMatrix::zeros(p, p);
        for i in 0..p {
            let step = relative_step * (1.0 + theta[i].abs());
            let mut up = theta.to_vec();
            let mut down = theta.to_vec();
            up[i] += step;
            down[i] -= step;
            let (_, gu) = self.value_and_gradient(&up);
            let (_, gd) = self.value_and_gradient(&down);
            for j in 0..p {
                h[(j, i)] = (gu[j] - gd[j]) / (2.0 * step);
            }
        }
        (&h + h.transpose()) * 0.5
    }
}

/// Estimates and inference for a fitted model.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub spec: ModelSpec,
    /// Model attributes in the order the regret kernel sums them.
    pub attribute_order: Vec<String>,
    pub alternative_labels: Vec<i64>,
    pub parameter_names: Vec<String>,
    /// Signed estimates in packing order.
    pub theta_hat: ParameterVector,
    pub loglik: f64,
    pub n_individuals: usize,
    pub n_situations: usize,
    pub n_parameters: usize,
    pub covariance: DMatrix<f64>,
    pub covariance_kind: CovarianceKind,
    pub n_clusters: Option<usize>,
    /// Reported coefficients: the estimates, with `|s|` for scale parameters.
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub z_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub level: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Log-likelihood at the start and after every accepted step.
    pub trajectory: Vec<f64>,
    pub nrep: usize,
    pub burn: usize,
    pub warnings: Vec<String>,
    /// Input columns, recorded by front-ends for post-estimation.
    pub columns: Option<LongColumns>,
}

impl FitResult {
    /// Inference at given parameters and covariance, without optimizing.
    /// Sample sizes and the log-likelihood are left empty (0 and NaN).
    pub fn from_parameters(model: &Model, theta: &[f64], covariance: DMatrix<f64>, level: f64) -> Result<Self> {
        let theta_hat = ParameterVector::unpack(model, theta)?;
        let scale_slots: Vec<usize> = (0..model.n_random()).map(|k| model.random_indices(k).1).collect();
        let coefficients: Vec<f64> = theta
            .iter()
            .enumerate()
            .map(|(i, &v)| if scale_slots.contains(&i) { v.abs() } else { v })
            .collect();
        let std_errors: Vec<f64> = (0..theta.len()).map(|i| covariance[(i, i)].max(0.0).sqrt()).collect();
        let z_stats: Vec<f64> = coefficients.iter().zip(&std_errors).map(|(c, s)| c / s).collect();
        let p_values = z_stats.iter().map(|&z| two_sided_p(z)).collect();
        let q = crate::draws::inverse_normal_cdf(0.5 + level / 200.0)?;
        Ok(Self {
            spec: model.spec().clone(),
            attribute_order: model.terms().iter().map(|t| t.name.clone()).collect(),
            alternative_labels: model.alternative_labels().to_vec(),
            parameter_names: model.parameter_names(),
            theta_hat,
            loglik: f64::NAN,
            n_individuals: 0,
            n_situations: 0,
            n_parameters: model.n_params(),
            covariance,
            covariance_kind: CovarianceKind::Hessian,
            n_clusters: None,
            ci_lower: coefficients.iter().zip(&std_errors).map(|(c, s)| c - q * s).collect(),
            ci_upper: coefficients.iter().zip(&std_errors).map(|(c, s)| c + q * s).collect(),
            coefficients,
            std_errors,
            z_stats,
            p_values,
            level,
            converged: false,
            iterations: 0,
            gradient_norm: f64::NAN,
            trajectory: Vec::new(),
            nrep: 0,
            burn: 0,
            warnings: Vec::new(),
            columns: None,
        })
    }

    /// The model this fit was estimated with.
    pub fn model(&self) -> Model {
        Model::from_parts(
            self.spec.clone(),
            &self.attribute_order,
            self.alternative_labels.clone(),
        )
        .expect("fit result holds a consistent model")
    }

    pub fn theta(&self) -> Vec<f64> {
        self.theta_hat.pack()
    }

    pub fn is_mixed(&self) -> bool {
        self.spec.is_mixed()
    }

    pub fn estimates(&self) -> Vec<EstimateRow> {
        (0..self.n_parameters)
            .map(|i| EstimateRow {
                name: self.parameter_names[i].clone(),
                coef: self.coefficients[i],
                se: self.std_errors[i],
                z: self.z_stats[i],
                p: self.p_values[i],
                ci_low: self.ci_lower[i],
                ci_high: self.ci_upper[i],
            })
            .collect()
    }

    pub fn to_record(&self) -> FitRecord {
        FitRecord {
            estimates: self.estimates(),
            loglik: self.loglik,
            nrep: self.nrep,
            burn: self.burn,
            converged: self.converged,
            covariance_kind: self.covariance_kind,
            covariance: (0..self.n_parameters)
                .map(|i| self.covariance.row(i).iter().copied().collect())
                .collect(),
            theta: self.theta(),
            level: self.level,
            iterations: self.iterations,
            gradient_norm: self.gradient_norm,
            n_individuals: self.n_individuals,
            n_situations: self.n_situations,
            n_clusters: self.n_clusters,
            model: self.spec.clone(),
            attribute_order: self.attribute_order.clone(),
            alternative_labels: self.alternative_labels.clone(),
            columns: self.columns.clone(),
            warnings: self.warnings.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("fit record serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let record: FitRecord = serde_json::from_str(text)?;
        Ok(Self::from_record(record))
    }

    pub fn from_record(record: FitRecord) -> Self {
        let p = record.theta.len();
        let model = Model::from_parts(
            record.model.clone(),
            &record.attribute_order,
            record.alternative_labels.clone(),
        );
        let theta_hat = match &model {
            Ok(m) => ParameterVector::unpack(m, &record.theta).unwrap_or_else(|_| split_theta(&record)),
            Err(_) => split_theta(&record),
        };
        let col = |f: fn(&EstimateRow) -> f64| record.estimates.iter().map(f).collect::<Vec<_>>();
        Self {
            parameter_names: record.estimates.iter().map(|e| e.name.clone()).collect(),
            coefficients: col(|e| e.coef),
            std_errors: col(|e| e.se),
            z_stats: col(|e| e.z),
            p_values: col(|e| e.p),
            ci_lower: col(|e| e.ci_low),
            ci_upper: col(|e| e.ci_high),
            covariance: DMatrix::from_fn(p, p, |i, j| {
                record.covariance.get(i).and_then(|r| r.get(j)).copied().unwrap_or(f64::NAN)
            }),
            spec: record.model,
            attribute_order: record.attribute_order,
            alternative_labels: record.alternative_labels,
            theta_hat,
            loglik: record.loglik,
            n_individuals: record.n_individuals,
            n_situations: record.n_situations,
            n_parameters: p,
            covariance_kind: record.covariance_kind,
            n_clusters: record.n_clusters,
            level: record.level,
            converged: record.converged,
            iterations: record.iterations,
            gradient_norm: record.gradient_norm,
            trajectory: Vec::new(),
            nrep: record.nrep,
            burn: record.burn,
            warnings: record.warnings,
            columns: record.columns,
        }
    }
}

fn split_theta(record: &FitRecord) -> ParameterVector {
    let f = record.model.fixed_attrs.len();
    let k = record.model.random_attrs.len();
    let t = &record.theta;
    let at = |a: usize, b: usize| t.get(a.min(t.len())..b.min(t.len())).unwrap_or(&[]).to_vec();
    ParameterVector {
        fixed: at(0, f),
        rand_location: at(f, f + k),
        rand_scale: at(f + k, f + 2 * k),
        asc: at(f + 2 * k, t.len()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub name: String,
    #[serde(with = "nan_as_null")]
    pub coef: f64,
    #[serde(with = "nan_as_null")]
    pub se: f64,
    #[serde(with = "nan_as_null")]
    pub z: f64,
    #[serde(with = "nan_as_null")]
    pub p: f64,
    #[serde(with = "nan_as_null")]
    pub ci_low: f64,
    #[serde(with = "nan_as_null")]
    pub ci_high: f64,
}

/// JSON form of a [`FitResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub estimates: Vec<EstimateRow>,
    #[serde(with = "nan_as_null")]
    pub loglik: f64,
    pub nrep: usize,
    pub burn: usize,
    pub converged: bool,
    pub covariance_kind: CovarianceKind,
    #[serde(with = "nan_as_null::matrix")]
    pub covariance: Vec<Vec<f64>>,
    /// Signed estimates in packing order `[fixed | mean | sd | asc]`.
    pub theta: Vec<f64>,
    pub level: f64,
    pub iterations: usize,
    #[serde(with = "nan_as_null")]
    pub gradient_norm: f64,
    pub n_individuals: usize,
    pub n_situations: usize,
    #[serde(default)]
    pub n_clusters: Option<usize>,
    pub model: ModelSpec,
    pub attribute_order: Vec<String>,
    pub alternative_labels: Vec<i64>,
    #[serde(default)]
    pub columns: Option<LongColumns>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Non-finite values are written as JSON `null` and read back as NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod matrix {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(m: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
            let rows: Vec<Vec<Option<f64>>> = m
                .iter()
                .map(|r| r.iter().map(|v| v.is_finite().then_some(*v)).collect())
                .collect();
            s.collect_seq(rows)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
            let rows = Vec::<Vec<Option<f64>>>::deserialize(d)?;
            Ok(rows
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
                .collect())
        }
    }
}

/// `(-H)^{-1}` for the Hessian `H` of a log-likelihood at its maximum.
pub fn covariance_hessian(hessian: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let neg = -(hessian + hessian.transpose()) * 0.5;
    if neg.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::SingularHessian);
    }
    let chol = neg.cholesky().ok_or(EstimationError::SingularHessian)?;
    let inv = chol.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::SingularHessian);
    }
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Cluster-robust sandwich `A [C/(C-1) Σ_c g_c g_cᵀ] A` with `A = (-H)^{-1}`
/// and `g_c` the summed scores of cluster `c`.
pub fn covariance_cluster(
    hessian: &DMatrix<f64>,
    scores: &[Vec<f64>],
    clusters: &ClusterMap,
) -> Result<DMatrix<f64>> {
    if clusters.len() != scores.len() {
        return Err(EstimationError::ClusterShape {
            expected: scores.len(),
            found: clusters.len(),
        });
    }
    let c = clusters.n_clusters;
    if c < 2 {
        return Err(EstimationError::InsufficientClusters(c));
    }
    let bread = covariance_hessian(hessian)?;
    let p = bread.nrows();
    if c < p {
        log::warn!("{c} clusters for {p} parameters; cluster-robust covariance is rank deficient");
    }
    let mut sums = vec![DVector::<f64>::zeros(p); c];
    for (score, &cluster) in scores.iter().zip(&clusters.assignment) {
        sums[cluster] += DVector::from_column_slice(score);
    }
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for g in &sums {
        meat += g * g.transpose();
    }
    meat *= c as f64 / (c as f64 - 1.0);
    let v = &bread * meat * &bread;
    Ok((&v + v.transpose()) * 0.5)
}

/// Heteroskedasticity-robust sandwich: one cluster per individual.
pub fn covariance_robust(hessian: &DMatrix<f64>, scores: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    covariance_cluster(hessian, scores, &ClusterMap::singletons(scores.len()))
}

/// Fits a classical RRM model (no random coefficients).
pub fn fit_classical(ds: &ChoiceDataset, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if spec.is_mixed() {
        return Err(EstimationError::RandomInClassical);
    }
    let model = Model::new(spec.clone(), ds)?;
    let likelihood = SimulatedLikelihood::classical(&model, ds)?;
    let start = match &opts.start {
        Some(s) => checked_start(&model, s)?,
        None => vec![0.0; model.n_params()],
    };
    estimate(&likelihood, ds, start, opts, 0, 0)
}

/// Fits a mixed RRM model by maximum simulated likelihood with Halton draws.
///
/// Without explicit starting values, a classical fit on the same attributes
/// provides fixed coefficients and locations (`ln|β|` for log-normal ones,
/// `ln 0.1` if `β = 0`); scales start at 0.1 and ASCs at 0.
pub fn fit_mixed(ds: &ChoiceDataset, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if !spec.is_mixed() {
        return Err(EstimationError::NoRandomAttributes);
    }
    let model = Model::new(spec.clone(), ds)?;
    let draws = DrawSet::halton(ds.n_individuals(), model.n_random(), opts.nrep, opts.burn)?;
    let start = match &opts.start {
        Some(s) => checked_start(&model, s)?,
        None => mixed_start(ds, &model, opts)?,
    };
    fit_mixed_with_draws(ds, &model, draws, start, opts)
}

/// Mixed fit with an explicit draw set and starting vector.
pub fn fit_mixed_with_draws(
    ds: &ChoiceDataset,
    model: &Model,
    draws: DrawSet,
    start: Vec<f64>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let start = checked_start(model, &start)?;
    let (nrep, burn) = (draws.nrep(), draws.burn());
    let likelihood = SimulatedLikelihood::new(model, ds, draws)?;
    estimate(&likelihood, ds, start, opts, nrep, burn)
}

fn checked_start(model: &Model, start: &[f64]) -> Result<Vec<f64>> {
    if start.len() != model.n_params() {
        return Err(EstimationError::InvalidStart {
            expected: model.n_params(),
            found: start.len(),
        });
    }
    Ok(start.to_vec())
}

fn mixed_start(ds: &ChoiceDataset, model: &Model, opts: &FitOptions) -> Result<Vec<f64>> {
    let spec = model.spec();
    let classical_model = Model::new(spec.to_classical(), ds)?;
    let likelihood = SimulatedLikelihood::classical(&classical_model, ds)?;
    let outcome = maximize(&likelihood, vec![0.0; classical_model.n_params()], &opts.optimizer);
    if outcome.termination != Termination::GradientTolerance {
        log::warn!("preliminary classical fit did not converge; using its last iterate as start");
    }
    let beta = &outcome.x;
    let n_fixed = model.n_fixed();
    let mut start = ParameterVector::zeros(model);
    start.fixed.copy_from_slice(&beta[..n_fixed]);
    for k in 0..model.n_random() {
        let b = beta[n_fixed + k];
        start.rand_location[k] = match spec.distribution(k) {
            Distribution::Normal => b,
            Distribution::LogNormal if b != 0.0 => b.abs().ln(),
            Distribution::LogNormal => 0.1f64.ln(),
        };
        start.rand_scale[k] = 0.1;
    }
    Ok(start.pack())
}

/// BFGS on the negated log-likelihood. Reported values are log-likelihoods.
fn maximize(likelihood: &SimulatedLikelihood<'_>, start: Vec<f64>, opts: &BfgsOptions) -> optimize::BfgsOutcome {
    let mut outcome = optimize::minimize(
        |theta| {
            let (v, g) = likelihood.value_and_gradient(theta);
            (-v, g.into_iter().map(|x| -x).collect())
        },
        &start,
        opts,
    );
    outcome.value = -outcome.value;
    outcome.gradient.iter_mut().for_each(|g| *g = -*g);
    outcome.trajectory.iter_mut().for_each(|v| *v = -*v);
    outcome
}

fn estimate(
    likelihood: &SimulatedLikelihood<'_>,
    ds: &ChoiceDataset,
    start: Vec<f64>,
    opts: &FitOptions,
    nrep: usize,
    burn: usize,
) -> Result<FitResult> {
    let model = likelihood.model();
    let outcome = maximize(likelihood, start, &opts.optimizer);
    let converged = outcome.termination == Termination::GradientTolerance;
    let theta = outcome.x.clone();
    let mut warnings = Vec::new();

    let hessian = likelihood.numeric_hessian(&theta, opts.hessian_step);
    let (kind, n_clusters) = match &opts.covariance {
        CovarianceChoice::Hessian => (CovarianceKind::Hessian, None),
        CovarianceChoice::Robust => (CovarianceKind::Robust, Some(ds.n_individuals())),
        CovarianceChoice::Cluster(map) => (CovarianceKind::Cluster, Some(map.n_clusters)),
    };
    let covariance = match &opts.covariance {
        CovarianceChoice::Hessian => covariance_hessian(&hessian),
        choice => {
            let scores: Vec<Vec<f64>> = likelihood.contributions(&theta).into_iter().map(|(_, g)| g).collect();
            let clusters = match choice {
                CovarianceChoice::Cluster(map) => map.clone(),
                _ => ClusterMap::singletons(scores.len()),
            };
            if clusters.n_clusters < model.n_params() {
                warnings.push(format!(
                    "only {} clusters for {} parameters",
                    clusters.n_clusters,
                    model.n_params()
                ));
            }
            covariance_cluster(&hessian, &scores, &clusters)
        }
    };
    let covariance = match covariance {
        Ok(c) => c,
        Err(e) if converged => return Err(e),
        Err(e) => {
            warnings.push(format!("covariance unavailable: {e}"));
            DMatrix::from_element(theta.len(), theta.len(), f64::NAN)
        }
    };

    if !converged {
        warnings.push(format!("optimizer stopped: {:?}", outcome.termination));
    }
    let mut result = FitResult::from_parameters(model, &theta, covariance, opts.level)?;
    result.loglik = outcome.value;
    result.n_individuals = ds.n_individuals();
    result.n_situations = ds.n_situations();
    result.covariance_kind = kind;
    result.n_clusters = n_clusters;
    result.converged = converged;
    result.iterations = outcome.iterations;
    result.gradient_norm = outcome.gradient_norm();
    result.trajectory = outcome.trajectory;
    result.nrep = nrep;
    result.burn = burn;
    result.warnings = warnings;
    if converged {
        Ok(result)
    } else {
        Err(EstimationError::NonConvergence {
            reason: format!("{:?}", outcome.termination),
            gradient_norm: result.gradient_norm,
            result: Box::new(result),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LongRow;

    #[test]
    fn hessian_covariance_examples() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_eq!(covariance_hessian(&(-&eye)).unwrap(), eye);
        let h = DMatrix::from_diagonal_element(2, 2, -4.0);
        assert_eq!(covariance_hessian(&h).unwrap(), DMatrix::from_diagonal_element(2, 2, 0.25));
        let singular = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, -1.0, -1.0]);
        assert!(matches!(covariance_hessian(&singular), Err(EstimationError::SingularHessian)));
        assert!(matches!(covariance_hessian(&eye), Err(EstimationError::SingularHessian)));
    }

    #[test]
    fn sandwich_degenerate_cases() {
        let h = DMatrix::from_row_slice(2, 2, &[-2.0, 0.5, 0.5, -1.0]);
        let zeros = vec![vec![0.0, 0.0]; 4];
        let v = covariance_robust(&h, &zeros).unwrap();
        assert_eq!(v, DMatrix::zeros(2, 2));

        let scores = vec![vec![0.3, -0.1], vec![-0.2, 0.4], vec![0.1, 0.2], vec![-0.2, -0.5]];
        let robust = covariance_robust(&h, &scores).unwrap();
        let singletons = ClusterMap::from_labels(vec!["a".into(), "b".into(), "c".into(), "d".into()]);
        assert_eq!(covariance_cluster(&h, &scores, &singletons).unwrap(), robust);

        let one = ClusterMap::from_labels(vec!["a".into(); 4]);
        assert!(matches!(
            covariance_cluster(&h, &scores, &one),
            Err(EstimationError::InsufficientClusters(1))
        ));
        assert!(matches!(
            covariance_cluster(&h, &scores[..3], &singletons),
            Err(EstimationError::ClusterShape { .. })
        ));
    }

    fn small_dataset() -> ChoiceDataset {
        // two individuals, two situations, J=2, one attribute
        let mut rows = vec![];
        let x = [[1.0, 2.0], [3.0, 1.0], [0.5, 2.5], [2.0, 0.0]];
        let chosen = [0, 1, 1, 0];
        for (k, (xs, &c)) in x.iter().zip(&chosen).enumerate() {
            for a in 0..2 {
                rows.push(LongRow {
                    id: (k / 2) as i64 + 1,
                    group: (k % 2) as i64 + 1,
                    alternative: a as i64 + 1,
                    chosen: a == c,
                    attributes: vec![xs[a]],
                    extras: vec![],
                });
            }
        }
        ChoiceDataset::from_rows(vec!["x".into()], vec![], rows).unwrap()
    }

    #[test]
    fn classical_fit_matches_grid_search() {
        let ds = small_dataset();
        let spec = ModelSpec::classical(vec!["x".into()]);
        let fit = fit_classical(&ds, &spec, &FitOptions::default()).unwrap();
        let model = Model::new(spec, &ds).unwrap();
        let ll = SimulatedLikelihood::classical(&model, &ds).unwrap();
        // coarse grid then refine
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut lo = -5.0;
        let mut width = 10.0;
        for _ in 0..6 {
            for k in 0..=1000 {
                let b = lo + width * k as f64 / 1000.0;
                let v = ll.value(&[b]);
                if v > best.0 {
                    best = (v, b);
                }
            }
            lo = best.1 - width / 100.0;
            width /= 50.0;
        }
        assert!((fit.theta()[0] - best.1).abs() < 1e-4, "{} vs {}", fit.theta()[0], best.1);
        assert!(fit.converged && fit.gradient_norm <= 1e-6);
        assert!(fit.trajectory.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn fit_preconditions() {
        let ds = small_dataset();
        let mixed = ModelSpec::mixed(vec![], vec!["x".into()], 0);
        assert!(matches!(
            fit_classical(&ds, &mixed, &FitOptions::default()),
            Err(EstimationError::RandomInClassical)
        ));
        let classical = ModelSpec::classical(vec!["x".into()]);
        assert!(matches!(
            fit_mixed(&ds, &classical, &FitOptions::default()),
            Err(EstimationError::NoRandomAttributes)
        ));
        let opts = FitOptions {
            start: Some(vec![0.0, 1.0]),
            ..FitOptions::default()
        };
        assert!(matches!(
            fit_classical(&ds, &classical, &opts),
            Err(EstimationError::InvalidStart { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn json_round_trip() {
        let ds = small_dataset();
        let fit = fit_classical(&ds, &ModelSpec::classical(vec!["x".into()]), &FitOptions::default()).unwrap();
        let json = fit.to_json();
        let back = FitResult::from_json(&json).unwrap();
        assert_eq!(back.theta(), fit.theta());
        assert_eq!(back.to_json(), json);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["estimates", "loglik", "nrep", "burn", "converged", "covariance_kind", "covariance"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        let est = &value["estimates"][0];
        for key in ["name", "coef", "se", "z", "p", "ci_low", "ci_high"] {
            assert!(est.get(key).is_some(), "missing estimates.{key}");
        }
        assert_eq!(value["covariance_kind"], "hessian");
    }
}
