//! Systematic regret, choice probabilities and their gradients.
//!
//! The regret of alternative `i` in a choice situation is
//!
//! ```text
//! R_i = Σ_{j≠i} Σ_m softplus(β_m (x_{j,m} - x_{i,m})) + α_i
//! ```
//!
//! and choice probabilities are `exp(-R_i) / Σ_j exp(-R_j)`. The ASC enters
//! with a plus sign, so a positive `α_i` makes alternative `i` *less* likely.
//! The base alternative has `α = 0`.
//!
//! Packed parameter order is `[fixed | rand_location | rand_scale | asc]`.
//! Normal coefficients are `b + s z`, log-normal ones `exp(b + s z)`. The
//! scale `s` is unconstrained; only `s²` matters for the distribution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ChoiceDataset, ChoiceSituation, IndividualBlock};
use crate::stats::{log_sum_exp, logistic, softplus, softplus_logistic};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("attribute `{0}` is not in the dataset")]
    UnknownAttribute(String),
    #[error("attribute `{0}` is listed more than once")]
    DuplicateAttribute(String),
    #[error("ln count {ln_count} exceeds the {random} random attributes")]
    LnCount { ln_count: usize, random: usize },
    #[error("base alternative {0} does not occur in the data")]
    BaseAlternative(i64),
    #[error("the model has no attributes")]
    NoAttributes,
    #[error("parameter vector has length {found}, expected {expected}")]
    ParameterLength { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Normal,
    LogNormal,
}

/// Which attributes enter the regret function, and how.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub fixed_attrs: Vec<String>,
    pub random_attrs: Vec<String>,
    /// The last `ln_count` random attributes are log-normal.
    pub ln_count: usize,
    pub use_asc: bool,
    /// ASC fixed to zero; defaults to the smallest alternative label.
    pub base_alternative: Option<i64>,
}

impl ModelSpec {
    /// Fixed coefficients only, no ASCs.
    pub fn classical(fixed_attrs: Vec<String>) -> Self {
        Self {
            fixed_attrs,
            random_attrs: Vec::new(),
            ln_count: 0,
            use_asc: false,
            base_alternative: None,
        }
    }

    /// Fixed and random coefficients, no ASCs.
    pub fn mixed(fixed_attrs: Vec<String>, random_attrs: Vec<String>, ln_count: usize) -> Self {
        Self {
            fixed_attrs,
            random_attrs,
            ln_count,
            use_asc: false,
            base_alternative: None,
        }
    }

    pub fn with_asc(mut self, base_alternative: Option<i64>) -> Self {
        self.use_asc = true;
        self.base_alternative = base_alternative;
        self
    }

    pub fn distribution(&self, k: usize) -> Distribution {
        if k >= self.random_attrs.len() - self.ln_count {
            Distribution::LogNormal
        } else {
            Distribution::Normal
        }
    }

    pub fn is_mixed(&self) -> bool {
        !self.random_attrs.is_empty()
    }

    /// The same model with every random attribute given a fixed coefficient.
    pub fn to_classical(&self) -> Self {
        let mut fixed = self.fixed_attrs.clone();
        fixed.extend(self.random_attrs.iter().cloned());
        Self {
            fixed_attrs: fixed,
            random_attrs: Vec::new(),
            ln_count: 0,
            use_asc: self.use_asc,
            base_alternative: self.base_alternative,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coefficient {
    Fixed(usize),
    Random(usize),
}

/// One attribute of the regret function.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub name: String,
    /// Column in the dataset's attribute vector.
    pub column: usize,
    pub coefficient: Coefficient,
}

/// A [`ModelSpec`] resolved against a dataset's columns and alternatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    terms: Vec<Term>,
    alternative_labels: Vec<i64>,
    base_index: Option<usize>,
}

impl Model {
    pub fn new(spec: ModelSpec, ds: &ChoiceDataset) -> Result<Self> {
        Self::from_parts(spec, &ds.attribute_names, ds.alternative_labels.clone())
    }

    /// Resolves `spec` against explicit attribute names and alternative labels.
    pub fn from_parts(
        spec: ModelSpec,
        attribute_names: &[String],
        alternative_labels: Vec<i64>,
    ) -> Result<Self> {
        if spec.ln_count > spec.random_attrs.len() {
            return Err(ModelError::LnCount {
                ln_count: spec.ln_count,
                random: spec.random_attrs.len(),
            });
        }
        let mut lookup = std::collections::HashMap::new();
        let declared = spec
            .fixed_attrs
            .iter()
            .enumerate()
            .map(|(k, a)| (a, Coefficient::Fixed(k)))
            .chain(
                spec.random_attrs
                    .iter()
                    .enumerate()
                    .map(|(k, a)| (a, Coefficient::Random(k))),
            );
        for (name, coefficient) in declared {
            if lookup.insert(name.clone(), coefficient).is_some() {
                return Err(ModelError::DuplicateAttribute(name.clone()));
            }
            if !attribute_names.contains(name) {
                return Err(ModelError::UnknownAttribute(name.clone()));
            }
        }
        if lookup.is_empty() {
            return Err(ModelError::NoAttributes);
        }
        let terms = attribute_names
            .iter()
            .enumerate()
            .filter_map(|(column, name)| {
                lookup.get(name).map(|&coefficient| Term {
                    name: name.clone(),
                    column,
                    coefficient,
                })
            })
            .collect();
        let base_index = if spec.use_asc {
            match spec.base_alternative {
                Some(label) => Some(
                    alternative_labels
                        .binary_search(&label)
                        .map_err(|_| ModelError::BaseAlternative(label))?,
                ),
                None => Some(0),
            }
        } else {
            None
        };
        Ok(Self {
            spec,
            terms,
            alternative_labels,
            base_index,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn alternative_labels(&self) -> &[i64] {
        &self.alternative_labels
    }

    pub fn n_fixed(&self) -> usize {
        self.spec.fixed_attrs.len()
    }

    pub fn n_random(&self) -> usize {
        self.spec.random_attrs.len()
    }

    pub fn n_asc(&self) -> usize {
        if self.spec.use_asc {
            self.alternative_labels.len() - 1
        } else {
            0
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_fixed() + 2 * self.n_random() + self.n_asc()
    }

    /// Label of the base alternative, when ASCs are used.
    pub fn base_alternative(&self) -> Option<i64> {
        self.base_index.map(|i| self.alternative_labels[i])
    }

    /// Alternative labels that carry an ASC, in packing order.
    pub fn asc_alternatives(&self) -> Vec<i64> {
        match self.base_index {
            Some(base) => self
                .alternative_labels
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != base)
                .map(|(_, &l)| l)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Parameter slot of the ASC of each dense alternative (`None` for base).
    fn asc_slots(&self) -> Vec<Option<usize>> {
        let offset = self.n_fixed() + 2 * self.n_random();
        match self.base_index {
            Some(base) => (0..self.alternative_labels.len())
                .map(|i| match i.cmp(&base) {
                    std::cmp::Ordering::Less => Some(offset + i),
                    std::cmp::Ordering::Equal => None,
                    std::cmp::Ordering::Greater => Some(offset + i - 1),
                })
                .collect(),
            None => vec![None; self.alternative_labels.len()],
        }
    }

    /// Names in packing order: fixed attributes, `mean:<attr>`, `sd:<attr>`,
    /// `asc:<label>`.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.spec.fixed_attrs.clone();
        names.extend(self.spec.random_attrs.iter().map(|a| format!("mean:{a}")));
        names.extend(self.spec.random_attrs.iter().map(|a| format!("sd:{a}")));
        names.extend(self.asc_alternatives().iter().map(|l| format!("asc:{l}")));
        names
    }

    /// Packed index of the location and scale of random attribute `k`.
    pub fn random_indices(&self, k: usize) -> (usize, usize) {
        let loc = self.n_fixed() + k;
        (loc, loc + self.n_random())
    }
}

/// Free parameters of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub fixed: Vec<f64>,
    pub rand_location: Vec<f64>,
    pub rand_scale: Vec<f64>,
    pub asc: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(model: &Model) -> Self {
        Self {
            fixed: vec![0.0; model.n_fixed()],
            rand_location: vec![0.0; model.n_random()],
            rand_scale: vec![0.0; model.n_random()],
            asc: vec![0.0; model.n_asc()],
        }
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(
            self.fixed.len() + 2 * self.rand_location.len() + self.asc.len(),
        );
        v.extend_from_slice(&self.fixed);
        v.extend_from_slice(&self.rand_location);
        v.extend_from_slice(&self.rand_scale);
        v.extend_from_slice(&self.asc);
        v
    }

    pub fn unpack(model: &Model, packed: &[f64]) -> Result<Self> {
        if packed.len() != model.n_params() {
            return Err(ModelError::ParameterLength {
                expected: model.n_params(),
                found: packed.len(),
            });
        }
        let (f, k) = (model.n_fixed(), model.n_random());
        Ok(Self {
            fixed: packed[..f].to_vec(),
            rand_location: packed[f..f + k].to_vec(),
            rand_scale: packed[f + k..f + 2 * k].to_vec(),
            asc: packed[f + 2 * k..].to_vec(),
        })
    }

    /// ASC of every dense alternative (zero at the base); empty without ASCs.
    pub fn asc_by_alternative(&self, model: &Model) -> Vec<f64> {
        if !model.spec.use_asc {
            return Vec::new();
        }
        let offset = model.n_fixed() + 2 * model.n_random();
        model
            .asc_slots()
            .into_iter()
            .map(|slot| slot.map_or(0.0, |p| self.asc[p - offset]))
            .collect()
    }
}

/// Realized coefficients, one per model term (dataset attribute order).
#[derive(Clone, Debug, PartialEq)]
pub struct RealizedCoefficients {
    pub beta: Vec<f64>,
}

/// Coefficients for one draw `z` of the random dimensions.
pub fn realize_coefficients(model: &Model, theta: &ParameterVector, z: &[f64]) -> RealizedCoefficients {
    assert_eq!(z.len(), model.n_random(), "one draw per random attribute");
    let mut beta = Vec::with_capacity(model.terms.len());
    realize_into(model, theta, z, &mut beta);
    RealizedCoefficients { beta }
}

pub(crate) fn realize_into(model: &Model, theta: &ParameterVector, z: &[f64], beta: &mut Vec<f64>) {
    beta.clear();
    beta.extend(model.terms.iter().map(|t| match t.coefficient {
        Coefficient::Fixed(k) => theta.fixed[k],
        Coefficient::Random(k) => {
            let v = theta.rand_location[k] + theta.rand_scale[k] * z[k];
            match model.spec.distribution(k) {
                Distribution::Normal => v,
                Distribution::LogNormal => v.exp(),
            }
        }
    }));
}

/// A choice situation reduced to the model's terms.
#[derive(Clone, Debug, PartialEq)]
pub struct SituationData {
    /// Row-major `n_alt x n_terms`.
    x: Vec<f64>,
    alt_index: Vec<usize>,
    chosen: usize,
}

impl SituationData {
    pub fn compile(model: &Model, situation: &ChoiceSituation) -> Self {
        let mut x = Vec::with_capacity(situation.len() * model.terms.len());
        for alt in &situation.alternatives {
            x.extend(model.terms.iter().map(|t| alt.attributes[t.column]));
        }
        Self {
            x,
            alt_index: situation.alternatives.iter().map(|a| a.alt_index).collect(),
            chosen: situation.chosen_index(),
        }
    }

    pub fn n_alternatives(&self) -> usize {
        self.alt_index.len()
    }

    pub fn chosen(&self) -> usize {
        self.chosen
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndividualData {
    pub situations: Vec<SituationData>,
}

impl IndividualData {
    pub fn compile(model: &Model, block: &IndividualBlock) -> Self {
        Self {
            situations: block
                .situations
                .iter()
                .map(|s| SituationData::compile(model, s))
                .collect(),
        }
    }
}

/// The whole dataset reduced to the model's terms, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelData {
    pub individuals: Vec<IndividualData>,
}

impl PanelData {
    pub fn compile(model: &Model, ds: &ChoiceDataset) -> Self {
        Self {
            individuals: ds
                .individuals
                .iter()
                .map(|b| IndividualData::compile(model, b))
                .collect(),
        }
    }
}

/// Reusable buffers for the situation kernel.
#[derive(Default)]
pub(crate) struct Scratch {
    regret: Vec<f64>,
    dregret: Vec<f64>,
    prob: Vec<f64>,
}

/// Regrets of every alternative; with `dregret`, also `∂R_i/∂β_t` (row-major).
fn regrets_into(
    sit: &SituationData,
    beta: &[f64],
    asc: &[f64],
    regret: &mut Vec<f64>,
    mut dregret: Option<&mut Vec<f64>>,
) {
    let n_alt = sit.n_alternatives();
    let n_terms = beta.len();
    regret.clear();
    regret.extend(
        sit.alt_index
            .iter()
            .map(|&a| if asc.is_empty() { 0.0 } else { asc[a] }),
    );
    if let Some(d) = dregret.as_deref_mut() {
        d.clear();
        d.resize(n_alt * n_terms, 0.0);
    }
    // each unordered pair once: softplus(-d) = softplus(d) - d
    for i in 0..n_alt {
        let xi = &sit.x[i * n_terms..(i + 1) * n_terms];
        for j in i + 1..n_alt {
            let xj = &sit.x[j * n_terms..(j + 1) * n_terms];
            for t in 0..n_terms {
                let delta = xj[t] - xi[t];
                let arg = beta[t] * delta;
                match dregret.as_deref_mut() {
                    Some(d) => {
                        let (sp, sig) = softplus_logistic(arg);
                        regret[i] += sp;
                        regret[j] += sp - arg;
                        d[i * n_terms + t] += sig * delta;
                        d[j * n_terms + t] -= (1.0 - sig) * delta;
                    }
                    None => {
                        let sp = softplus(arg);
                        regret[i] += sp;
                        regret[j] += sp - arg;
                    }
                }
            }
        }
    }
}

/// Max-subtracted softmax of `-regret`.
fn probabilities_into(regret: &[f64], prob: &mut Vec<f64>) {
    let min = regret.iter().copied().fold(f64::INFINITY, f64::min);
    prob.clear();
    prob.extend(regret.iter().map(|r| (min - r).exp()));
    let total: f64 = prob.iter().sum();
    prob.iter_mut().for_each(|p| *p /= total);
}

impl SituationData {
    pub(crate) fn probabilities(&self, beta: &[f64], asc: &[f64], scratch: &mut Scratch) -> Vec<f64> {
        regrets_into(self, beta, asc, &mut scratch.regret, None);
        let mut prob = Vec::with_capacity(self.n_alternatives());
        probabilities_into(&scratch.regret, &mut prob);
        prob
    }

    /// Log probability of the chosen alternative. With `grad`, adds
    /// `∂/∂β_t` to `grad.0` and `∂/∂α_a` (dense alternative `a`) to `grad.1`.
    pub(crate) fn log_prob_chosen(
        &self,
        beta: &[f64],
        asc: &[f64],
        scratch: &mut Scratch,
        grad: Option<(&mut [f64], &mut [f64])>,
    ) -> f64 {
        let Scratch {
            regret,
            dregret,
            prob,
        } = scratch;
        let want_grad = grad.is_some();
        regrets_into(self, beta, asc, regret, want_grad.then_some(dregret));
        let min = regret.iter().copied().fold(f64::INFINITY, f64::min);
        let total: f64 = regret.iter().map(|r| (min - r).exp()).sum();
        let value = (min - regret[self.chosen]) - total.ln();
        if let Some((gbeta, gasc)) = grad {
            probabilities_into(regret, prob);
            let n_terms = beta.len();
            let c = self.chosen;
            for t in 0..n_terms {
                let expected: f64 = (0..self.n_alternatives())
                    .map(|i| prob[i] * dregret[i * n_terms + t])
                    .sum();
                gbeta[t] += expected - dregret[c * n_terms + t];
            }
            if !asc.is_empty() {
                for (i, &a) in self.alt_index.iter().enumerate() {
                    gasc[a] += prob[i] - if i == c { 1.0 } else { 0.0 };
                }
            }
        }
        value
    }
}

impl IndividualData {
    /// `ln P_n(α, β)`, the log probability of the observed choice sequence.
    pub(crate) fn sequence_log_prob(&self, beta: &[f64], asc: &[f64], scratch: &mut Scratch) -> f64 {
        self.situations
            .iter()
            .map(|s| s.log_prob_chosen(beta, asc, scratch, None))
            .sum()
    }

    /// Simulated log-likelihood term `ln{(1/R) Σ_r P_n(α, β^r)}` and, when
    /// `grad` is given, its gradient (added into `grad`, packed order).
    ///
    /// `draws` holds `dims` consecutive blocks of `nrep` values.
    pub(crate) fn simulated_loglik(
        &self,
        model: &Model,
        theta: &ParameterVector,
        draws: &[f64],
        nrep: usize,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let n_random = model.n_random();
        debug_assert_eq!(draws.len(), n_random * nrep);
        let asc = theta.asc_by_alternative(model);
        let n_terms = model.terms.len();
        let n_params = model.n_params();
        let mut scratch = Scratch::default();
        let mut z = vec![0.0; n_random];

        let mut beta = Vec::with_capacity(n_terms);
        let Some(grad) = grad else {
            let logs: Vec<f64> = (0..nrep)
                .map(|r| {
                    for (k, zk) in z.iter_mut().enumerate() {
                        *zk = draws[k * nrep + r];
                    }
                    realize_into(model, theta, &z, &mut beta);
                    self.sequence_log_prob(&beta, &asc, &mut scratch)
                })
                .collect();
            return log_sum_exp(&logs) - (nrep as f64).ln();
        };

        let asc_slots = model.asc_slots();
        let mut gbeta = vec![0.0; n_terms];
        let mut gasc = vec![0.0; asc.len()];
        let mut dtheta = vec![0.0; n_params];
        // running log-sum-exp with a rescaled weighted gradient sum
        let mut max = f64::NEG_INFINITY;
        let mut weight_sum = 0.0;
        let mut weighted = vec![0.0; n_params];

        for r in 0..nrep {
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = draws[k * nrep + r];
            }
            realize_into(model, theta, &z, &mut beta);
            gbeta.iter_mut().for_each(|g| *g = 0.0);
            gasc.iter_mut().for_each(|g| *g = 0.0);
            let log_p: f64 = self
                .situations
                .iter()
                .map(|s| s.log_prob_chosen(&beta, &asc, &mut scratch, Some((&mut gbeta, &mut gasc))))
                .sum();

            dtheta.iter_mut().for_each(|g| *g = 0.0);
            for (t, term) in model.terms.iter().enumerate() {
                match term.coefficient {
                    Coefficient::Fixed(k) => dtheta[k] += gbeta[t],
                    Coefficient::Random(k) => {
                        let (loc, scale) = model.random_indices(k);
                        let dbeta_db = match model.spec.distribution(k) {
                            Distribution::Normal => 1.0,
                            Distribution::LogNormal => beta[t],
                        };
                        dtheta[loc] += gbeta[t] * dbeta_db;
                        dtheta[scale] += gbeta[t] * dbeta_db * z[k];
                    }
                }
            }
            for (a, slot) in asc_slots.iter().enumerate() {
                if let Some(p) = slot {
                    dtheta[*p] += gasc[a];
                }
            }

            if log_p > max {
                let rescale = (max - log_p).exp();
                weight_sum *= rescale;
                weighted.iter_mut().for_each(|w| *w *= rescale);
                max = log_p;
            }
            let w = (log_p - max).exp();
            weight_sum += w;
            for (acc, d) in weighted.iter_mut().zip(&dtheta) {
                *acc += w * d;
            }
        }
        for (g, w) in grad.iter_mut().zip(&weighted) {
            *g += w / weight_sum;
        }
        max + weight_sum.ln() - (nrep as f64).ln()
    }
}

/// `R_i` for alternative `i` of `situation`. `asc` is indexed by dense
/// alternative (see [`ParameterVector::asc_by_alternative`]); pass an empty
/// slice for a model without ASCs.
pub fn systematic_regret(
    model: &Model,
    situation: &ChoiceSituation,
    i: usize,
    beta: &RealizedCoefficients,
    asc: &[f64],
) -> f64 {
    let sit = SituationData::compile(model, situation);
    let mut regret = Vec::new();
    regrets_into(&sit, &beta.beta, asc, &mut regret, None);
    regret[i]
}

/// Choice probabilities of every alternative of `situation`.
pub fn choice_probabilities(
    model: &Model,
    situation: &ChoiceSituation,
    beta: &RealizedCoefficients,
    asc: &[f64],
) -> Vec<f64> {
    SituationData::compile(model, situation).probabilities(&beta.beta, asc, &mut Scratch::default())
}

/// `ln P_n`: summed log probabilities of the chosen alternatives.
pub fn sequence_log_probability(
    model: &Model,
    block: &IndividualBlock,
    beta: &RealizedCoefficients,
    asc: &[f64],
) -> f64 {
    IndividualData::compile(model, block).sequence_log_prob(&beta.beta, asc, &mut Scratch::default())
}

/// `P_n`, the probability of the observed sequence of choices.
pub fn sequence_probability(
    model: &Model,
    block: &IndividualBlock,
    beta: &RealizedCoefficients,
    asc: &[f64],
) -> f64 {
    sequence_log_probability(model, block, beta, asc).exp()
}

/// `∂R_i/∂β_t` for every model term.
pub fn regret_gradient(
    model: &Model,
    situation: &ChoiceSituation,
    i: usize,
    beta: &RealizedCoefficients,
) -> Vec<f64> {
    let sit = SituationData::compile(model, situation);
    let n_terms = beta.beta.len();
    let xi = &sit.x[i * n_terms..(i + 1) * n_terms];
    (0..n_terms)
        .map(|t| {
            (0..sit.n_alternatives())
                .filter(|&j| j != i)
                .map(|j| {
                    let delta = sit.x[j * n_terms + t] - xi[t];
                    logistic(beta.beta[t] * delta) * delta
                })
                .sum()
        })
        .collect()
}

/// Individual simulated log-likelihood term and its gradient with respect
/// to the packed parameter vector. `draws` holds `n_random` blocks of
/// `nrep` standard-normal values (see [`crate::draws::DrawSet::individual`]).
pub fn loglik_contribution_gradient(
    model: &Model,
    block: &IndividualBlock,
    theta: &ParameterVector,
    draws: &[f64],
    nrep: usize,
) -> (f64, Vec<f64>) {
    let data = IndividualData::compile(model, block);
    let mut grad = vec![0.0; model.n_params()];
    let value = data.simulated_loglik(model, theta, draws, nrep, Some(&mut grad));
    (value, grad)
}
