//! Monte Carlo harness: data generation from a model, replicated fits and
//! relative-bias accounting by parameter group.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::gauss::norm_quantile;
use crate::modelir::{parse_model, ModelSpec, Parameterization, Slot};
use crate::moments1::{StageOneStats, VariableMeta};
use crate::pivfit::{
    fit_data, fit_moments, implied_moments, FitOptions, FitResult, ModelParams, MomentInput,
    ParamGroup, Weight,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NpdPolicy {
    Exclude,
    Include,
}

/// Declarative description of a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Model syntax; also the generating structure.
    pub model: String,
    /// Generating values by parameter name (`f=~y2`, `g~f`, `f~~g`, `y1~~y1`).
    /// Free error variances left out are set so the observed variance is 1.
    pub parameters: BTreeMap<String, f64>,
    /// Category probabilities of each ordinal variable.
    pub ordinal: BTreeMap<String, Vec<f64>>,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    #[serde(default = "default_parameterizations")]
    pub parameterizations: Vec<Parameterization>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_policies")]
    pub npd_policies: Vec<NpdPolicy>,
    #[serde(default)]
    pub weight: Weight,
}

fn default_parameterizations() -> Vec<Parameterization> {
    vec![Parameterization::Standard]
}

fn default_policies() -> Vec<NpdPolicy> {
    vec![NpdPolicy::Exclude, NpdPolicy::Include]
}

pub const PAPER_MODEL: &str = "\
eta1 =~ y1 + y2
eta2 =~ y3 + y4 + y5
eta3 =~ y6 + y7 + y8
eta4 =~ y9 + y10
eta5 =~ y11 + y12
eta3 ~ eta1
eta4 ~ eta2
eta5 ~ eta2 + eta3 + eta4
";

/// The five-factor mixed-indicator design: y1-y5 continuous, y6-y12
/// five-category ordinal.
pub fn paper_design() -> StudyConfig {
    let parameters = [
        ("eta3~eta1", 0.5),
        ("eta4~eta2", 0.4),
        ("eta5~eta2", 0.3),
        ("eta5~eta3", 0.4),
        ("eta5~eta4", 0.4),
        ("eta1=~y2", 0.4),
        ("eta2=~y4", 0.7),
        ("eta2=~y5", 0.6),
        ("eta3=~y7", 0.8),
        ("eta3=~y8", 0.7),
        ("eta4=~y10", 0.6),
        ("eta5=~y12", 0.5),
        ("eta1~~eta1", 0.7),
        ("eta1~~eta2", 0.3),
        ("eta2~~eta2", 0.8),
        ("eta3~~eta3", 0.4),
        ("eta4~~eta4", 0.5),
        ("eta5~~eta5", 0.5),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let probs = vec![0.3, 0.4, 0.2, 0.06, 0.04];
    StudyConfig {
        model: PAPER_MODEL.into(),
        parameters,
        ordinal: (6..=12).map(|i| (format!("y{i}"), probs.clone())).collect(),
        sample_sizes: vec![100, 200, 400, 800, 3200],
        replications: 200,
        parameterizations: vec![Parameterization::Standard, Parameterization::Alternative],
        seed: 20_200_601,
        npd_policies: default_policies(),
        weight: Weight::Diagonal,
    }
}

/// A validated study: parsed model, generating parameters and population
/// moments.
#[derive(Debug, Clone)]
pub struct Design {
    pub config: StudyConfig,
    pub model: ModelSpec,
    pub params: ModelParams,
    pub sigma: DMatrix<f64>,
    pub mu: DVector<f64>,
    /// Cut points on the standardized latent response, per observed variable.
    pub cuts: Vec<Option<Vec<f64>>>,
    chol: DMatrix<f64>,
}

fn lookup(names: &[String], s: &str, what: &str) -> Result<usize> {
    names.iter().position(|n| n == s).ok_or_else(|| {
        Error::Validation(format!(
            "generating parameter refers to unknown {what} `{s}`"
        ))
    })
}

fn assign(model: &ModelSpec, params: &mut ModelParams, name: &str, v: f64) -> Result<()> {
    let bad = || Error::Validation(format!("`{name}` is not a free parameter of the model"));
    if let Some((l, r)) = name.split_once("=~") {
        let f = lookup(&model.latents, l, "latent")?;
        let i = lookup(&model.observed, r, "observed variable")?;
        if !model.lambda[i][f].is_free() {
            return Err(bad());
        }
        params.lambda[(i, f)] = v;
    } else if let Some((l, r)) = name.split_once("~~") {
        if let (Ok(g), Ok(h)) = (lookup(&model.latents, l, ""), lookup(&model.latents, r, "")) {
            if !model.psi[g.max(h)][g.min(h)].is_free() {
                return Err(bad());
            }
            params.psi[(g, h)] = v;
            params.psi[(h, g)] = v;
        } else {
            let i = lookup(&model.observed, l, "variable")?;
            let j = lookup(&model.observed, r, "variable")?;
            if !model.theta_eps[i.max(j)][i.min(j)].is_free() {
                return Err(bad());
            }
            params.theta_eps[(i, j)] = v;
            params.theta_eps[(j, i)] = v;
        }
    } else if let Some((l, r)) = name.split_once('~') {
        let h = lookup(&model.latents, l, "latent")?;
        let g = lookup(&model.latents, r, "latent")?;
        if !model.beta[h][g].is_free() {
            return Err(bad());
        }
        params.beta[(h, g)] = v;
    } else {
        return Err(bad());
    }
    Ok(())
}

impl Design {
    pub fn new(config: StudyConfig) -> Result<Self> {
        if config.replications == 0 {
            return Err(Error::Validation(
                "replication count must be at least 1".into(),
            ));
        }
        if config.sample_sizes.iter().any(|&n| n < 2) {
            return Err(Error::Validation("sample sizes must be at least 2".into()));
        }
        let model = parse_model(&config.model)?;
        if !model.thresholds.is_empty() {
            return Err(Error::Validation(
                "the generating model cannot declare thresholds".into(),
            ));
        }
        let mut params = ModelParams::fixed_part(&model);
        for (name, &v) in &config.parameters {
            assign(&model, &mut params, name, v)?;
        }
        let p = model.n_observed();
        // unit observed variance for error variances left unspecified
        let mut common_only = params.clone();
        common_only.theta_eps = DMatrix::zeros(p, p);
        let (common, _) = implied_moments(&common_only)?;
        for i in 0..p {
            let given = config
                .parameters
                .contains_key(&format!("{0}~~{0}", model.observed[i]));
            if model.theta_eps[i][i] == Slot::Free && !given {
                let v = 1.0 - common[(i, i)];
                if v <= 0.0 {
                    return Err(Error::Validation(format!(
                        "common variance of `{}` is {:.4}; unit total variance is impossible",
                        model.observed[i],
                        common[(i, i)]
                    )));
                }
                params.theta_eps[(i, i)] = v;
            }
        }
        for (name, m) in [("Σ_ζ", &params.psi), ("Σ_ε", &params.theta_eps)] {
            if m.nrows() > 0 && m.clone().cholesky().is_none() {
                return Err(Error::Validation(format!(
                    "generating {name} is not positive definite"
                )));
            }
        }
        let (sigma, mu) = implied_moments(&params)?;
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Validation("implied covariance is not positive definite".into()))?
            .l();
        let mut cuts = vec![None; p];
        for (name, probs) in &config.ordinal {
            let i = lookup(&model.observed, name, "variable")?;
            if probs.len() < 2 || probs.iter().any(|&q| q <= 0.0) {
                return Err(Error::Validation(format!(
                    "`{name}` needs at least two positive probabilities"
                )));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::Validation(format!(
                    "probabilities of `{name}` sum to {total}, not 1"
                )));
            }
            let mut acc = 0.0;
            let c: Vec<f64> = probs[..probs.len() - 1]
                .iter()
                .map(|q| {
                    acc += q;
                    norm_quantile(acc)
                })
                .collect();
            cuts[i] = Some(c);
        }
        Ok(Self {
            config,
            model,
            params,
            sigma,
            mu,
            cuts,
            chol,
        })
    }

    pub fn metas(&self) -> Vec<VariableMeta> {
        self.model
            .observed
            .iter()
            .zip(&self.cuts)
            .map(|(n, c)| match c {
                Some(c) => VariableMeta::ordinal_count(n.clone(), c.len() + 1)
                    .expect("at least two categories"),
                None => VariableMeta::continuous(n.clone()),
            })
            .collect()
    }

    pub fn ordinal_names(&self) -> Vec<String> {
        self.config.ordinal.keys().cloned().collect()
    }

    /// Population moments on the scale stage one estimates: ordinal
    /// responses standardized, thresholds at the normal quantiles.
    pub fn population_moments(&self) -> Result<MomentInput> {
        let p = self.model.n_observed();
        let mut scale = DVector::from_element(p, 1.0);
        let mut mu = self.mu.clone();
        let mut th = vec![Vec::new(); p];
        for i in 0..p {
            if let Some(c) = &self.cuts[i] {
                scale[i] = 1.0 / self.sigma[(i, i)].sqrt();
                mu[i] = 0.0;
                th[i] = c.clone();
            }
        }
        let sigma = DMatrix::from_fn(p, p, |i, j| self.sigma[(i, j)] * scale[i] * scale[j]);
        let st = StageOneStats::from_moments(&self.metas(), &mu, &th, &sigma)?;
        Ok(MomentInput::from_stage1(&st))
    }

    /// Parameter values under a parameterization: the exact fit to the
    /// population moments.
    pub fn truth(&self, param: Parameterization) -> Result<FitResult> {
        fit_moments(
            &self.model,
            &self.population_moments()?,
            &self.options(param),
        )
    }

    pub fn options(&self, param: Parameterization) -> FitOptions {
        FitOptions {
            parameterization: Some(param),
            weight: self.config.weight,
            ..Default::default()
        }
    }

    /// One dataset; identical for identical (seed, n, rep).
    pub fn generate(&self, n: usize, rep: usize) -> DataTable {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, n, rep));
        let p = self.model.n_observed();
        let mut cols = vec![Vec::with_capacity(n); p];
        let mut z = DVector::zeros(p);
        for _ in 0..n {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let y = &self.mu + &self.chol * &z;
            for i in 0..p {
                let v = match &self.cuts[i] {
                    Some(c) => {
                        let s = (y[i] - self.mu[i]) / self.sigma[(i, i)].sqrt();
                        c.iter().filter(|&&t| s > t).count() as f64
                    }
                    None => y[i],
                };
                cols[i].push(v);
            }
        }
        DataTable::new(self.model.observed.clone(), cols).expect("columns have equal length")
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream_seed(seed: u64, n: usize, rep: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ n as u64) ^ rep as u64)
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq)]
pub enum RepOutcome {
    Fitted {
        /// name → (estimate, SE)
        estimates: HashMap<String, (f64, Option<f64>)>,
        npd: bool,
        /// Shea R² by equation label (first regressor).
        shea: Vec<(String, f64)>,
    },
    Failed(String),
}

/// Threshold names keyed by the generating category boundary, so a sample
/// with an empty upper category still lines up with the truth.
fn collect(fit: &FitResult) -> RepOutcome {
    let mut estimates = HashMap::new();
    for p in &fit.params {
        if !p.free {
            continue;
        }
        let name = match p.name.split_once("|t") {
            Some((var, k)) => {
                let j = fit.moments.index_of(var).expect("threshold variable");
                let cats = &fit.moments.categories[j];
                let k: usize = k.parse::<usize>().expect("threshold label") - 1;
                if cats[k + 1] != cats[k] + 1 {
                    continue;
                }
                format!("{var}|t{}", cats[k] + 1)
            }
            None => p.name.clone(),
        };
        estimates.insert(name, (p.estimate, p.se));
    }
    let shea = fit
        .equations
        .iter()
        .filter_map(|e| e.shea_r2.first().map(|&r| (e.label.clone(), r)))
        .collect();
    RepOutcome::Fitted {
        estimates,
        npd: fit.npd(),
        shea,
    }
}

/// Fit one replication.
pub fn run_replication(
    design: &Design,
    n: usize,
    rep: usize,
    param: Parameterization,
) -> RepOutcome {
    let data = design.generate(n, rep);
    let metas: Result<Vec<VariableMeta>> = design
        .model
        .observed
        .iter()
        .enumerate()
        .map(|(i, name)| match design.cuts[i] {
            Some(_) => VariableMeta::ordinal_from_column(name.clone(), data.column(i)),
            None => Ok(VariableMeta::continuous(name.clone())),
        })
        .collect();
    match metas.and_then(|m| fit_data(&design.model, &data, &m, &design.options(param))) {
        Ok(fit) => collect(&fit),
        Err(e) => RepOutcome::Failed(e.to_string()),
    }
}

/// True value, group and name of each summarized parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: f64,
}

pub fn true_params(fit: &FitResult) -> Vec<TrueParam> {
    fit.params
        .iter()
        .filter(|p| p.free)
        .map(|p| TrueParam {
            name: p.name.clone(),
            group: p.group,
            value: p.estimate,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub n: usize,
    pub parameterization: Parameterization,
    pub policy: NpdPolicy,
    pub group: ParamGroup,
    /// Mean over parameters of the mean percentage relative bias; absent
    /// when every true value in the group is zero.
    pub rb: Option<f64>,
    /// Mean over parameters of the median percentage SE bias.
    pub rbse: Option<f64>,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub parameterization: Parameterization,
    pub replications: usize,
    pub nonconverged_pct: f64,
    pub npd_pct: f64,
    /// Distinct failure messages and counts.
    pub failures: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheaRow {
    pub n: usize,
    pub parameterization: Parameterization,
    pub equation: String,
    pub mean: f64,
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub cells: Vec<GroupCell>,
    pub rates: Vec<RateRow>,
    pub shea: Vec<SheaRow>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Aggregate replication outcomes for one (N, parameterization) condition.
pub fn summarize(
    n: usize,
    param: Parameterization,
    truth: &[TrueParam],
    outcomes: &[RepOutcome],
    policies: &[NpdPolicy],
) -> (Vec<GroupCell>, RateRow, Vec<SheaRow>) {
    let fitted: Vec<(&HashMap<String, (f64, Option<f64>)>, bool)> = outcomes
        .iter()
        .filter_map(|o| match o {
            RepOutcome::Fitted { estimates, npd, .. } => Some((estimates, *npd)),
            RepOutcome::Failed(_) => None,
        })
        .collect();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for o in outcomes {
        if let RepOutcome::Failed(m) = o {
            *failures.entry(m.clone()).or_default() += 1;
        }
    }
    let reps = outcomes.len();
    let n_npd = fitted.iter().filter(|f| f.1).count();
    let rate = RateRow {
        n,
        parameterization: param,
        replications: reps,
        nonconverged_pct: 100.0 * (reps - fitted.len()) as f64 / reps.max(1) as f64,
        npd_pct: 100.0 * n_npd as f64 / reps.max(1) as f64,
        failures: failures.into_iter().collect(),
    };

    // empirical SD over every converged replication
    let sd: HashMap<&str, f64> = truth
        .iter()
        .filter_map(|t| {
            let xs: Vec<f64> = fitted
                .iter()
                .filter_map(|f| f.0.get(&t.name).map(|e| e.0))
                .collect();
            if xs.len() < 2 {
                return None;
            }
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            Some((t.name.as_str(), v.sqrt()))
        })
        .collect();

    let mut cells = Vec::new();
    for &policy in policies {
        let kept: Vec<&HashMap<String, (f64, Option<f64>)>> = fitted
            .iter()
            .filter(|f| policy == NpdPolicy::Include || !f.1)
            .map(|f| f.0)
            .collect();
        for group in ParamGroup::ALL {
            let members: Vec<&TrueParam> = truth.iter().filter(|t| t.group == group).collect();
            if members.is_empty() {
                continue;
            }
            let mut rbs = Vec::new();
            let mut rbses = Vec::new();
            for t in &members {
                let vals: Vec<(f64, Option<f64>)> = kept
                    .iter()
                    .filter_map(|e| e.get(&t.name).copied())
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                if t.value.abs() > 1e-12 {
                    let rb = vals.iter().map(|v| (v.0 - t.value) / t.value).sum::<f64>()
                        / vals.len() as f64;
                    rbs.push(100.0 * rb);
                }
                if let Some(&s) = sd.get(t.name.as_str()).filter(|s| **s > 0.0) {
                    let mut r: Vec<f64> = vals
                        .iter()
                        .filter_map(|v| v.1)
                        .map(|se| (se - s) / s * 100.0)
                        .collect();
                    if !r.is_empty() {
                        rbses.push(median(&mut r));
                    }
                }
            }
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            cells.push(GroupCell {
                n,
                parameterization: param,
                policy,
                group,
                rb: mean(&rbs),
                rbse: mean(&rbses),
                n_params: members.len(),
            });
        }
    }

    let mut by_eq: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for o in outcomes {
        if let RepOutcome::Fitted { shea, .. } = o {
            for (label, r) in shea {
                by_eq.entry(label.clone()).or_default().push(*r);
            }
        }
    }
    let shea = by_eq
        .into_iter()
        .map(|(equation, mut v)| {
            v.sort_by(f64::total_cmp);
            SheaRow {
                n,
                parameterization: param,
                equation,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                q10: quantile(&v, 0.1),
                median: quantile(&v, 0.5),
                q90: quantile(&v, 0.9),
            }
        })
        .collect();
    (cells, rate, shea)
}

/// Run every condition of a study.
pub fn run_study(config: &StudyConfig) -> Result<StudySummary> {
    let design = Design::new(config.clone())?;
    run_design(&design)
}

pub fn run_design(design: &Design) -> Result<StudySummary> {
    let config = &design.config;
    let mut summary = StudySummary {
        cells: Vec::new(),
        rates: Vec::new(),
        shea: Vec::new(),
    };
    for &param in &config.parameterizations {
        let truth = true_params(&design.truth(param)?);
        for &n in &config.sample_sizes {
            let outcomes: Vec<RepOutcome> = (0..config.replications)
                .into_par_iter()
                .map(|rep| run_replication(design, n, rep, param))
                .collect();
            let (cells, rate, shea) = summarize(n, param, &truth, &outcomes, &config.npd_policies);
            summary.cells.extend(cells);
            summary.rates.push(rate);
            summary.shea.extend(shea);
        }
    }
    Ok(summary)
}

fn param_name(p: Parameterization) -> &'static str {
    match p {
        Parameterization::Standard => "standard",
        Parameterization::Alternative => "alternative",
    }
}

fn policy_name(p: NpdPolicy) -> &'static str {
    match p {
        NpdPolicy::Exclude => "exclude",
        NpdPolicy::Include => "include",
    }
}

fn group_key(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Tau => "tau",
        ParamGroup::AlphaEta => "alpha_eta",
        ParamGroup::AlphaYc => "alpha_y_c",
        ParamGroup::AlphaYo => "alpha_y_o",
        ParamGroup::LambdaC => "lambda_c",
        ParamGroup::LambdaO => "lambda_o",
        ParamGroup::Beta => "beta",
        ParamGroup::EpsC => "eps_c",
        ParamGroup::EpsO => "eps_o",
        ParamGroup::Zeta => "zeta",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StudySummary {
    pub fn cell(
        &self,
        n: usize,
        param: Parameterization,
        policy: NpdPolicy,
        group: ParamGroup,
    ) -> Option<&GroupCell> {
        self.cells.iter().find(|c| {
            c.n == n && c.parameterization == param && c.policy == policy && c.group == group
        })
    }

    pub fn rate(&self, n: usize, param: Parameterization) -> Option<&RateRow> {
        self.rates
            .iter()
            .find(|r| r.n == n && r.parameterization == param)
    }

    /// Long-format CSV of the group cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameterization,npd_policy,n,group,rb,rbse,n_params\n");
        for c in &self.cells {
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                param_name(c.parameterization),
                policy_name(c.policy),
                c.n,
                group_key(c.group),
                opt(c.rb),
                opt(c.rbse),
                c.n_params
            );
        }
        s
    }

    pub fn rates_csv(&self) -> String {
        let mut s = String::from("parameterization,n,replications,nonconverged_pct,npd_pct\n");
        for r in &self.rates {
            s += &format!(
                "{},{},{},{},{}\n",
                param_name(r.parameterization),
                r.n,
                r.replications,
                r.nonconverged_pct,
                r.npd_pct
            );
        }
        s
    }

    /// Text table with groups as rows and sample sizes as columns, point
    /// estimate bias on the left and SE bias on the right.
    pub fn to_table(&self) -> String {
        let mut ns: Vec<usize> = self.cells.iter().map(|c| c.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let mut blocks: Vec<(Parameterization, NpdPolicy)> = self
            .cells
            .iter()
            .map(|c| (c.parameterization, c.policy))
            .collect();
        blocks.dedup();
        let mut uniq = Vec::new();
        for b in blocks {
            if !uniq.contains(&b) {
                uniq.push(b);
            }
        }
        let w = 7;
        let mut out = String::new();
        out += "Percentage of relative bias\n";
        out += &format!("{:<10}", "");
        out += &format!(
            "{:^width$} | {:^width$}\n",
            "Point estimates",
            "Standard errors",
            width = ns.len() * w
        );
        let header: String = ns.iter().map(|n| format!("{n:>w$}")).collect();
        out += &format!("{:<10}{header} | {header}\n", "Parameter");
        for (param, policy) in uniq {
            let title = format!(
                "{} parameterization - {}",
                if param == Parameterization::Standard {
                    "Standard"
                } else {
                    "Alternative"
                },
                if policy == NpdPolicy::Exclude {
                    "datasets with NPD matrices excluded"
                } else {
                    "all converged datasets"
                }
            );
            out += &format!("{title}\n");
            for g in ParamGroup::ALL {
                let cells: Vec<Option<&GroupCell>> =
                    ns.iter().map(|&n| self.cell(n, param, policy, g)).collect();
                if cells.iter().all(|c| c.is_none()) {
                    continue;
                }
                let fmt = |v: Option<f64>| {
                    v.map(|x| format!("{x:>w$.1}"))
                        .unwrap_or_else(|| format!("{:>w$}", ""))
                };
                let rb: String = cells.iter().map(|c| fmt(c.and_then(|c| c.rb))).collect();
                let se: String = cells.iter().map(|c| fmt(c.and_then(|c| c.rbse))).collect();
                out += &format!("{:<10}{rb} | {se}\n", g.symbol());
            }
        }
        out += "\nNonconverged and nonpositive definite solutions (%)\n";
        out += &format!("{:<12}{:>7}{:>14}{:>10}\n", "", "N", "nonconverged", "NPD");
        for r in &self.rates {
            out += &format!(
                "{:<12}{:>7}{:>14.1}{:>10.1}\n",
                param_name(r.parameterization),
                r.n,
                r.nonconverged_pct,
                r.npd_pct
            );
        }
        out
    }
}
