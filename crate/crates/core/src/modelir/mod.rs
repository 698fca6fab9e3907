//! Model representation, the latent-to-observed transformation and
//! model-implied instrument selection.
//!
//! The model is
//!
//! ```text
//! η  = α_η + Bη + ζ          Cov(ζ) = Σ_ζ
//! y* = α_y + Λη + ε          Cov(ε) = Σ_ε
//! ```
//!
//! Every latent variable has a scaling indicator with loading 1 and
//! intercept 0, so η = y_s − ε_s and every equation can be written in
//! observed variables with a composite error.

pub mod parser;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use parser::{parse_statements, Modifier, Operator, Target};

/// Status of one cell of a parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Slot {
    Zero,
    Free,
    Fixed(f64),
}

impl Slot {
    pub fn is_zero(&self) -> bool {
        matches!(self, Slot::Zero) || *self == Slot::Fixed(0.0)
    }

    pub fn is_free(&self) -> bool {
        matches!(self, Slot::Free)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Standard,
    Alternative,
}

/// A parsed model. Observed variables are the indicators, in order of
/// first appearance; latents are in order of definition.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub observed: Vec<String>,
    pub latents: Vec<String>,
    /// Observed index of each latent's scaling indicator.
    pub scaling: Vec<usize>,
    /// Λ (observed × latent).
    pub lambda: Vec<Vec<Slot>>,
    /// B (latent × latent); `beta[h][g]` is the effect of g on h.
    pub beta: Vec<Vec<Slot>>,
    /// Σ_ζ, symmetric, stored in full.
    pub psi: Vec<Vec<Slot>>,
    /// Σ_ε, symmetric, stored in full.
    pub theta_eps: Vec<Vec<Slot>>,
    /// Threshold declarations: observed index to per-threshold anchor.
    pub thresholds: BTreeMap<usize, Vec<Option<f64>>>,
    /// Variables with an explicit `~ 1`.
    pub intercepts: Vec<VarRef>,
    pub parameterization: Parameterization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarRef {
    Observed(usize),
    Latent(usize),
}

fn perr(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// Parse model syntax.
pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let stmts = parse_statements(text)?;
    let mut latents: Vec<String> = Vec::new();
    for s in &stmts {
        if s.op == Operator::Measure {
            if latents.contains(&s.lhs) {
                return Err(perr(
                    s.line,
                    s.column,
                    format!("latent `{}` is defined twice", s.lhs),
                ));
            }
            latents.push(s.lhs.clone());
        }
    }
    if latents.is_empty() {
        return Err(perr(1, 1, "model defines no latent variables"));
    }
    let m = latents.len();
    let lat_index = |n: &str| latents.iter().position(|x| x == n);

    // measurement statements
    let mut observed: Vec<String> = Vec::new();
    let mut loadings: Vec<(usize, usize, Option<Modifier>)> = Vec::new();
    let mut scaling = vec![usize::MAX; m];
    for s in stmts.iter().filter(|s| s.op == Operator::Measure) {
        let f = lat_index(&s.lhs).expect("collected above");
        let mut local = Vec::new();
        for t in &s.terms {
            let name = match &t.target {
                Target::Name(n) => n,
                Target::One => return Err(perr(t.line, t.column, "`1` cannot be an indicator")),
            };
            if lat_index(name).is_some() {
                return Err(perr(
                    t.line,
                    t.column,
                    format!("`{name}` is latent; higher-order factors are not supported"),
                ));
            }
            let i = match observed.iter().position(|x| x == name) {
                Some(i) => i,
                None => {
                    observed.push(name.clone());
                    observed.len() - 1
                }
            };
            if loadings.iter().any(|&(a, b, _)| a == i && b == f) {
                return Err(perr(
                    t.line,
                    t.column,
                    format!("duplicate loading of `{name}` on `{}`", s.lhs),
                ));
            }
            local.push((i, t.modifier));
            loadings.push((i, f, t.modifier));
        }
        let marked = local
            .iter()
            .find(|(_, md)| *md == Some(Modifier::Fixed(1.0)));
        let first_default = local.iter().find(|(_, md)| md.is_none());
        scaling[f] = match (marked, first_default) {
            (Some(&(i, _)), _) => i,
            (None, Some(&(i, _))) => i,
            _ => {
                return Err(perr(
                    s.line,
                    s.column,
                    format!("latent `{}` has no scaling indicator", s.lhs),
                ))
            }
        };
    }
    let p = observed.len();
    let obs_index = |n: &str| observed.iter().position(|x| x == n);
    let mut lambda = vec![vec![Slot::Zero; m]; p];
    for &(i, f, md) in &loadings {
        lambda[i][f] = if scaling[f] == i {
            Slot::Fixed(1.0)
        } else {
            match md {
                None | Some(Modifier::Free) => Slot::Free,
                Some(Modifier::Fixed(c)) => Slot::Fixed(c),
            }
        };
    }
    for f in 0..m {
        let s = scaling[f];
        if (0..m).any(|g| g != f && !lambda[s][g].is_zero()) {
            return Err(perr(
                1,
                1,
                format!(
                    "scaling indicator `{}` of `{}` loads on another latent",
                    observed[s], latents[f]
                ),
            ));
        }
        if let Some(g) = (0..f).find(|&g| scaling[g] == s) {
            return Err(perr(
                1,
                1,
                format!(
                    "`{}` scales both `{}` and `{}`",
                    observed[s], latents[g], latents[f]
                ),
            ));
        }
    }

    let resolve = |name: &str, line: usize, column: usize| -> Result<VarRef> {
        if let Some(f) = lat_index(name) {
            Ok(VarRef::Latent(f))
        } else if let Some(i) = obs_index(name) {
            Ok(VarRef::Observed(i))
        } else {
            Err(perr(line, column, format!("unknown variable `{name}`")))
        }
    };

    let mut beta = vec![vec![Slot::Zero; m]; m];
    let mut intercepts = Vec::new();
    let mut cov_decl: Vec<(VarRef, VarRef, Slot, usize, usize)> = Vec::new();
    let mut thresholds = BTreeMap::new();
    for s in &stmts {
        match s.op {
            Operator::Measure => {}
            Operator::Regress => {
                let lhs = resolve(&s.lhs, s.line, s.column)?;
                for t in &s.terms {
                    match &t.target {
                        Target::One => {
                            if intercepts.contains(&lhs) {
                                return Err(perr(
                                    t.line,
                                    t.column,
                                    format!("duplicate intercept for `{}`", s.lhs),
                                ));
                            }
                            intercepts.push(lhs);
                        }
                        Target::Name(n) => {
                            let h = match lhs {
                                VarRef::Latent(h) => h,
                                VarRef::Observed(_) => {
                                    return Err(perr(s.line, s.column, format!("`{}` is observed; regressions must be among latent variables", s.lhs)))
                                }
                            };
                            let g = match lat_index(n) {
                                Some(g) => g,
                                None if obs_index(n).is_some() => {
                                    return Err(perr(t.line, t.column, format!("`{n}` is observed; regressions must be among latent variables")))
                                }
                                None => return Err(perr(t.line, t.column, format!("`{n}` has no measurement statement"))),
                            };
                            if g == h {
                                return Err(perr(
                                    t.line,
                                    t.column,
                                    format!("`{n}` cannot regress on itself"),
                                ));
                            }
                            if beta[h][g] != Slot::Zero {
                                return Err(perr(
                                    t.line,
                                    t.column,
                                    format!("duplicate regression of `{}` on `{n}`", s.lhs),
                                ));
                            }
                            beta[h][g] = match t.modifier {
                                None | Some(Modifier::Free) => Slot::Free,
                                Some(Modifier::Fixed(c)) => Slot::Fixed(c),
                            };
                        }
                    }
                }
            }
            Operator::Covary => {
                let a = resolve(&s.lhs, s.line, s.column)?;
                for t in &s.terms {
                    let Target::Name(n) = &t.target else {
                        return Err(perr(t.line, t.column, "`1` cannot appear in a covariance"));
                    };
                    let b = resolve(n, t.line, t.column)?;
                    let same_kind = matches!(
                        (a, b),
                        (VarRef::Latent(_), VarRef::Latent(_))
                            | (VarRef::Observed(_), VarRef::Observed(_))
                    );
                    if !same_kind {
                        return Err(perr(t.line, t.column, "covariances between a latent and an observed variable are not supported"));
                    }
                    let key = (a.min(b), a.max(b));
                    if cov_decl.iter().any(|c| (c.0, c.1) == key) {
                        return Err(perr(
                            t.line,
                            t.column,
                            format!("duplicate covariance `{} ~~ {n}`", s.lhs),
                        ));
                    }
                    let slot = match t.modifier {
                        None | Some(Modifier::Free) => Slot::Free,
                        Some(Modifier::Fixed(c)) => Slot::Fixed(c),
                    };
                    cov_decl.push((key.0, key.1, slot, t.line, t.column));
                }
            }
            Operator::Threshold => {
                let i = match resolve(&s.lhs, s.line, s.column)? {
                    VarRef::Observed(i) => i,
                    VarRef::Latent(_) => {
                        return Err(perr(
                            s.line,
                            s.column,
                            format!("`{}` is latent and has no thresholds", s.lhs),
                        ))
                    }
                };
                if thresholds.contains_key(&i) {
                    return Err(perr(
                        s.line,
                        s.column,
                        format!("thresholds of `{}` declared twice", s.lhs),
                    ));
                }
                let mut anchors = Vec::new();
                for (k, t) in s.terms.iter().enumerate() {
                    let expected = format!("t{}", k + 1);
                    if t.target != Target::Name(expected.clone()) {
                        return Err(perr(t.line, t.column, format!("expected `{expected}`")));
                    }
                    anchors.push(match t.modifier {
                        Some(Modifier::Fixed(c)) => Some(c),
                        _ => None,
                    });
                }
                thresholds.insert(i, anchors);
            }
        }
    }

    // Σ_ζ: variances free, exogenous covariances free, then declarations.
    let exogenous: Vec<bool> = (0..m)
        .map(|h| beta[h].iter().all(|s| s.is_zero()))
        .collect();
    let mut psi = vec![vec![Slot::Zero; m]; m];
    for h in 0..m {
        psi[h][h] = Slot::Free;
        for g in 0..h {
            if exogenous[h] && exogenous[g] {
                psi[h][g] = Slot::Free;
                psi[g][h] = Slot::Free;
            }
        }
    }
    let mut theta_eps = vec![vec![Slot::Zero; p]; p];
    for (i, row) in theta_eps.iter_mut().enumerate() {
        row[i] = Slot::Free;
    }
    for (a, b, slot, line, column) in cov_decl {
        let slot = if slot == Slot::Fixed(0.0) {
            Slot::Zero
        } else {
            slot
        };
        match (a, b) {
            (VarRef::Latent(g), VarRef::Latent(h)) => {
                if g == h && slot == Slot::Zero {
                    return Err(perr(
                        line,
                        column,
                        format!("variance of `{}` cannot be zero", latents[g]),
                    ));
                }
                psi[g][h] = slot;
                psi[h][g] = slot;
            }
            (VarRef::Observed(i), VarRef::Observed(j)) => {
                theta_eps[i][j] = slot;
                theta_eps[j][i] = slot;
            }
            _ => unreachable!("mixed covariances rejected above"),
        }
    }

    let parameterization = if thresholds
        .values()
        .any(|a: &Vec<Option<f64>>| a.iter().any(Option::is_some))
    {
        Parameterization::Alternative
    } else {
        Parameterization::Standard
    };
    Ok(ModelSpec {
        observed,
        latents,
        scaling,
        lambda,
        beta,
        psi,
        theta_eps,
        thresholds,
        intercepts,
        parameterization,
    })
}

fn slot_prefix(s: Slot) -> String {
    match s {
        Slot::Fixed(c) => format!("{c}*"),
        _ => String::new(),
    }
}

impl ModelSpec {
    pub fn n_observed(&self) -> usize {
        self.observed.len()
    }

    pub fn n_latent(&self) -> usize {
        self.latents.len()
    }

    pub fn observed_index(&self, name: &str) -> Option<usize> {
        self.observed.iter().position(|x| x == name)
    }

    /// Latents without incoming regressions.
    pub fn is_exogenous(&self, h: usize) -> bool {
        self.beta[h].iter().all(Slot::is_zero)
    }

    /// Latent whose scaling indicator is observed variable `i`.
    pub fn scaled_latent(&self, i: usize) -> Option<usize> {
        self.scaling.iter().position(|&s| s == i)
    }

    /// `anc[f][g]`: g reaches f along regression paths (g == f included),
    /// i.e. the structural pattern of (I − B)⁻¹.
    pub fn reach(&self) -> Vec<Vec<bool>> {
        let m = self.n_latent();
        let mut r = vec![vec![false; m]; m];
        for (f, row) in r.iter_mut().enumerate() {
            row[f] = true;
        }
        loop {
            let mut changed = false;
            for f in 0..m {
                for h in 0..m {
                    if !self.beta[f][h].is_zero() {
                        for g in 0..m {
                            if r[h][g] && !r[f][g] {
                                r[f][g] = true;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                return r;
            }
        }
    }

    /// Canonical syntax. Parsing it again yields the same model.
    pub fn to_syntax(&self) -> String {
        let mut out = String::new();
        for (f, name) in self.latents.iter().enumerate() {
            let s = self.scaling[f];
            let mut terms = vec![format!("1*{}", self.observed[s])];
            for i in 0..self.n_observed() {
                if i != s && self.lambda[i][f] != Slot::Zero {
                    terms.push(format!(
                        "{}{}",
                        slot_prefix(self.lambda[i][f]),
                        self.observed[i]
                    ));
                }
            }
            let _ = writeln!(out, "{name} =~ {}", terms.join(" + "));
        }
        for (h, name) in self.latents.iter().enumerate() {
            let terms: Vec<String> = (0..self.n_latent())
                .filter(|&g| self.beta[h][g] != Slot::Zero)
                .map(|g| format!("{}{}", slot_prefix(self.beta[h][g]), self.latents[g]))
                .collect();
            if !terms.is_empty() {
                let _ = writeln!(out, "{name} ~ {}", terms.join(" + "));
            }
        }
        let m = self.n_latent();
        for g in 0..m {
            for h in g..m {
                let default = if g == h {
                    Slot::Free
                } else if self.is_exogenous(g) && self.is_exogenous(h) {
                    Slot::Free
                } else {
                    Slot::Zero
                };
                let s = self.psi[g][h];
                if s != default {
                    let pre = if s == Slot::Zero {
                        "0*".to_string()
                    } else {
                        slot_prefix(s)
                    };
                    let _ = writeln!(out, "{} ~~ {pre}{}", self.latents[g], self.latents[h]);
                }
            }
        }
        let p = self.n_observed();
        for i in 0..p {
            for j in i..p {
                let default = if i == j { Slot::Free } else { Slot::Zero };
                let s = self.theta_eps[i][j];
                if s != default {
                    let pre = if s == Slot::Zero {
                        "0*".to_string()
                    } else {
                        slot_prefix(s)
                    };
                    let _ = writeln!(out, "{} ~~ {pre}{}", self.observed[i], self.observed[j]);
                }
            }
        }
        for (&i, anchors) in &self.thresholds {
            let terms: Vec<String> = anchors
                .iter()
                .enumerate()
                .map(|(k, a)| match a {
                    Some(v) => format!("{v}*t{}", k + 1),
                    None => format!("t{}", k + 1),
                })
                .collect();
            let _ = writeln!(out, "{} | {}", self.observed[i], terms.join(" + "));
        }
        for v in &self.intercepts {
            let name = match *v {
                VarRef::Observed(i) => &self.observed[i],
                VarRef::Latent(h) => &self.latents[h],
            };
            let _ = writeln!(out, "{name} ~ 1");
        }
        out
    }
}

/// Where an equation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EquationKind {
    /// Non-scaling indicator `i`.
    Measurement(usize),
    /// Latent `h` with incoming regressions.
    Latent(usize),
}

/// The parameter a regressor coefficient estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoefRef {
    /// λ(indicator, latent)
    Loading(usize, usize),
    /// B(outcome, predictor)
    Regression(usize, usize),
}

/// One estimating equation in observed variables.
#[derive(Debug, Clone, PartialEq)]
pub struct MiivEquation {
    pub kind: EquationKind,
    /// Observed dependent variable.
    pub dependent: usize,
    /// Scaling indicators whose coefficients are free.
    pub regressors: Vec<usize>,
    pub coefs: Vec<CoefRef>,
    /// Scaling indicators with fixed coefficients, moved to the left side.
    pub fixed: Vec<(usize, f64)>,
    /// ε terms of the composite error (observed indices).
    pub error_eps: Vec<usize>,
    /// ζ terms of the composite error (latent indices).
    pub error_zeta: Vec<usize>,
    pub instruments: Vec<usize>,
}

impl MiivEquation {
    /// Dependent combination y_d − Σ c·y_fixed as (observed, weight).
    pub fn weights(&self) -> Vec<(usize, f64)> {
        let mut w = vec![(self.dependent, 1.0)];
        w.extend(self.fixed.iter().map(|&(i, c)| (i, -c)));
        w
    }

    pub fn label(&self, model: &ModelSpec) -> String {
        match self.kind {
            EquationKind::Measurement(i) => model.observed[i].clone(),
            EquationKind::Latent(h) => model.latents[h].clone(),
        }
    }
}

/// Estimating equations, one per non-scaling indicator and one per latent
/// with incoming regressions. Instruments are left empty.
pub fn to_estimating_system(model: &ModelSpec) -> Result<Vec<MiivEquation>> {
    let (p, m) = (model.n_observed(), model.n_latent());
    let mut eqs = Vec::new();
    for i in 0..p {
        if model.scaled_latent(i).is_some() {
            continue;
        }
        let mut eq = MiivEquation {
            kind: EquationKind::Measurement(i),
            dependent: i,
            regressors: Vec::new(),
            coefs: Vec::new(),
            fixed: Vec::new(),
            error_eps: vec![i],
            error_zeta: Vec::new(),
            instruments: Vec::new(),
        };
        for f in 0..m {
            let s = model.scaling[f];
            match model.lambda[i][f] {
                Slot::Zero => continue,
                Slot::Free => {
                    eq.regressors.push(s);
                    eq.coefs.push(CoefRef::Loading(i, f));
                }
                Slot::Fixed(c) if c == 0.0 => continue,
                Slot::Fixed(c) => eq.fixed.push((s, c)),
            }
            eq.error_eps.push(s);
        }
        if eq.error_eps.len() == 1 {
            return Err(Error::Specification(format!(
                "`{}` loads on no latent variable",
                model.observed[i]
            )));
        }
        eqs.push(eq);
    }
    for h in 0..m {
        if model.is_exogenous(h) {
            continue;
        }
        let sh = model.scaling[h];
        let mut eq = MiivEquation {
            kind: EquationKind::Latent(h),
            dependent: sh,
            regressors: Vec::new(),
            coefs: Vec::new(),
            fixed: Vec::new(),
            error_eps: vec![sh],
            error_zeta: vec![h],
            instruments: Vec::new(),
        };
        for g in 0..m {
            let sg = model.scaling[g];
            match model.beta[h][g] {
                Slot::Zero => continue,
                Slot::Free => {
                    eq.regressors.push(sg);
                    eq.coefs.push(CoefRef::Regression(h, g));
                }
                Slot::Fixed(c) if c == 0.0 => continue,
                Slot::Fixed(c) => eq.fixed.push((sg, c)),
            }
            eq.error_eps.push(sg);
        }
        eqs.push(eq);
    }
    Ok(eqs)
}

/// Fill in the model-implied instruments of every equation: observed
/// variables whose covariance with each composite-error term is zero by
/// the model's structure. Fails when an equation has fewer instruments
/// than free regressors.
pub fn find_miivs(mut system: Vec<MiivEquation>, model: &ModelSpec) -> Result<Vec<MiivEquation>> {
    let reach = model.reach();
    let (p, m) = (model.n_observed(), model.n_latent());
    for eq in &mut system {
        eq.instruments = (0..p)
            .filter(|&v| {
                let eps_hit = eq
                    .error_eps
                    .iter()
                    .any(|&k| k == v || !model.theta_eps[v][k].is_zero());
                let zeta_hit = (0..m).filter(|&f| !model.lambda[v][f].is_zero()).any(|f| {
                    (0..m).any(|g| {
                        reach[f][g] && eq.error_zeta.iter().any(|&h| !model.psi[g][h].is_zero())
                    })
                });
                !(eps_hit || zeta_hit)
            })
            .collect();
        if eq.instruments.len() < eq.regressors.len() {
            return Err(Error::Identification {
                equation: eq.label(model),
                message: format!(
                    "{} model-implied instruments for {} regressors",
                    eq.instruments.len(),
                    eq.regressors.len()
                ),
            });
        }
    }
    Ok(system)
}

/// Estimating system with instruments.
pub fn build_system(model: &ModelSpec) -> Result<Vec<MiivEquation>> {
    find_miivs(to_estimating_system(model)?, model)
}

fn submatrix(s: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| s[(rows[a], cols[b])])
}

/// Instrument strength per regressor:
/// diag(S_VXᵀ S_VV⁻¹ S_VX S_XX⁻¹).
pub fn shea_r2(eq: &MiivEquation, sigma: &DMatrix<f64>, label: &str) -> Result<Vec<f64>> {
    if eq.regressors.is_empty() {
        return Ok(Vec::new());
    }
    let svv = submatrix(sigma, &eq.instruments, &eq.instruments);
    let svx = submatrix(sigma, &eq.instruments, &eq.regressors);
    let sxx = submatrix(sigma, &eq.regressors, &eq.regressors);
    let singular = |what: &str| Error::Instrument {
        equation: label.to_string(),
        message: format!("{what} covariance matrix is singular"),
    };
    let vv_inv = svv.try_inverse().ok_or_else(|| singular("instrument"))?;
    let xx_inv = sxx.try_inverse().ok_or_else(|| singular("regressor"))?;
    let r = svx.transpose() * vv_inv * &svx * xx_inv;
    Ok(r.diagonal().iter().copied().collect())
}

/// Map from parameter cells to stable labels.
pub fn coef_label(model: &ModelSpec, c: CoefRef) -> String {
    match c {
        CoefRef::Loading(i, f) => format!("{}=~{}", model.latents[f], model.observed[i]),
        CoefRef::Regression(h, g) => format!("{}~{}", model.latents[h], model.latents[g]),
    }
}

/// Observed names paired with positions, for callers that align data.
pub fn observed_positions(model: &ModelSpec) -> HashMap<String, usize> {
    model
        .observed
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect()
}
