//! PIV estimation: equation-wise 2SLS on the moment matrices for the
//! loadings, regressions and intercepts (θ₁), closed-form weighted least
//! squares for the variance parameters (θ₂), and delta-method covariances
//! of both.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::layout::{MomentLayout, StatKey};
use crate::modelir::{
    build_system, coef_label, CoefRef, EquationKind, MiivEquation, ModelSpec, Parameterization,
    Slot,
};
use crate::moments1::{
    assemble_omega_with, Stage1Options, StageOneStats, VariableKind, VariableMeta,
};
use crate::patcalc::{commutation_matrix, kron, LStructure, PatternSpec};
use crate::reparam::{transform_moments, Anchor, ReparamSpec, ReparamStats};

/// Moments handed to the estimator, with the covariance of their free
/// elements under an explicit layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentInput {
    pub names: Vec<String>,
    pub kinds: Vec<VariableKind>,
    pub categories: Vec<Vec<i64>>,
    /// Anchors already applied to these moments.
    pub anchors: Vec<Anchor>,
    /// μ*
    pub means: DVector<f64>,
    /// Σ*
    pub sigma: DMatrix<f64>,
    pub thresholds: Vec<Vec<f64>>,
    pub layout: MomentLayout,
    pub acov: DMatrix<f64>,
    pub n_obs: usize,
}

impl MomentInput {
    pub fn from_stage1(st: &StageOneStats) -> Self {
        Self {
            names: st.names.clone(),
            kinds: st.kinds.clone(),
            categories: st.categories.clone(),
            anchors: vec![Anchor::None; st.n_vars()],
            means: st.means.clone(),
            sigma: st.sigma.clone(),
            thresholds: st.thresholds.clone(),
            layout: st.layout.clone(),
            acov: st.acov.clone(),
            n_obs: st.n_obs,
        }
    }

    pub fn from_reparam(r: &ReparamStats) -> Self {
        Self {
            names: r.names.clone(),
            kinds: r.kinds.clone(),
            categories: r.categories.clone(),
            anchors: r.anchors.clone(),
            means: r.mu_ddot.clone(),
            sigma: r.sigma_ddot.clone(),
            thresholds: r.tau_ddot.clone(),
            layout: r.layout.clone(),
            acov: r.acov.clone(),
            n_obs: r.n_obs,
        }
    }

    /// Back to stage-one form; only valid before any anchoring.
    pub fn to_stage1(&self) -> Result<StageOneStats> {
        if self.is_anchored() {
            return Err(Error::Validation("moments are already anchored".into()));
        }
        Ok(StageOneStats {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            categories: self.categories.clone(),
            means: self.means.clone(),
            variances: self.sigma.diagonal(),
            thresholds: self.thresholds.clone(),
            sigma: self.sigma.clone(),
            layout: self.layout.clone(),
            acov: self.acov.clone(),
            n_obs: self.n_obs,
            boundary_pairs: Vec::new(),
            bootstrap_used: None,
        })
    }

    pub fn is_anchored(&self) -> bool {
        self.anchors.iter().any(|a| *a != Anchor::None)
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, key: &StatKey) -> f64 {
        match *key {
            StatKey::Mean(j) => self.means[j],
            StatKey::Threshold(j, k) => self.thresholds[j][k],
            StatKey::Cov(i, j) => self.sigma[(i, j)],
        }
    }

    /// Free statistics stacked in layout order.
    pub fn values(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.layout.len(),
            self.layout.keys().iter().map(|k| self.value(k)),
        )
    }

    /// Copy with the free statistics replaced.
    pub fn with_values(&self, v: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for (key, &x) in self.layout.keys().iter().zip(v.iter()) {
            match *key {
                StatKey::Mean(j) => out.means[j] = x,
                StatKey::Threshold(j, k) => out.thresholds[j][k] = x,
                StatKey::Cov(i, j) => {
                    out.sigma[(i, j)] = x;
                    out.sigma[(j, i)] = x;
                }
            }
        }
        out
    }

    pub fn mean_free(&self, j: usize) -> bool {
        self.layout.contains(&StatKey::Mean(j))
    }

    pub fn variance_free(&self, j: usize) -> bool {
        self.layout.contains(&StatKey::Cov(j, j))
    }

    /// Restrict to `names` in that order. Statistics involving dropped
    /// variables are removed along with their rows of the acov.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let mut map = vec![usize::MAX; self.n_vars()];
        let mut idx = Vec::with_capacity(names.len());
        for (new, name) in names.iter().enumerate() {
            let old = self
                .index_of(name)
                .ok_or_else(|| Error::Validation(format!("moments have no variable `{name}`")))?;
            map[old] = new;
            idx.push(old);
        }
        let keep = |k: &StatKey| match *k {
            StatKey::Mean(j) | StatKey::Threshold(j, _) => map[j] != usize::MAX,
            StatKey::Cov(i, j) => map[i] != usize::MAX && map[j] != usize::MAX,
        };
        let rows: Vec<usize> = (0..self.layout.len())
            .filter(|&r| keep(&self.layout.keys()[r]))
            .collect();
        let keys: Vec<StatKey> = rows
            .iter()
            .map(|&r| self.layout.keys()[r].relabel(&map))
            .collect();
        Ok(Self {
            names: names.to_vec(),
            kinds: idx.iter().map(|&j| self.kinds[j]).collect(),
            categories: idx.iter().map(|&j| self.categories[j].clone()).collect(),
            anchors: idx.iter().map(|&j| self.anchors[j]).collect(),
            means: DVector::from_iterator(idx.len(), idx.iter().map(|&j| self.means[j])),
            sigma: DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.sigma[(idx[a], idx[b])]),
            thresholds: idx.iter().map(|&j| self.thresholds[j].clone()).collect(),
            layout: MomentLayout::new(keys),
            acov: DMatrix::from_fn(rows.len(), rows.len(), |a, b| self.acov[(rows[a], rows[b])]),
            n_obs: self.n_obs,
        })
    }

    pub fn to_file(&self) -> MomentFile {
        MomentFile {
            schema_version: MOMENT_SCHEMA_VERSION,
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            categories: self.categories.clone(),
            anchors: self.anchors.clone(),
            means: self.means.iter().copied().collect(),
            sigma: rows_of(&self.sigma),
            thresholds: self.thresholds.clone(),
            keys: self.layout.keys().to_vec(),
            acov: rows_of(&self.acov),
            n_obs: self.n_obs,
        }
    }

    pub fn from_file(f: &MomentFile) -> Result<Self> {
        if f.schema_version != MOMENT_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "moment file schema {} is not supported (expected {MOMENT_SCHEMA_VERSION})",
                f.schema_version
            )));
        }
        let p = f.names.len();
        let d = f.keys.len();
        let ok = f.kinds.len() == p
            && f.categories.len() == p
            && f.anchors.len() == p
            && f.means.len() == p
            && f.thresholds.len() == p
            && f.sigma.len() == p
            && f.sigma.iter().all(|r| r.len() == p)
            && f.acov.len() == d
            && f.acov.iter().all(|r| r.len() == d);
        if !ok {
            return Err(Error::Validation(
                "moment file dimensions are inconsistent".into(),
            ));
        }
        for key in &f.keys {
            let bad = match *key {
                StatKey::Mean(j) => j >= p,
                StatKey::Threshold(j, k) => j >= p || k >= f.thresholds[j].len(),
                StatKey::Cov(i, j) => i >= p || j > i,
            };
            if bad {
                return Err(Error::Validation(format!(
                    "moment file key {key:?} is out of range"
                )));
            }
        }
        let sigma = DMatrix::from_fn(p, p, |i, j| f.sigma[i][j]);
        if (&sigma - sigma.transpose()).amax() > 0.0 {
            return Err(Error::Validation("moment file Σ* is not symmetric".into()));
        }
        Ok(Self {
            names: f.names.clone(),
            kinds: f.kinds.clone(),
            categories: f.categories.clone(),
            anchors: f.anchors.clone(),
            means: DVector::from_vec(f.means.clone()),
            sigma,
            thresholds: f.thresholds.clone(),
            layout: MomentLayout::new(f.keys.clone()),
            acov: DMatrix::from_fn(d, d, |i, j| f.acov[i][j]),
            n_obs: f.n_obs,
        })
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub const MOMENT_SCHEMA_VERSION: u32 = 1;

/// Serializable form of [`MomentInput`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentFile {
    pub schema_version: u32,
    pub names: Vec<String>,
    pub kinds: Vec<VariableKind>,
    pub categories: Vec<Vec<i64>>,
    pub anchors: Vec<Anchor>,
    pub means: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub thresholds: Vec<Vec<f64>>,
    pub keys: Vec<StatKey>,
    pub acov: Vec<Vec<f64>>,
    pub n_obs: usize,
}

/// Weight matrix for the variance-parameter fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weight {
    /// Pseudo-inverse of the covariance block of Var(π).
    Full,
    /// Inverse of its diagonal.
    #[default]
    Diagonal,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitOptions {
    /// Overrides the parameterization implied by the model text.
    pub parameterization: Option<Parameterization>,
    /// Extra anchors by variable name, applied over the model's.
    pub anchors: BTreeMap<String, Anchor>,
    pub weight: Weight,
    pub stage1: Stage1Options,
}

/// Estimates of the equation coefficients and intercepts.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta1Fit {
    /// Free coefficients in equation order.
    pub coefs: Vec<(CoefRef, f64)>,
    /// Intercept of each equation and whether it is free.
    pub intercepts: Vec<(EquationKind, f64, bool)>,
    /// ∂θ₁/∂πᵀ; rows are the free coefficients then the free intercepts.
    pub k: DMatrix<f64>,
    /// Instrument strength per free coefficient.
    pub shea: Vec<f64>,
}

impl Theta1Fit {
    /// Free θ₁ in row order of `k`.
    pub fn values(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.coefs.iter().map(|c| c.1).collect();
        v.extend(self.intercepts.iter().filter(|i| i.2).map(|i| i.1));
        DVector::from_vec(v)
    }
}

fn sub(s: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| s[(rows[a], cols[b])])
}

struct EqFit {
    theta: DVector<f64>,
    alpha: f64,
    alpha_free: bool,
    /// rows: θ then α; cols: π
    k: DMatrix<f64>,
    shea: Vec<f64>,
}

fn fit_equation(eq: &MiivEquation, label: &str, input: &MomentInput) -> Result<EqFit> {
    let (v, z) = (&eq.instruments, &eq.regressors);
    let (nv, nz) = (v.len(), z.len());
    let w = eq.weights();
    let lay = &input.layout;
    let d = lay.len();
    let s = &input.sigma;
    let mu = &input.means;

    let mut k = DMatrix::zeros(nz + 1, d);
    let theta = if nz == 0 {
        DVector::zeros(0)
    } else {
        let a = sub(s, v, z);
        let b = DVector::from_fn(nv, |r, _| w.iter().map(|&(j, c)| c * s[(v[r], j)]).sum());
        let svv = sub(s, v, v);
        let wm = svv.try_inverse().ok_or_else(|| Error::Instrument {
            equation: label.to_string(),
            message: "instrument covariance matrix is singular".into(),
        })?;
        let u = a.transpose() * &wm * &a;
        let u_inv = u.try_inverse().ok_or_else(|| Error::Identification {
            equation: label.to_string(),
            message: "instruments do not determine the regressors (rank-deficient instrument-regressor covariance)".into(),
        })?;
        let g = &u_inv * a.transpose() * &wm;
        let theta = &g * &b;
        let e = &b - &a * &theta;
        let ew = DMatrix::from_row_slice(1, nv, (e.transpose() * &wm).as_slice());
        let theta_t = DMatrix::from_row_slice(1, nz, theta.as_slice());

        let d_a = kron(&ew, &u_inv) * commutation_matrix(nz, nv) - kron(&theta_t, &g);
        let d_s = -kron(&ew, &g);
        let mut add = |key: StatKey, col: DVector<f64>| {
            if let Some(c) = lay.position(&key) {
                for r in 0..nz {
                    k[(r, c)] += col[r];
                }
            }
        };
        for cz in 0..nz {
            for r in 0..nv {
                add(
                    StatKey::cov(v[r], z[cz]),
                    d_a.column(r + cz * nv).into_owned(),
                );
            }
        }
        for r in 0..nv {
            for &(j, c) in &w {
                add(StatKey::cov(v[r], j), g.column(r) * c);
            }
        }
        for c2 in 0..nv {
            for r in 0..nv {
                add(
                    StatKey::cov(v[r], v[c2]),
                    d_s.column(r + c2 * nv).into_owned(),
                );
            }
        }
        theta
    };

    // α = Σ w·μ − μ_zᵀθ
    let mu_z = DVector::from_fn(nz, |c, _| mu[z[c]]);
    let alpha = w.iter().map(|&(j, c)| c * mu[j]).sum::<f64>() - mu_z.dot(&theta);
    let alpha_free = w
        .iter()
        .map(|x| x.0)
        .chain(z.iter().copied())
        .any(|j| input.mean_free(j));
    let dtheta_mu = mu_z.transpose() * k.rows(0, nz);
    for c in 0..d {
        k[(nz, c)] = -dtheta_mu[c];
    }
    for &(j, c) in &w {
        if let Some(col) = lay.position(&StatKey::Mean(j)) {
            k[(nz, col)] += c;
        }
    }
    for (cz, &j) in z.iter().enumerate() {
        if let Some(col) = lay.position(&StatKey::Mean(j)) {
            k[(nz, col)] -= theta[cz];
        }
    }
    let shea = crate::modelir::shea_r2(eq, s, label)?;
    Ok(EqFit {
        theta,
        alpha,
        alpha_free,
        k,
        shea,
    })
}

/// Equation-wise 2SLS on the moment matrices, with ∂θ₁/∂π.
pub fn fit_theta1(
    model: &ModelSpec,
    system: &[MiivEquation],
    input: &MomentInput,
) -> Result<Theta1Fit> {
    let fits: Vec<Result<EqFit>> = system
        .par_iter()
        .map(|eq| fit_equation(eq, &eq.label(model), input))
        .collect();
    let fits: Vec<EqFit> = fits.into_iter().collect::<Result<_>>()?;
    let mut coefs = Vec::new();
    let mut shea = Vec::new();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for (eq, f) in system.iter().zip(&fits) {
        for (c, &cref) in eq.coefs.iter().enumerate() {
            coefs.push((cref, f.theta[c]));
            shea.push(f.shea[c]);
            rows.push(f.k.row(c).transpose());
        }
    }
    let mut intercepts = Vec::new();
    for (eq, f) in system.iter().zip(&fits) {
        intercepts.push((eq.kind, f.alpha, f.alpha_free));
        if f.alpha_free {
            rows.push(f.k.row(eq.regressors.len()).transpose());
        }
    }
    let d = input.layout.len();
    let k = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
    Ok(Theta1Fit {
        coefs,
        intercepts,
        k,
        shea,
    })
}

/// Var(θ₁) = K·Var(π)·Kᵀ.
pub fn vcov_theta1(t1: &Theta1Fit, input: &MomentInput) -> DMatrix<f64> {
    let v = &t1.k * &input.acov * t1.k.transpose();
    (&v + v.transpose()) * 0.5
}

/// Parameter matrices of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub lambda: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub theta_eps: DMatrix<f64>,
    pub alpha_y: DVector<f64>,
    pub alpha_eta: DVector<f64>,
}

impl ModelParams {
    /// Fixed values of the model, zero where free.
    pub fn fixed_part(model: &ModelSpec) -> Self {
        let val = |s: Slot| match s {
            Slot::Fixed(c) => c,
            _ => 0.0,
        };
        let (p, m) = (model.n_observed(), model.n_latent());
        Self {
            lambda: DMatrix::from_fn(p, m, |i, f| val(model.lambda[i][f])),
            beta: DMatrix::from_fn(m, m, |h, g| val(model.beta[h][g])),
            psi: DMatrix::from_fn(m, m, |g, h| val(model.psi[g][h])),
            theta_eps: DMatrix::from_fn(p, p, |i, j| val(model.theta_eps[i][j])),
            alpha_y: DVector::zeros(p),
            alpha_eta: DVector::zeros(m),
        }
    }

    /// (I − B)⁻¹
    pub fn total_effects(&self) -> Result<DMatrix<f64>> {
        let m = self.beta.nrows();
        (DMatrix::identity(m, m) - &self.beta)
            .try_inverse()
            .ok_or_else(|| Error::Specification("I − B is singular".into()))
    }
}

/// Σ(θ) = ΛFΣ_ζFᵀΛᵀ + Σ_ε and μ(θ) = α_y + ΛFα_η with F = (I − B)⁻¹.
pub fn implied_moments(params: &ModelParams) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let f = params.total_effects()?;
    let lf = &params.lambda * f;
    let sigma = &lf * &params.psi * lf.transpose() + &params.theta_eps;
    let mu = &params.alpha_y + &lf * &params.alpha_eta;
    Ok(((&sigma + sigma.transpose()) * 0.5, mu))
}

/// One free variance parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarRef2 {
    Psi(usize, usize),
    Eps(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theta2Fit {
    pub entries: Vec<VarRef2>,
    pub values: DVector<f64>,
    /// Rows of π used: the free covariance elements.
    pub cov_keys: Vec<StatKey>,
    /// ∂σ/∂θ₂ at the used keys.
    pub j2: DMatrix<f64>,
    /// (J₂ᵀWJ₂)⁻¹J₂ᵀW
    pub h: DMatrix<f64>,
    /// The weight pseudo-inverse dropped directions.
    pub weight_truncated: bool,
}

fn free_psi(model: &ModelSpec) -> Vec<VarRef2> {
    let m = model.n_latent();
    let mut out = Vec::new();
    for h in 0..m {
        for g in h..m {
            if model.psi[g][h].is_free() {
                out.push(VarRef2::Psi(g, h));
            }
        }
    }
    out
}

fn free_eps(model: &ModelSpec, input: &MomentInput) -> Vec<VarRef2> {
    let p = model.n_observed();
    let mut out = Vec::new();
    for j in 0..p {
        for i in j..p {
            if model.theta_eps[i][j].is_free() && (i != j || input.variance_free(i)) {
                out.push(VarRef2::Eps(i, j));
            }
        }
    }
    out
}

fn cov_keys(input: &MomentInput) -> Vec<StatKey> {
    input
        .layout
        .keys()
        .iter()
        .filter(|k| matches!(k, StatKey::Cov(..)))
        .copied()
        .collect()
}

/// Rows of `Δ⁺` for the symmetric p×p pattern at the given keys.
fn key_rows(p: usize, keys: &[StatKey]) -> Result<DMatrix<f64>> {
    let pat = PatternSpec::symmetric(p);
    let l = LStructure::new(&pat)?;
    let el = l.elimination();
    let mut out = DMatrix::zeros(keys.len(), p * p);
    for (r, key) in keys.iter().enumerate() {
        let StatKey::Cov(i, j) = *key else {
            return Err(Error::Numerical(format!("{key:?} is not a covariance key")));
        };
        let k = pat
            .free_index(i, j)
            .expect("symmetric pattern is fully free");
        out.row_mut(r).copy_from(&el.row(k));
    }
    Ok(out)
}

/// ∂σ/∂θ₂ at `keys` for the given free entries.
pub fn jacobian_theta2(
    params: &ModelParams,
    entries: &[VarRef2],
    keys: &[StatKey],
) -> Result<DMatrix<f64>> {
    let p = params.lambda.nrows();
    let m = params.lambda.ncols();
    let lf = &params.lambda * params.total_effects()?;
    let sel = key_rows(p, keys)?;
    let psi_cols: Vec<(usize, usize)> = entries
        .iter()
        .filter_map(|e| {
            if let VarRef2::Psi(g, h) = *e {
                Some((g, h))
            } else {
                None
            }
        })
        .collect();
    let eps_cols: Vec<(usize, usize)> = entries
        .iter()
        .filter_map(|e| {
            if let VarRef2::Eps(i, j) = *e {
                Some((i, j))
            } else {
                None
            }
        })
        .collect();
    // Δ for the free cells of each symmetric matrix
    let dup = |n: usize, cells: &[(usize, usize)]| {
        let mut d = DMatrix::zeros(n * n, cells.len());
        for (c, &(i, j)) in cells.iter().enumerate() {
            d[(i + j * n, c)] = 1.0;
            d[(j + i * n, c)] = 1.0;
        }
        d
    };
    let jz = &sel * kron(&lf, &lf) * dup(m, &psi_cols);
    let je = &sel * dup(p, &eps_cols);
    let mut out = DMatrix::zeros(keys.len(), entries.len());
    let (mut a, mut b) = (0, 0);
    for (c, e) in entries.iter().enumerate() {
        match e {
            VarRef2::Psi(..) => {
                out.set_column(c, &jz.column(a));
                a += 1;
            }
            VarRef2::Eps(..) => {
                out.set_column(c, &je.column(b));
                b += 1;
            }
        }
    }
    Ok(out)
}

/// ∂σ/∂θ_BΛ at `keys`, columns in the order of `coefs`.
pub fn jacobian_theta1(
    params: &ModelParams,
    coefs: &[CoefRef],
    keys: &[StatKey],
) -> Result<DMatrix<f64>> {
    let p = params.lambda.nrows();
    let m = params.lambda.ncols();
    let f = params.total_effects()?;
    let lf = &params.lambda * &f;
    let fpf = &f * &params.psi * f.transpose();
    let lm = &params.lambda * &fpf; // ΛFΣ_ζFᵀ
    let eye_p = DMatrix::<f64>::identity(p, p);
    let d_lambda = kron(&lm, &eye_p) + kron(&eye_p, &lm) * commutation_matrix(m, p);
    let lfp = &lf * &params.psi * f.transpose(); // ΛFΣ_ζFᵀ
    let d_beta = kron(&lfp, &lf) + kron(&lf, &lfp) * commutation_matrix(m, m);
    let sel = key_rows(p, keys)?;
    let mut out = DMatrix::zeros(keys.len(), coefs.len());
    for (c, cref) in coefs.iter().enumerate() {
        let col = match *cref {
            CoefRef::Loading(i, fct) => d_lambda.column(i + fct * p).into_owned(),
            CoefRef::Regression(h, g) => d_beta.column(h + g * m).into_owned(),
        };
        out.set_column(c, &(&sel * col));
    }
    Ok(out)
}

fn weight_matrix(acov: &DMatrix<f64>, weight: Weight) -> (DMatrix<f64>, bool) {
    let n = acov.nrows();
    let zero = acov.amax() == 0.0;
    match weight {
        _ if zero => (DMatrix::identity(n, n), false),
        Weight::Identity => (DMatrix::identity(n, n), false),
        Weight::Diagonal => (
            DMatrix::from_diagonal(&acov.diagonal().map(|x| if x > 0.0 { 1.0 / x } else { 0.0 })),
            acov.diagonal().iter().any(|&x| x <= 0.0),
        ),
        Weight::Full => {
            let eig = SymmetricEigen::new((acov + acov.transpose()) * 0.5);
            let top = eig.eigenvalues.amax();
            let mut truncated = false;
            let inv = eig.eigenvalues.map(|l| {
                if l > 1e-10 * top {
                    1.0 / l
                } else {
                    truncated = true;
                    0.0
                }
            });
            (
                &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose(),
                truncated,
            )
        }
    }
}

fn theta2_label(model: &ModelSpec, e: VarRef2) -> String {
    match e {
        VarRef2::Psi(g, h) => format!("{}~~{}", model.latents[g], model.latents[h]),
        VarRef2::Eps(i, j) => format!("{}~~{}", model.observed[i], model.observed[j]),
    }
}

/// Closed-form weighted least squares for the free Σ_ζ and Σ_ε elements,
/// holding Λ and B at their θ₁ estimates. `params` carries those and the
/// fixed variance cells.
pub fn fit_theta2(
    model: &ModelSpec,
    params: &ModelParams,
    input: &MomentInput,
    weight: Weight,
) -> Result<Theta2Fit> {
    let mut entries = free_psi(model);
    entries.extend(free_eps(model, input));
    let keys = cov_keys(input);
    let j2 = jacobian_theta2(params, &entries, &keys)?;
    let (fixed_sigma, _) = implied_moments(params)?;
    let s = DVector::from_iterator(keys.len(), keys.iter().map(|k| input.value(k)));
    let c = DVector::from_iterator(
        keys.len(),
        keys.iter().map(|k| match *k {
            StatKey::Cov(i, j) => fixed_sigma[(i, j)],
            _ => unreachable!("covariance keys only"),
        }),
    );
    let pos: Vec<usize> = keys
        .iter()
        .map(|k| input.layout.position(k).expect("key from layout"))
        .collect();
    let block = DMatrix::from_fn(pos.len(), pos.len(), |a, b| input.acov[(pos[a], pos[b])]);
    let (w, weight_truncated) = weight_matrix(&block, weight);
    let jtw = j2.transpose() * &w;
    let info = &jtw * &j2;
    let n = entries.len();
    let chol = info.clone().cholesky();
    let inv = match chol {
        Some(ch) if n > 0 => ch.inverse(),
        _ if n == 0 => DMatrix::zeros(0, 0),
        _ => {
            let dead: Vec<String> = (0..n)
                .filter(|&c| j2.column(c).amax() == 0.0)
                .map(|c| theta2_label(model, entries[c]))
                .collect();
            let which = if dead.is_empty() {
                "variance parameters are jointly unidentified".to_string()
            } else {
                format!("no moment depends on {}", dead.join(", "))
            };
            return Err(Error::Identification {
                equation: "variances".into(),
                message: which,
            });
        }
    };
    let h = &inv * &jtw;
    let values = &h * (s - c);
    Ok(Theta2Fit {
        entries,
        values,
        cov_keys: keys,
        j2,
        h,
        weight_truncated,
    })
}

/// Var(θ₂) = H(S − J₁K)Var(π)(S − J₁K)ᵀHᵀ.
pub fn vcov_theta2(
    params: &ModelParams,
    t1: &Theta1Fit,
    t2: &Theta2Fit,
    input: &MomentInput,
) -> Result<DMatrix<f64>> {
    let d = input.layout.len();
    let nk = t2.cov_keys.len();
    let mut s = DMatrix::zeros(nk, d);
    for (r, k) in t2.cov_keys.iter().enumerate() {
        s[(r, input.layout.position(k).expect("key from layout"))] = 1.0;
    }
    let coefs: Vec<CoefRef> = t1.coefs.iter().map(|c| c.0).collect();
    let j1 = jacobian_theta1(params, &coefs, &t2.cov_keys)?;
    let ncoef = coefs.len();
    let k_coef = t1.k.rows(0, ncoef);
    let g = &t2.h * (s - j1 * k_coef);
    let v = &g * &input.acov * g.transpose();
    Ok((&v + v.transpose()) * 0.5)
}

/// Parameter groups used in summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    #[serde(rename = "tau")]
    Tau,
    #[serde(rename = "alpha_eta")]
    AlphaEta,
    #[serde(rename = "alpha_y_c")]
    AlphaYc,
    #[serde(rename = "alpha_y_o")]
    AlphaYo,
    #[serde(rename = "lambda_c")]
    LambdaC,
    #[serde(rename = "lambda_o")]
    LambdaO,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "eps_c")]
    EpsC,
    #[serde(rename = "eps_o")]
    EpsO,
    #[serde(rename = "zeta")]
    Zeta,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::Tau,
        ParamGroup::AlphaEta,
        ParamGroup::AlphaYc,
        ParamGroup::AlphaYo,
        ParamGroup::LambdaC,
        ParamGroup::LambdaO,
        ParamGroup::Beta,
        ParamGroup::EpsC,
        ParamGroup::EpsO,
        ParamGroup::Zeta,
    ];

    pub fn symbol(&self) -> &'static str {
        match self {
            ParamGroup::Tau => "τ",
            ParamGroup::AlphaEta => "α_η",
            ParamGroup::AlphaYc => "α_y(c)",
            ParamGroup::AlphaYo => "α_y(o)",
            ParamGroup::LambdaC => "Λ_y(c)",
            ParamGroup::LambdaO => "Λ_y(o)",
            ParamGroup::Beta => "B",
            ParamGroup::EpsC => "Σε(c)",
            ParamGroup::EpsO => "Σε(o)",
            ParamGroup::Zeta => "Σζ",
        }
    }
}

/// One reported parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub group: ParamGroup,
    pub estimate: f64,
    /// Absent for fixed and derived parameters.
    pub se: Option<f64>,
    pub free: bool,
    /// Instrument strength of the equation regressor (coefficients only).
    pub shea_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationReport {
    pub label: String,
    pub dependent: String,
    pub regressors: Vec<String>,
    pub instruments: Vec<String>,
    pub shea_r2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Vec<ParamEstimate>,
    pub equations: Vec<EquationReport>,
    pub theta1: Theta1Fit,
    pub theta1_names: Vec<String>,
    pub vcov_theta1: DMatrix<f64>,
    pub theta2: Theta2Fit,
    pub theta2_names: Vec<String>,
    pub vcov_theta2: DMatrix<f64>,
    pub estimates: ModelParams,
    pub implied_sigma: DMatrix<f64>,
    pub implied_mean: DVector<f64>,
    /// Σ_ζ has an eigenvalue below −1e-10.
    pub npd_sigma_zeta: bool,
    /// The estimated block of Σ_ε has an eigenvalue below −1e-10. Residual
    /// variances of standardized ordinal responses are not part of it.
    pub npd_sigma_eps: bool,
    /// Some residual variance of a standardized ordinal response is negative.
    pub negative_derived_variance: bool,
    pub parameterization: Parameterization,
    pub n_obs: usize,
    pub moments: MomentInput,
}

impl FitResult {
    pub fn npd(&self) -> bool {
        self.npd_sigma_zeta || self.npd_sigma_eps
    }

    pub fn param(&self, name: &str) -> Option<&ParamEstimate> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn npd(m: &DMatrix<f64>) -> bool {
    m.nrows() > 0 && SymmetricEigen::new(m.clone()).eigenvalues.min() < -1e-10
}

/// Anchors declared in the model text, checked against the moments.
pub fn model_anchors(model: &ModelSpec, input: &MomentInput) -> Result<BTreeMap<String, Anchor>> {
    let mut out = BTreeMap::new();
    for (&i, decl) in &model.thresholds {
        let name = &model.observed[i];
        let j = input
            .index_of(name)
            .ok_or_else(|| Error::Validation(format!("moments have no variable `{name}`")))?;
        let nt = input.thresholds[j].len();
        if input.kinds[j] != VariableKind::Ordinal {
            return Err(Error::Specification(format!(
                "`{name}` has thresholds declared but is continuous"
            )));
        }
        if decl.len() != nt {
            return Err(Error::Specification(format!(
                "`{name}` declares {} thresholds but the data have {nt}",
                decl.len()
            )));
        }
        let fixed: Vec<(usize, f64)> = decl
            .iter()
            .enumerate()
            .filter_map(|(k, a)| a.map(|v| (k, v)))
            .collect();
        let anchor = match fixed.as_slice() {
            [] => continue,
            [(index, value)] => Anchor::MeanOnly {
                index: *index,
                value: *value,
            },
            [(a, va), (b, vb)] => Anchor::MeanVariance {
                a: *a,
                b: *b,
                va: *va,
                vb: *vb,
            },
            _ => {
                return Err(Error::Specification(format!(
                    "`{name}`: at most two thresholds can be fixed"
                )))
            }
        };
        out.insert(name.clone(), anchor);
    }
    Ok(out)
}

/// Full anchor set: `declared` anchors, plus the default (0, 1) anchors for
/// every other ordinal variable under the alternative parameterization.
pub fn anchor_spec(
    input: &MomentInput,
    declared: &BTreeMap<String, Anchor>,
    param: Parameterization,
) -> Result<ReparamSpec> {
    let declared_any = declared.values().any(|a| *a != Anchor::None);
    match param {
        Parameterization::Standard if declared_any => Err(Error::Specification(
            "threshold anchors require the alternative parameterization".into(),
        )),
        Parameterization::Standard => Ok(ReparamSpec::standard()),
        Parameterization::Alternative => {
            let mut spec = ReparamSpec::default_alternative(&unanchored(input));
            for (name, a) in declared {
                if input.index_of(name).is_none() {
                    return Err(Error::Validation(format!(
                        "anchor given for unknown variable `{name}`"
                    )));
                }
                spec = spec.with(name.clone(), *a);
            }
            Ok(spec)
        }
    }
}

fn unanchored(input: &MomentInput) -> StageOneStats {
    let mut copy = input.clone();
    copy.anchors = vec![Anchor::None; input.n_vars()];
    copy.to_stage1().expect("anchors cleared")
}

/// Apply `spec` to unanchored moments, or check that already-anchored
/// moments carry exactly these anchors.
pub fn apply_anchors(input: &MomentInput, spec: &ReparamSpec) -> Result<MomentInput> {
    if input.is_anchored() {
        let wanted: Vec<Anchor> = input.names.iter().map(|n| spec.anchor(n)).collect();
        if wanted != input.anchors {
            return Err(Error::Specification(
                "moments were anchored differently from the requested threshold anchors".into(),
            ));
        }
        return Ok(input.clone());
    }
    if spec.is_standard() {
        return Ok(input.clone());
    }
    let r = transform_moments(&input.to_stage1()?, spec)?;
    Ok(MomentInput::from_reparam(&r))
}

/// Model variables of `input`, anchored as the model and options ask.
pub fn parameterize(
    model: &ModelSpec,
    input: &MomentInput,
    options: &FitOptions,
) -> Result<(MomentInput, Parameterization)> {
    let input = input.select(&model.observed)?;
    let mut declared = model_anchors(model, &input)?;
    declared.extend(options.anchors.iter().map(|(k, v)| (k.clone(), *v)));
    let param = options
        .parameterization
        .unwrap_or(if options.anchors.is_empty() {
            model.parameterization
        } else {
            Parameterization::Alternative
        });
    let spec = anchor_spec(&input, &declared, param)?;
    Ok((apply_anchors(&input, &spec)?, param))
}

/// Fit a model to precomputed moments.
pub fn fit_moments(
    model: &ModelSpec,
    input: &MomentInput,
    options: &FitOptions,
) -> Result<FitResult> {
    let (input, parameterization) =
        parameterize(model, input, options).map_err(|e| e.at_stage("reparameterization"))?;
    let system = build_system(model).map_err(|e| e.at_stage("instrument selection"))?;
    let t1 =
        fit_theta1(model, &system, &input).map_err(|e| e.at_stage("coefficient estimation"))?;
    let vcov1 = vcov_theta1(&t1, &input);

    let (p, m) = (model.n_observed(), model.n_latent());
    let mut est = ModelParams::fixed_part(model);
    for &(cref, v) in &t1.coefs {
        match cref {
            CoefRef::Loading(i, f) => est.lambda[(i, f)] = v,
            CoefRef::Regression(h, g) => est.beta[(h, g)] = v,
        }
    }
    for &(kind, v, _) in &t1.intercepts {
        match kind {
            EquationKind::Measurement(i) => est.alpha_y[i] = v,
            EquationKind::Latent(h) => est.alpha_eta[h] = v,
        }
    }
    for h in 0..m {
        if model.is_exogenous(h) {
            est.alpha_eta[h] = input.means[model.scaling[h]];
        }
    }
    let t2 = fit_theta2(model, &est, &input, options.weight)
        .map_err(|e| e.at_stage("variance estimation"))?;
    for (e, &v) in t2.entries.iter().zip(t2.values.iter()) {
        match *e {
            VarRef2::Psi(g, h) => {
                est.psi[(g, h)] = v;
                est.psi[(h, g)] = v;
            }
            VarRef2::Eps(i, j) => {
                est.theta_eps[(i, j)] = v;
                est.theta_eps[(j, i)] = v;
            }
        }
    }
    // variances fixed by the parameterization: Σ*_jj − [ΛFΣ_ζFᵀΛᵀ]_jj
    let mut derived = Vec::new();
    {
        let mut no_eps = est.clone();
        no_eps.theta_eps = DMatrix::zeros(p, p);
        let (common, _) = implied_moments(&no_eps)?;
        for j in 0..p {
            if !input.variance_free(j) {
                let v = input.sigma[(j, j)] - common[(j, j)];
                est.theta_eps[(j, j)] = v;
                derived.push(j);
            }
        }
    }
    let vcov2 =
        vcov_theta2(&est, &t1, &t2, &input).map_err(|e| e.at_stage("variance estimation"))?;
    let (implied_sigma, implied_mean) = implied_moments(&est)?;

    let params = report(
        model, &input, &system, &t1, &vcov1, &t2, &vcov2, &est, &derived,
    );
    let equations = system
        .iter()
        .map(|eq| EquationReport {
            label: eq.label(model),
            dependent: model.observed[eq.dependent].clone(),
            regressors: eq
                .regressors
                .iter()
                .map(|&i| model.observed[i].clone())
                .collect(),
            instruments: eq
                .instruments
                .iter()
                .map(|&i| model.observed[i].clone())
                .collect(),
            shea_r2: crate::modelir::shea_r2(eq, &input.sigma, &eq.label(model))
                .unwrap_or_default(),
        })
        .collect();
    let mut theta1_names: Vec<String> = t1.coefs.iter().map(|c| coef_label(model, c.0)).collect();
    theta1_names.extend(
        t1.intercepts
            .iter()
            .filter(|i| i.2)
            .map(|i| intercept_label(model, i.0)),
    );
    let theta2_names = t2.entries.iter().map(|&e| theta2_label(model, e)).collect();
    Ok(FitResult {
        params,
        equations,
        npd_sigma_zeta: npd(&est.psi),
        npd_sigma_eps: {
            let keep: Vec<usize> = (0..p).filter(|j| !derived.contains(j)).collect();
            npd(&sub(&est.theta_eps, &keep, &keep))
        },
        negative_derived_variance: derived.iter().any(|&j| est.theta_eps[(j, j)] < -1e-10),
        theta1: t1,
        theta1_names,
        vcov_theta1: vcov1,
        theta2: t2,
        theta2_names,
        vcov_theta2: vcov2,
        estimates: est,
        implied_sigma,
        implied_mean,
        parameterization,
        n_obs: input.n_obs,
        moments: input,
    })
}

fn intercept_label(model: &ModelSpec, kind: EquationKind) -> String {
    match kind {
        EquationKind::Measurement(i) => format!("{}~1", model.observed[i]),
        EquationKind::Latent(h) => format!("{}~1", model.latents[h]),
    }
}

#[allow(clippy::too_many_arguments)]
fn report(
    model: &ModelSpec,
    input: &MomentInput,
    system: &[MiivEquation],
    t1: &Theta1Fit,
    vcov1: &DMatrix<f64>,
    t2: &Theta2Fit,
    vcov2: &DMatrix<f64>,
    est: &ModelParams,
    derived: &[usize],
) -> Vec<ParamEstimate> {
    let ordinal = |i: usize| input.kinds[i] == VariableKind::Ordinal;
    let sd = |v: &DMatrix<f64>, r: usize| Some(v[(r, r)].max(0.0).sqrt());
    let mut out = Vec::new();
    let (p, m) = (model.n_observed(), model.n_latent());

    // loadings, including fixed ones
    let coef_row: HashMap<CoefRef, usize> =
        t1.coefs.iter().enumerate().map(|(r, c)| (c.0, r)).collect();
    for f in 0..m {
        for i in 0..p {
            if model.lambda[i][f] == Slot::Zero {
                continue;
            }
            let cref = CoefRef::Loading(i, f);
            let row = coef_row.get(&cref).copied();
            out.push(ParamEstimate {
                name: coef_label(model, cref),
                group: if ordinal(i) {
                    ParamGroup::LambdaO
                } else {
                    ParamGroup::LambdaC
                },
                estimate: est.lambda[(i, f)],
                se: row.and_then(|r| sd(vcov1, r)),
                free: row.is_some(),
                shea_r2: row.map(|r| t1.shea[r]),
            });
        }
    }
    for h in 0..m {
        for g in 0..m {
            if model.beta[h][g] == Slot::Zero {
                continue;
            }
            let cref = CoefRef::Regression(h, g);
            let row = coef_row.get(&cref).copied();
            out.push(ParamEstimate {
                name: coef_label(model, cref),
                group: ParamGroup::Beta,
                estimate: est.beta[(h, g)],
                se: row.and_then(|r| sd(vcov1, r)),
                free: row.is_some(),
                shea_r2: row.map(|r| t1.shea[r]),
            });
        }
    }
    // thresholds
    for i in 0..p {
        for (k, &t) in input.thresholds[i].iter().enumerate() {
            let row = input.layout.position(&StatKey::Threshold(i, k));
            out.push(ParamEstimate {
                name: format!("{}|t{}", model.observed[i], k + 1),
                group: ParamGroup::Tau,
                estimate: t,
                se: row.and_then(|r| sd(&input.acov, r)),
                free: row.is_some(),
                shea_r2: None,
            });
        }
    }
    // intercepts
    let ncoef = t1.coefs.len();
    let mut free_row = ncoef;
    for (eq, &(kind, v, free)) in system.iter().zip(&t1.intercepts) {
        let group = match kind {
            EquationKind::Latent(_) => ParamGroup::AlphaEta,
            EquationKind::Measurement(i) if ordinal(i) => ParamGroup::AlphaYo,
            EquationKind::Measurement(_) => ParamGroup::AlphaYc,
        };
        let se = if free {
            free_row += 1;
            sd(vcov1, free_row - 1)
        } else {
            None
        };
        debug_assert_eq!(eq.kind, kind);
        out.push(ParamEstimate {
            name: intercept_label(model, kind),
            group,
            estimate: v,
            se,
            free,
            shea_r2: None,
        });
    }
    // variances
    let row2: HashMap<VarRef2, usize> = t2
        .entries
        .iter()
        .enumerate()
        .map(|(r, e)| (*e, r))
        .collect();
    for h in 0..m {
        for g in h..m {
            if model.psi[g][h] == Slot::Zero {
                continue;
            }
            let row = row2.get(&VarRef2::Psi(g, h)).copied();
            out.push(ParamEstimate {
                name: theta2_label(model, VarRef2::Psi(g, h)),
                group: ParamGroup::Zeta,
                estimate: est.psi[(g, h)],
                se: row.and_then(|r| sd(vcov2, r)),
                free: row.is_some(),
                shea_r2: None,
            });
        }
    }
    for j in 0..p {
        for i in j..p {
            if model.theta_eps[i][j] == Slot::Zero {
                continue;
            }
            let row = row2.get(&VarRef2::Eps(i, j)).copied();
            let is_derived = i == j && derived.contains(&i);
            out.push(ParamEstimate {
                name: theta2_label(model, VarRef2::Eps(i, j)),
                group: if ordinal(i) || ordinal(j) {
                    ParamGroup::EpsO
                } else {
                    ParamGroup::EpsC
                },
                estimate: est.theta_eps[(i, j)],
                se: row.and_then(|r| sd(vcov2, r)),
                free: row.is_some() && !is_derived,
                shea_r2: None,
            });
        }
    }
    out
}

/// Variable metadata for the model's observed variables. Variables named
/// in `ordinal` (or with declared thresholds) are ordinal with categories
/// taken from the data.
pub fn infer_metas(
    model: &ModelSpec,
    data: &DataTable,
    ordinal: &[String],
) -> Result<Vec<VariableMeta>> {
    model
        .observed
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let col = data
                .column_by_name(name)
                .ok_or_else(|| Error::Validation(format!("data has no column `{name}`")))?;
            if ordinal.contains(name) || model.thresholds.contains_key(&i) {
                VariableMeta::ordinal_from_column(name.clone(), col)
            } else {
                Ok(VariableMeta::continuous(name.clone()))
            }
        })
        .collect()
}

/// Stage-one statistics for the model's variables (listwise deletion).
pub fn stage1_for(
    model: &ModelSpec,
    data: &DataTable,
    metas: &[VariableMeta],
    options: &FitOptions,
) -> Result<StageOneStats> {
    let data = data.select(&model.observed)?.complete_cases();
    let metas: Vec<VariableMeta> = model
        .observed
        .iter()
        .map(|n| {
            metas
                .iter()
                .find(|m| &m.name == n)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("no type given for `{n}`")))
        })
        .collect::<Result<_>>()?;
    assemble_omega_with(&data, &metas, &options.stage1)
}

/// Full pipeline from raw data.
pub fn fit_data(
    model: &ModelSpec,
    data: &DataTable,
    metas: &[VariableMeta],
    options: &FitOptions,
) -> Result<FitResult> {
    let st =
        stage1_for(model, data, metas, options).map_err(|e| e.at_stage("stage-one statistics"))?;
    fit_moments(model, &MomentInput::from_stage1(&st), options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelir::parse_model;
    use crate::patcalc::numdiff;

    fn single_factor_input() -> (ModelSpec, MomentInput) {
        let model = parse_model("f =~ y1 + y2 + y3").unwrap();
        let lam = [1.0, 0.8, 0.6];
        let err = [0.4, 0.5, 0.3];
        let phi = 0.9;
        let sigma = DMatrix::from_fn(3, 3, |i, j| {
            lam[i] * lam[j] * phi + if i == j { err[i] } else { 0.0 }
        });
        let metas: Vec<VariableMeta> = (1..=3)
            .map(|i| VariableMeta::continuous(format!("y{i}")))
            .collect();
        let mut st = StageOneStats::from_moments(
            &metas,
            &DVector::from_vec(vec![1.0, 2.0, 0.5]),
            &[vec![], vec![], vec![]],
            &sigma,
        )
        .unwrap();
        st.acov = DMatrix::identity(st.layout.len(), st.layout.len()) * 0.01;
        (model, MomentInput::from_stage1(&st))
    }

    #[test]
    fn two_by_two_implied_covariance() {
        let params = ModelParams {
            lambda: DMatrix::from_column_slice(2, 1, &[1.0, 0.4]),
            beta: DMatrix::zeros(1, 1),
            psi: DMatrix::from_element(1, 1, 0.7),
            theta_eps: DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.5])),
            alpha_y: DVector::zeros(2),
            alpha_eta: DVector::zeros(1),
        };
        let (s, _) = implied_moments(&params).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.28, 0.28, 0.612]);
        assert!((s - expect).amax() < 1e-15);
    }

    #[test]
    fn population_single_factor() {
        let (model, input) = single_factor_input();
        let fit = fit_moments(&model, &input, &FitOptions::default()).unwrap();
        let get = |n: &str| fit.param(n).unwrap().estimate;
        assert!((get("f=~y2") - 0.8).abs() < 1e-12);
        assert!((get("f=~y3") - 0.6).abs() < 1e-12);
        assert!((get("f~~f") - 0.9).abs() < 1e-12);
        assert!((get("y1~~y1") - 0.4).abs() < 1e-12);
        assert!((get("y3~~y3") - 0.3).abs() < 1e-12);
        assert!((get("y2~1") - (2.0 - 0.8)).abs() < 1e-12);
        assert!(!fit.npd());
    }

    #[test]
    fn weight_invariance_at_population() {
        let (model, mut input) = single_factor_input();
        let d = input.layout.len();
        let g = DMatrix::from_fn(d, d, |i, j| {
            ((i * 7 + j * 3) % 5) as f64 * 0.1 + if i == j { 1.0 } else { 0.0 }
        });
        input.acov = &g * g.transpose() * 1e-3;
        let a = fit_moments(
            &model,
            &input,
            &FitOptions {
                weight: Weight::Full,
                ..Default::default()
            },
        )
        .unwrap();
        let b = fit_moments(
            &model,
            &input,
            &FitOptions {
                weight: Weight::Identity,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((&a.theta2.values - &b.theta2.values).amax() < 1e-12);
    }

    #[test]
    fn theta1_jacobian_matches_differences() {
        let (model, mut input) = single_factor_input();
        // perturb away from the exact fit so residuals are nonzero
        input.sigma[(2, 1)] += 0.05;
        input.sigma[(1, 2)] += 0.05;
        let model = {
            let mut m = model;
            m.observed.push("y4".into());
            m.lambda.push(vec![Slot::Free]);
            m.theta_eps = vec![vec![Slot::Zero; 4]; 4];
            for i in 0..4 {
                m.theta_eps[i][i] = Slot::Free;
            }
            m
        };
        let metas: Vec<VariableMeta> = (1..=4)
            .map(|i| VariableMeta::continuous(format!("y{i}")))
            .collect();
        let mut s4 = DMatrix::identity(4, 4) * 1.3;
        s4.view_mut((0, 0), (3, 3)).copy_from(&input.sigma);
        for i in 0..3 {
            s4[(3, i)] = 0.3 + 0.05 * i as f64;
            s4[(i, 3)] = s4[(3, i)];
        }
        let st = StageOneStats::from_moments(
            &metas,
            &DVector::from_vec(vec![1.0, 2.0, 0.5, -0.3]),
            &[vec![], vec![], vec![], vec![]],
            &s4,
        )
        .unwrap();
        let input = MomentInput::from_stage1(&st);
        let system = build_system(&model).unwrap();
        let t1 = fit_theta1(&model, &system, &input).unwrap();
        let nd = numdiff(
            |v: &DVector<f64>| {
                fit_theta1(&model, &system, &input.with_values(v)).map(|t| t.values())
            },
            &input.values(),
            1e-6,
        )
        .unwrap();
        for (a, b) in t1.k.iter().zip(nd.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn moment_file_round_trip() {
        let (_, input) = single_factor_input();
        let back = MomentInput::from_file(&input.to_file()).unwrap();
        assert_eq!(back, input);
    }
}
