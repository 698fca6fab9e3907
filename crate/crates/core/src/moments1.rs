//! Stage-one statistics: thresholds, means, variances, the mixed
//! polychoric/polyserial/covariance matrix Σ_y* and the sampling covariance
//! of all of them.
//!
//! Variables are held in block order: ordinal variables first, then
//! continuous ones, each block keeping the caller's relative order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::gauss::{bvn_cdf, bvn_density, norm_cdf, norm_pdf, norm_quantile, norm_sf};
use crate::layout::{MomentLayout, StatKey};
use crate::patcalc::numdiff;

/// Largest admissible |correlation|.
pub const RHO_BOUND: f64 = 1.0 - 1e-8;
const SOLVER_TOL: f64 = 1e-10;
const SOLVER_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Continuous,
    Ordinal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableMeta {
    pub name: String,
    pub kind: VariableKind,
    /// Sorted category codes (ordinal only). Observation `y` falls in
    /// category `c` when `y == categories[c]`.
    pub categories: Vec<i64>,
}

impl VariableMeta {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Continuous,
            categories: Vec::new(),
        }
    }

    pub fn ordinal(name: impl Into<String>, mut categories: Vec<i64>) -> Result<Self> {
        let name = name.into();
        categories.sort_unstable();
        categories.dedup();
        if categories.len() < 2 {
            return Err(Error::Validation(format!(
                "ordinal variable `{name}` needs at least two categories"
            )));
        }
        Ok(Self {
            name,
            kind: VariableKind::Ordinal,
            categories,
        })
    }

    /// Ordinal variable with categories `0..count`.
    pub fn ordinal_count(name: impl Into<String>, count: usize) -> Result<Self> {
        Self::ordinal(name, (0..count as i64).collect())
    }

    /// Ordinal variable whose categories are the distinct observed codes.
    pub fn ordinal_from_column(name: impl Into<String>, column: &[f64]) -> Result<Self> {
        let name = name.into();
        let mut cats = Vec::new();
        for &v in column {
            cats.push(integer_code(&name, v)?);
        }
        Self::ordinal(name, cats)
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn is_ordinal(&self) -> bool {
        self.kind == VariableKind::Ordinal
    }
}

fn integer_code(name: &str, v: f64) -> Result<i64> {
    if !v.is_finite() || v.fract() != 0.0 || v < 0.0 {
        return Err(Error::Validation(format!(
            "ordinal variable `{name}` has non-integer or negative code {v}"
        )));
    }
    Ok(v as i64)
}

/// Univariate margin estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Univariate {
    pub mean: f64,
    pub variance: f64,
    pub thresholds: Vec<f64>,
}

/// Category index of each observation.
fn category_codes(column: &[f64], meta: &VariableMeta) -> Result<Vec<usize>> {
    column
        .iter()
        .map(|&v| {
            let code = integer_code(&meta.name, v)?;
            meta.categories.binary_search(&code).map_err(|_| {
                Error::Validation(format!(
                    "variable `{}`: code {code} is not a declared category",
                    meta.name
                ))
            })
        })
        .collect()
}

fn univariate_from_codes(codes: &[usize], meta: &VariableMeta) -> Result<(Univariate, Vec<f64>)> {
    let c = meta.n_categories();
    let mut counts = vec![0usize; c];
    for &k in codes {
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyCategory {
            variable: meta.name.clone(),
            category: meta.categories[k],
        });
    }
    let n = codes.len() as f64;
    let mut cum = Vec::with_capacity(c - 1);
    let mut acc = 0usize;
    for &cnt in &counts[..c - 1] {
        acc += cnt;
        cum.push(acc as f64 / n);
    }
    let thresholds = cum.iter().map(|&p| norm_quantile(p)).collect();
    Ok((
        Univariate {
            mean: 0.0,
            variance: 1.0,
            thresholds,
        },
        cum,
    ))
}

/// Thresholds (ordinal) or mean and variance (continuous) of one column.
pub fn estimate_univariate(column: &[f64], meta: &VariableMeta) -> Result<Univariate> {
    if column.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation(format!(
            "variable `{}` has missing values",
            meta.name
        )));
    }
    match meta.kind {
        VariableKind::Ordinal => {
            let codes = category_codes(column, meta)?;
            univariate_from_codes(&codes, meta).map(|(u, _)| u)
        }
        VariableKind::Continuous => {
            let n = column.len();
            if n < 2 {
                return Err(Error::Validation(format!(
                    "variable `{}` needs at least two observations",
                    meta.name
                )));
            }
            let mean = column.iter().sum::<f64>() / n as f64;
            let ss: f64 = column.iter().map(|x| (x - mean).powi(2)).sum();
            let variance = ss / (n as f64 - 1.0);
            if variance <= 0.0 {
                return Err(Error::Validation(format!(
                    "variable `{}` is constant",
                    meta.name
                )));
            }
            Ok(Univariate {
                mean,
                variance,
                thresholds: Vec::new(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Polychoric,
    Polyserial,
    Covariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEstimate {
    pub kind: PairKind,
    /// Correlation (polychoric, polyserial) or covariance.
    pub estimate: f64,
    /// The optimizer stopped at the ±(1 − 1e-8) bound.
    pub boundary: bool,
    pub iterations: usize,
}

/// Root of a decreasing score in ρ, by safeguarded Newton in z = atanh ρ.
fn solve_correlation(mut score: impl FnMut(f64) -> f64) -> Result<(f64, bool, usize)> {
    let zmax = RHO_BOUND.atanh();
    let mut g = |z: f64| score(z.tanh());
    let (mut lo, mut hi) = (-zmax, zmax);
    let mut z = 0.0;
    let mut trace = Vec::new();
    let fail = |trace: &[f64]| {
        let shown: Vec<String> = trace
            .iter()
            .rev()
            .take(8)
            .map(|z| format!("{:.6}", z.tanh()))
            .collect();
        Error::NonConvergence {
            iterations: trace.len(),
            trace: shown.join(", "),
        }
    };
    for it in 1..=SOLVER_MAX_ITER {
        let gz = g(z);
        trace.push(z);
        if !gz.is_finite() {
            return Err(fail(&trace));
        }
        if gz > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let h = 1e-6 * z.abs().max(1.0);
        let d = (g(z + h) - g(z - h)) / (2.0 * h);
        let mut next = if d < 0.0 && d.is_finite() {
            z - gz / d
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - z).abs() < SOLVER_TOL || hi - lo < SOLVER_TOL {
            let boundary = zmax - next.abs() < 1e-6;
            let rho = if boundary {
                RHO_BOUND.copysign(next)
            } else {
                next.tanh()
            };
            return Ok((rho, boundary, it));
        }
        z = next;
    }
    Err(fail(&trace))
}

fn extended(t: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(t.len() + 2);
    v.push(f64::NEG_INFINITY);
    v.extend_from_slice(t);
    v.push(f64::INFINITY);
    v
}

/// Contingency table of two ordinal variables.
struct Cells {
    counts: Vec<Vec<f64>>,
    n: f64,
}

impl Cells {
    fn new(a: &[usize], b: &[usize], ca: usize, cb: usize) -> Self {
        let mut counts = vec![vec![0.0; cb]; ca];
        for (&i, &j) in a.iter().zip(b) {
            counts[i][j] += 1.0;
        }
        Self {
            counts,
            n: a.len() as f64,
        }
    }
}

/// Cell probabilities π_ab and their ρ-derivatives.
fn cell_probs(ta: &[f64], tb: &[f64], rho: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let ea = extended(ta);
    let eb = extended(tb);
    let (na, nb) = (ea.len(), eb.len());
    let mut f = vec![vec![0.0; nb]; na];
    let mut d = vec![vec![0.0; nb]; na];
    for i in 0..na {
        for j in 0..nb {
            f[i][j] = bvn_cdf(ea[i], eb[j], rho)?;
            d[i][j] = bvn_density(ea[i], eb[j], rho);
        }
    }
    let rect = |g: &Vec<Vec<f64>>, a: usize, b: usize| {
        g[a + 1][b + 1] - g[a][b + 1] - g[a + 1][b] + g[a][b]
    };
    let mut p = vec![vec![0.0; nb - 1]; na - 1];
    let mut dp = vec![vec![0.0; nb - 1]; na - 1];
    for a in 0..na - 1 {
        for b in 0..nb - 1 {
            p[a][b] = rect(&f, a, b).max(1e-300);
            dp[a][b] = rect(&d, a, b);
        }
    }
    Ok((p, dp))
}

fn polychoric_mean_score(cells: &Cells, ta: &[f64], tb: &[f64], rho: f64) -> Result<f64> {
    let (p, dp) = cell_probs(ta, tb, rho)?;
    let mut s = 0.0;
    for (a, row) in cells.counts.iter().enumerate() {
        for (b, &n) in row.iter().enumerate() {
            if n > 0.0 {
                s += n * dp[a][b] / p[a][b];
            }
        }
    }
    Ok(s / cells.n)
}

fn polychoric(cells: &Cells, ta: &[f64], tb: &[f64]) -> Result<(f64, bool, usize)> {
    let mut failure = None;
    let out = solve_correlation(|rho| match polychoric_mean_score(cells, ta, tb, rho) {
        Ok(s) => s,
        Err(e) => {
            failure = Some(e);
            f64::NAN
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    out
}

/// Probability and ρ-derivative of the ordinal category given the
/// standardized continuous value `z`.
#[inline]
fn polyserial_terms(lo: f64, hi: f64, z: f64, rho: f64) -> (f64, f64) {
    let s = (1.0 - rho * rho).sqrt();
    let s3 = s * s * s;
    let u = |t: f64| {
        if t.is_infinite() {
            t
        } else {
            (t - rho * z) / s
        }
    };
    let du = |t: f64| {
        if t.is_infinite() {
            0.0
        } else {
            (rho * t - z) / s3
        }
    };
    let (ul, uh) = (u(lo), u(hi));
    let p = if ul > 0.0 {
        norm_sf(ul) - norm_sf(uh)
    } else {
        norm_cdf(uh) - norm_cdf(ul)
    };
    let dp = norm_pdf(uh) * du(hi) - norm_pdf(ul) * du(lo);
    (p.max(1e-300), dp)
}

fn polyserial_mean_score(
    codes: &[usize],
    x: &[f64],
    tau: &[f64],
    mean: f64,
    var: f64,
    rho: f64,
) -> f64 {
    let ext = extended(tau);
    let sd = var.sqrt();
    let mut s = 0.0;
    for (&c, &xi) in codes.iter().zip(x) {
        let (p, dp) = polyserial_terms(ext[c], ext[c + 1], (xi - mean) / sd, rho);
        s += dp / p;
    }
    s / codes.len() as f64
}

/// Pairwise correlation (ordinal involved) or covariance (both continuous),
/// holding the univariate estimates fixed.
pub fn estimate_pairwise(
    col_j: &[f64],
    col_k: &[f64],
    meta_j: &VariableMeta,
    meta_k: &VariableMeta,
    uni_j: &Univariate,
    uni_k: &Univariate,
) -> Result<PairEstimate> {
    let wrap = |e: Error| Error::Pairwise {
        first: meta_j.name.clone(),
        second: meta_k.name.clone(),
        message: e.to_string(),
    };
    if col_j.len() != col_k.len() {
        return Err(wrap(Error::Validation("columns differ in length".into())));
    }
    match (meta_j.kind, meta_k.kind) {
        (VariableKind::Continuous, VariableKind::Continuous) => {
            let n = col_j.len() as f64;
            let c: f64 = col_j
                .iter()
                .zip(col_k)
                .map(|(a, b)| (a - uni_j.mean) * (b - uni_k.mean))
                .sum::<f64>()
                / (n - 1.0);
            Ok(PairEstimate {
                kind: PairKind::Covariance,
                estimate: c,
                boundary: false,
                iterations: 0,
            })
        }
        (VariableKind::Ordinal, VariableKind::Ordinal) => {
            let a = category_codes(col_j, meta_j).map_err(wrap)?;
            let b = category_codes(col_k, meta_k).map_err(wrap)?;
            let cells = Cells::new(&a, &b, meta_j.n_categories(), meta_k.n_categories());
            let (rho, boundary, iterations) =
                polychoric(&cells, &uni_j.thresholds, &uni_k.thresholds).map_err(wrap)?;
            Ok(PairEstimate {
                kind: PairKind::Polychoric,
                estimate: rho,
                boundary,
                iterations,
            })
        }
        (VariableKind::Ordinal, VariableKind::Continuous) => {
            let codes = category_codes(col_j, meta_j).map_err(wrap)?;
            let (rho, boundary, iterations) = solve_correlation(|r| {
                polyserial_mean_score(
                    &codes,
                    col_k,
                    &uni_j.thresholds,
                    uni_k.mean,
                    uni_k.variance,
                    r,
                )
            })
            .map_err(wrap)?;
            Ok(PairEstimate {
                kind: PairKind::Polyserial,
                estimate: rho,
                boundary,
                iterations,
            })
        }
        (VariableKind::Continuous, VariableKind::Ordinal) => {
            estimate_pairwise(col_k, col_j, meta_k, meta_j, uni_k, uni_j).map_err(|e| match e {
                Error::Pairwise { message, .. } => Error::Pairwise {
                    first: meta_j.name.clone(),
                    second: meta_k.name.clone(),
                    message,
                },
                other => other,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum AcovMethod {
    /// Stacked influence functions of the two-stage estimating equations.
    #[default]
    Sandwich,
    /// Nonparametric bootstrap over rows.
    Bootstrap { replications: usize, seed: u64 },
    /// Point estimates only; the acov is left at zero.
    None,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stage1Options {
    pub acov: AcovMethod,
}

/// Stage-one statistics ω̂ and their sampling covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneStats {
    /// Variable names in block order (ordinal first).
    pub names: Vec<String>,
    pub kinds: Vec<VariableKind>,
    pub categories: Vec<Vec<i64>>,
    pub means: DVector<f64>,
    pub variances: DVector<f64>,
    pub thresholds: Vec<Vec<f64>>,
    /// Σ_y*: unit diagonal on ordinal slots, polychoric correlations in the
    /// ordinal block, polyserial covariances ρ̃·√σ_kk in the mixed band and
    /// sample covariances in the continuous block.
    pub sigma: DMatrix<f64>,
    /// Order of the elements of ω.
    pub layout: MomentLayout,
    /// Estimated sampling covariance of ω̂ (Σ_ω / N).
    pub acov: DMatrix<f64>,
    pub n_obs: usize,
    /// Pairs whose correlation hit the ±(1 − 1e-8) bound.
    pub boundary_pairs: Vec<(usize, usize)>,
    /// Bootstrap replications that contributed (bootstrap backend only).
    pub bootstrap_used: Option<usize>,
}

/// Permutation putting ordinal variables first.
pub fn block_order(metas: &[VariableMeta]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..metas.len())
        .filter(|&j| metas[j].is_ordinal())
        .collect();
    order.extend((0..metas.len()).filter(|&j| !metas[j].is_ordinal()));
    order
}

/// ω layout for the given variable kinds (block order assumed).
pub fn omega_layout(kinds: &[VariableKind], thresholds: &[Vec<f64>]) -> MomentLayout {
    let p = kinds.len();
    let mut keys = Vec::new();
    for j in 0..p {
        if kinds[j] == VariableKind::Continuous {
            keys.push(StatKey::Mean(j));
        }
    }
    for j in 0..p {
        for k in 0..thresholds[j].len() {
            keys.push(StatKey::Threshold(j, k));
        }
    }
    for j in 0..p {
        for i in j..p {
            if i == j && kinds[j] == VariableKind::Ordinal {
                continue;
            }
            keys.push(StatKey::Cov(i, j));
        }
    }
    MomentLayout::new(keys)
}

impl StageOneStats {
    /// Stage-one statistics from known moments (e.g. population values),
    /// with a zero acov. Inputs are in the order of `metas` and are moved
    /// into block order.
    pub fn from_moments(
        metas: &[VariableMeta],
        means: &DVector<f64>,
        thresholds: &[Vec<f64>],
        sigma: &DMatrix<f64>,
    ) -> Result<Self> {
        let p = metas.len();
        if means.len() != p || thresholds.len() != p || sigma.shape() != (p, p) {
            return Err(Error::Validation(
                "moment dimensions do not match variables".into(),
            ));
        }
        let order = block_order(metas);
        let kinds: Vec<VariableKind> = order.iter().map(|&j| metas[j].kind).collect();
        let th: Vec<Vec<f64>> = order.iter().map(|&j| thresholds[j].clone()).collect();
        for (slot, &j) in order.iter().enumerate() {
            if kinds[slot] == VariableKind::Ordinal {
                if th[slot].len() + 1 != metas[j].n_categories() {
                    return Err(Error::Validation(format!(
                        "variable `{}` needs {} thresholds",
                        metas[j].name,
                        metas[j].n_categories() - 1
                    )));
                }
                if th[slot].windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Validation(format!(
                        "thresholds of `{}` are not increasing",
                        metas[j].name
                    )));
                }
            }
        }
        let s = DMatrix::from_fn(p, p, |a, b| sigma[(order[a], order[b])]);
        let layout = omega_layout(&kinds, &th);
        let d = layout.len();
        Ok(Self {
            names: order.iter().map(|&j| metas[j].name.clone()).collect(),
            categories: order.iter().map(|&j| metas[j].categories.clone()).collect(),
            means: DVector::from_fn(p, |a, _| {
                if kinds[a] == VariableKind::Ordinal {
                    0.0
                } else {
                    means[order[a]]
                }
            }),
            variances: DVector::from_fn(p, |a, _| {
                if kinds[a] == VariableKind::Ordinal {
                    1.0
                } else {
                    s[(a, a)]
                }
            }),
            kinds,
            thresholds: th,
            sigma: s,
            layout,
            acov: DMatrix::zeros(d, d),
            n_obs: 0,
            boundary_pairs: Vec::new(),
            bootstrap_used: None,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Value of one element of ω.
    pub fn value(&self, key: &StatKey) -> f64 {
        match *key {
            StatKey::Mean(j) => self.means[j],
            StatKey::Threshold(j, k) => self.thresholds[j][k],
            StatKey::Cov(i, j) => self.sigma[(i, j)],
        }
    }

    /// ω̂ stacked in layout order.
    pub fn omega(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.layout.len(),
            self.layout.keys().iter().map(|k| self.value(k)),
        )
    }

    /// Rebuild the moments from a vector in layout order (used for
    /// finite-difference checks of downstream maps).
    pub fn with_omega(&self, omega: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for (key, &v) in self.layout.keys().iter().zip(omega.iter()) {
            match *key {
                StatKey::Mean(j) => out.means[j] = v,
                StatKey::Threshold(j, k) => out.thresholds[j][k] = v,
                StatKey::Cov(i, j) => {
                    out.sigma[(i, j)] = v;
                    out.sigma[(j, i)] = v;
                    if i == j {
                        out.variances[j] = v;
                    }
                }
            }
        }
        out
    }
}

/// Per-variable prepared data.
struct Prepared {
    meta: VariableMeta,
    values: Vec<f64>,
    codes: Vec<usize>,
    uni: Univariate,
    cum: Vec<f64>,
}

fn prepare(data: &DataTable, metas: &[VariableMeta]) -> Result<Vec<Prepared>> {
    let order = block_order(metas);
    order
        .iter()
        .map(|&j| {
            let meta = &metas[j];
            let values = data
                .column_by_name(&meta.name)
                .ok_or_else(|| Error::Validation(format!("data has no column `{}`", meta.name)))?
                .to_vec();
            if values.iter().any(|v| v.is_nan()) {
                return Err(Error::Validation(format!(
                    "variable `{}` has missing values; apply listwise deletion first",
                    meta.name
                )));
            }
            let (codes, uni, cum) = if meta.is_ordinal() {
                let codes = category_codes(&values, meta)?;
                let (uni, cum) = univariate_from_codes(&codes, meta)?;
                (codes, uni, cum)
            } else {
                (Vec::new(), estimate_univariate(&values, meta)?, Vec::new())
            };
            Ok(Prepared {
                meta: meta.clone(),
                values,
                codes,
                uni,
                cum,
            })
        })
        .collect()
}

fn pairs_of(p: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for j in 0..p {
        for i in j + 1..p {
            v.push((i, j));
        }
    }
    v
}

fn point_estimates(prep: &[Prepared]) -> Result<(DMatrix<f64>, Vec<PairEstimate>)> {
    let p = prep.len();
    let pairs = pairs_of(p);
    let est: Vec<Result<PairEstimate>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (&prep[i], &prep[j]);
            estimate_pairwise(&a.values, &b.values, &a.meta, &b.meta, &a.uni, &b.uni)
        })
        .collect();
    let mut sigma = DMatrix::zeros(p, p);
    for j in 0..p {
        sigma[(j, j)] = prep[j].uni.variance;
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (&(i, j), e) in pairs.iter().zip(est) {
        let e = e?;
        let v = if e.kind == PairKind::Polyserial {
            e.estimate * (prep[i].uni.variance * prep[j].uni.variance).sqrt()
        } else {
            e.estimate
        };
        sigma[(i, j)] = v;
        sigma[(j, i)] = v;
        out.push(e);
    }
    Ok((sigma, out))
}

/// Influence function columns of one ordinal threshold vector.
fn threshold_if(pr: &Prepared) -> Vec<Vec<f64>> {
    pr.uni
        .thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let dens = norm_pdf(t);
            let pk = pr.cum[k];
            pr.codes
                .iter()
                .map(|&c| (if c <= k { 1.0 } else { 0.0 } - pk) / dens)
                .collect()
        })
        .collect()
}

struct UniIf {
    thresholds: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn univariate_if(pr: &Prepared) -> UniIf {
    if pr.meta.is_ordinal() {
        UniIf {
            thresholds: threshold_if(pr),
            mean: Vec::new(),
            var: Vec::new(),
        }
    } else {
        let (m, v) = (pr.uni.mean, pr.uni.variance);
        UniIf {
            thresholds: Vec::new(),
            mean: pr.values.iter().map(|x| x - m).collect(),
            var: pr.values.iter().map(|x| (x - m).powi(2) - v).collect(),
        }
    }
}

fn polychoric_if(a: &Prepared, b: &Prepared, rho: f64, ia: &UniIf, ib: &UniIf) -> Result<Vec<f64>> {
    let cells = Cells::new(
        &a.codes,
        &b.codes,
        a.meta.n_categories(),
        b.meta.n_categories(),
    );
    let (ta, tb) = (&a.uni.thresholds, &b.uni.thresholds);
    let (na, nb) = (ta.len(), tb.len());
    let mut x0 = vec![rho.atanh()];
    x0.extend_from_slice(ta);
    x0.extend_from_slice(tb);
    let x0 = DVector::from_vec(x0);
    let jac = numdiff(
        |x: &DVector<f64>| {
            let r = x[0].tanh();
            let ta: Vec<f64> = x.rows(1, na).iter().copied().collect();
            let tb: Vec<f64> = x.rows(1 + na, nb).iter().copied().collect();
            polychoric_mean_score(&cells, &ta, &tb, r).map(|s| DVector::from_element(1, s))
        },
        &x0,
        1e-5,
    )?;
    let (p, dp) = cell_probs(ta, tb, rho)?;
    // differenced in z = atanh ρ so the step never leaves (-1, 1)
    let arr = jac[(0, 0)] / (1.0 - rho * rho);
    let n = a.codes.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (ca, cb) = (a.codes[i], b.codes[i]);
        let mut s = dp[ca][cb] / p[ca][cb];
        for k in 0..na {
            s += jac[(0, 1 + k)] * ia.thresholds[k][i];
        }
        for k in 0..nb {
            s += jac[(0, 1 + na + k)] * ib.thresholds[k][i];
        }
        out.push(-s / arr);
    }
    Ok(out)
}

/// Influence function of the polyserial covariance ρ̃·√σ.
fn polyserial_if(o: &Prepared, c: &Prepared, rho: f64, io: &UniIf, ic: &UniIf) -> Result<Vec<f64>> {
    let t = &o.uni.thresholds;
    let nt = t.len();
    let (mean, var) = (c.uni.mean, c.uni.variance);
    let mut x0 = vec![rho.atanh()];
    x0.extend_from_slice(t);
    x0.push(mean);
    x0.push(var);
    let x0 = DVector::from_vec(x0);
    let jac = numdiff(
        |x: &DVector<f64>| {
            let tau: Vec<f64> = x.rows(1, nt).iter().copied().collect();
            let s =
                polyserial_mean_score(&o.codes, &c.values, &tau, x[1 + nt], x[2 + nt], x[0].tanh());
            Ok::<_, Error>(DVector::from_element(1, s))
        },
        &x0,
        1e-5,
    )?;
    // differenced in z = atanh ρ so the step never leaves (-1, 1)
    let arr = jac[(0, 0)] / (1.0 - rho * rho);
    let ext = extended(t);
    let sd = var.sqrt();
    let n = o.codes.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let cat = o.codes[i];
        let (p, dp) = polyserial_terms(ext[cat], ext[cat + 1], (c.values[i] - mean) / sd, rho);
        let mut s = dp / p;
        for k in 0..nt {
            s += jac[(0, 1 + k)] * io.thresholds[k][i];
        }
        s += jac[(0, 1 + nt)] * ic.mean[i];
        s += jac[(0, 2 + nt)] * ic.var[i];
        let if_rho = -s / arr;
        out.push(sd * if_rho + rho / (2.0 * sd) * ic.var[i]);
    }
    Ok(out)
}

fn sandwich(
    prep: &[Prepared],
    sigma: &DMatrix<f64>,
    pair_est: &[PairEstimate],
    layout: &MomentLayout,
) -> Result<DMatrix<f64>> {
    let p = prep.len();
    let n = prep[0].values.len();
    let uni: Vec<UniIf> = prep.iter().map(univariate_if).collect();
    let pairs = pairs_of(p);
    let pair_if: Vec<Result<Vec<f64>>> = pairs
        .par_iter()
        .zip(pair_est.par_iter())
        .map(|(&(i, j), est)| {
            let (a, b) = (&prep[i], &prep[j]);
            match est.kind {
                PairKind::Covariance => {
                    let (ma, mb) = (a.uni.mean, b.uni.mean);
                    let c = sigma[(i, j)];
                    Ok(a.values
                        .iter()
                        .zip(&b.values)
                        .map(|(x, y)| (x - ma) * (y - mb) - c)
                        .collect())
                }
                PairKind::Polychoric => polychoric_if(a, b, est.estimate, &uni[i], &uni[j]),
                PairKind::Polyserial => {
                    // block order puts the ordinal variable at the smaller index
                    polyserial_if(b, a, est.estimate, &uni[j], &uni[i])
                }
            }
            .map_err(|e| Error::Pairwise {
                first: a.meta.name.clone(),
                second: b.meta.name.clone(),
                message: e.to_string(),
            })
        })
        .collect();
    let mut pair_cols = std::collections::HashMap::new();
    for (&(i, j), col) in pairs.iter().zip(pair_if) {
        pair_cols.insert((i, j), col?);
    }
    let d = layout.len();
    let mut psi = DMatrix::zeros(n, d);
    for (col, key) in layout.keys().iter().enumerate() {
        let src: &[f64] = match *key {
            StatKey::Mean(j) => &uni[j].mean,
            StatKey::Threshold(j, k) => &uni[j].thresholds[k],
            StatKey::Cov(i, j) if i == j => &uni[j].var,
            StatKey::Cov(i, j) => &pair_cols[&(i, j)],
        };
        for (r, v) in src.iter().enumerate() {
            psi[(r, col)] = *v;
        }
    }
    let nf = n as f64;
    Ok(psi.tr_mul(&psi) / (nf * nf))
}

fn assemble_points(prep: &[Prepared]) -> Result<StageOneStats> {
    let (sigma, pair_est) = point_estimates(prep)?;
    let p = prep.len();
    let kinds: Vec<VariableKind> = prep.iter().map(|x| x.meta.kind).collect();
    let thresholds: Vec<Vec<f64>> = prep.iter().map(|x| x.uni.thresholds.clone()).collect();
    let layout = omega_layout(&kinds, &thresholds);
    let pairs = pairs_of(p);
    let boundary_pairs = pairs
        .iter()
        .zip(&pair_est)
        .filter(|(_, e)| e.boundary)
        .map(|(&ij, _)| ij)
        .collect();
    let d = layout.len();
    Ok(StageOneStats {
        names: prep.iter().map(|x| x.meta.name.clone()).collect(),
        categories: prep.iter().map(|x| x.meta.categories.clone()).collect(),
        means: DVector::from_iterator(p, prep.iter().map(|x| x.uni.mean)),
        variances: DVector::from_iterator(p, prep.iter().map(|x| x.uni.variance)),
        kinds,
        thresholds,
        sigma,
        layout,
        acov: DMatrix::zeros(d, d),
        n_obs: prep.first().map_or(0, |x| x.values.len()),
        boundary_pairs,
        bootstrap_used: None,
    })
}

/// Stage-one statistics with the default (sandwich) acov.
pub fn assemble_omega(data: &DataTable, metas: &[VariableMeta]) -> Result<StageOneStats> {
    assemble_omega_with(data, metas, &Stage1Options::default())
}

pub fn assemble_omega_with(
    data: &DataTable,
    metas: &[VariableMeta],
    options: &Stage1Options,
) -> Result<StageOneStats> {
    if metas.is_empty() {
        return Err(Error::Validation("no variables".into()));
    }
    let prep = prepare(data, metas)?;
    let mut stats = assemble_points(&prep)?;
    match &options.acov {
        AcovMethod::None => {}
        AcovMethod::Sandwich => {
            let (_, pair_est) = point_estimates(&prep)?;
            stats.acov = sandwich(&prep, &stats.sigma, &pair_est, &stats.layout)?;
        }
        AcovMethod::Bootstrap { replications, seed } => {
            let (acov, used) = bootstrap(data, metas, &stats, *replications, *seed)?;
            stats.acov = acov;
            stats.bootstrap_used = Some(used);
        }
    }
    Ok(stats)
}

fn bootstrap(
    data: &DataTable,
    metas: &[VariableMeta],
    base: &StageOneStats,
    replications: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, usize)> {
    let n = data.n_rows();
    let draws: Vec<Option<DVector<f64>>> = (0..replications)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = data.rows(&idx);
            let prep = prepare(&sample, metas).ok()?;
            let st = assemble_points(&prep).ok()?;
            (st.layout == base.layout).then(|| st.omega())
        })
        .collect();
    let ok: Vec<DVector<f64>> = draws.into_iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::Numerical(
            "fewer than two usable bootstrap replications".into(),
        ));
    }
    let d = base.layout.len();
    let m = ok.len() as f64;
    let mean = ok.iter().fold(DVector::zeros(d), |acc, v| acc + v) / m;
    let mut cov = DMatrix::zeros(d, d);
    for v in &ok {
        let c = v - &mean;
        cov += &c * c.transpose();
    }
    Ok((cov / (m - 1.0), ok.len()))
}
