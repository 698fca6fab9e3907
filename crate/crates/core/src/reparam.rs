//! Alternative parameterization: fix two thresholds of an ordinal variable
//! so that the mean and variance of its underlying y* become estimable.
//!
//! The transform is affine per variable, ÿ* = (y* + q₁)·q₂, giving
//! τ̈ = (τ + q₁)q₂, μ̈ = q₁q₂ + μ and Σ̈ = Q₂ΣQ₂. The stacked vector π of
//! the transformed moments gets its covariance by the delta method.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{MomentLayout, StatKey};
use crate::moments1::{StageOneStats, VariableKind};
use crate::patcalc::{kron, LStructure, PatternSpec};

/// How one ordinal variable is anchored. Threshold indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Anchor {
    /// Standard parameterization: mean 0, variance 1.
    #[default]
    None,
    /// One threshold fixed; the mean becomes free, the variance stays 1.
    MeanOnly { index: usize, value: f64 },
    /// Two thresholds fixed; mean and variance become free.
    MeanVariance {
        a: usize,
        b: usize,
        va: f64,
        vb: f64,
    },
}

impl Anchor {
    fn fixes(&self, k: usize) -> bool {
        match *self {
            Anchor::None => false,
            Anchor::MeanOnly { index, .. } => index == k,
            Anchor::MeanVariance { a, b, .. } => a == k || b == k,
        }
    }

    fn frees_mean(&self) -> bool {
        !matches!(self, Anchor::None)
    }

    fn frees_variance(&self) -> bool {
        matches!(self, Anchor::MeanVariance { .. })
    }
}

/// Anchors by variable name; unnamed variables keep the standard
/// parameterization.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReparamSpec {
    pub anchors: BTreeMap<String, Anchor>,
}

impl ReparamSpec {
    pub fn standard() -> Self {
        Self::default()
    }

    /// First two thresholds at 0 and 1 for every ordinal variable; binary
    /// variables get their single threshold at 0 (mean only).
    pub fn default_alternative(stage1: &StageOneStats) -> Self {
        let mut anchors = BTreeMap::new();
        for j in 0..stage1.n_vars() {
            let nt = stage1.thresholds[j].len();
            let anchor = match nt {
                0 => continue,
                1 => Anchor::MeanOnly {
                    index: 0,
                    value: 0.0,
                },
                _ => Anchor::MeanVariance {
                    a: 0,
                    b: 1,
                    va: 0.0,
                    vb: 1.0,
                },
            };
            anchors.insert(stage1.names[j].clone(), anchor);
        }
        Self { anchors }
    }

    pub fn with(mut self, name: impl Into<String>, anchor: Anchor) -> Self {
        self.anchors.insert(name.into(), anchor);
        self
    }

    pub fn is_standard(&self) -> bool {
        self.anchors.values().all(|a| *a == Anchor::None)
    }

    pub fn anchor(&self, name: &str) -> Anchor {
        self.anchors.get(name).copied().unwrap_or_default()
    }

    /// Anchors in the variable order of `stage1`, validated.
    fn resolve(&self, stage1: &StageOneStats) -> Result<Vec<Anchor>> {
        for name in self.anchors.keys() {
            if stage1.index_of(name).is_none() {
                return Err(Error::Validation(format!(
                    "anchor given for unknown variable `{name}`"
                )));
            }
        }
        (0..stage1.n_vars())
            .map(|j| {
                let name = &stage1.names[j];
                let anchor = self.anchor(name);
                let nt = stage1.thresholds[j].len();
                let bad = |m: String| {
                    Err(Error::SingularTransform {
                        variable: name.clone(),
                        message: m,
                    })
                };
                if stage1.kinds[j] == VariableKind::Continuous && anchor != Anchor::None {
                    return bad("continuous variables cannot be anchored".into());
                }
                match anchor {
                    Anchor::None => {}
                    Anchor::MeanOnly { index, value } => {
                        if index >= nt {
                            return bad(format!("threshold {} does not exist", index + 1));
                        }
                        if !value.is_finite() {
                            return bad("anchor value is not finite".into());
                        }
                    }
                    Anchor::MeanVariance { a, b, va, vb } => {
                        if nt < 2 {
                            return bad(
                                "mean and variance need two thresholds; use a single anchor".into(),
                            );
                        }
                        if a >= nt || b >= nt {
                            return bad(format!("threshold {} does not exist", a.max(b) + 1));
                        }
                        if a == b {
                            return bad("the two anchored thresholds must differ".into());
                        }
                        if !(va.is_finite() && vb.is_finite()) || va == vb {
                            return bad("anchor values must be finite and distinct".into());
                        }
                    }
                }
                Ok(anchor)
            })
            .collect()
    }
}

/// q₁, q₂ of one variable and their derivatives with respect to its two
/// anchored stage-one thresholds (positions a, b in `d`).
#[derive(Debug, Clone, Copy)]
struct SlotQ {
    q1: f64,
    q2: f64,
    /// (threshold index, ∂q₁/∂τ, ∂q₂/∂τ)
    d: [(usize, f64, f64); 2],
    nd: usize,
}

fn slot_q(name: &str, tau: &[f64], anchor: Anchor) -> Result<SlotQ> {
    match anchor {
        Anchor::None => Ok(SlotQ {
            q1: 0.0,
            q2: 1.0,
            d: [(0, 0.0, 0.0); 2],
            nd: 0,
        }),
        Anchor::MeanOnly { index, value } => Ok(SlotQ {
            q1: value - tau[index],
            q2: 1.0,
            d: [(index, -1.0, 0.0), (0, 0.0, 0.0)],
            nd: 1,
        }),
        Anchor::MeanVariance { a, b, va, vb } => {
            let (ta, tb) = (tau[a], tau[b]);
            let span = tb - ta;
            if span == 0.0 || !span.is_finite() {
                return Err(Error::SingularTransform {
                    variable: name.to_string(),
                    message: format!("stage-one thresholds {} and {} coincide", a + 1, b + 1),
                });
            }
            let dv = vb - va;
            let q2 = dv / span;
            let q1 = (tb * va - ta * vb) / dv;
            Ok(SlotQ {
                q1,
                q2,
                d: [(a, -vb / dv, q2 / span), (b, va / dv, -q2 / span)],
                nd: 2,
            })
        }
    }
}

/// Diagonal transform constants (Q₁, Q₂) as vectors in the variable order
/// of `stage1`. Continuous slots get (0, 1).
pub fn compute_q(
    stage1: &StageOneStats,
    spec: &ReparamSpec,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let anchors = spec.resolve(stage1)?;
    let p = stage1.n_vars();
    let mut q1 = DVector::zeros(p);
    let mut q2 = DVector::from_element(p, 1.0);
    for j in 0..p {
        let s = slot_q(&stage1.names[j], &stage1.thresholds[j], anchors[j])?;
        q1[j] = s.q1;
        q2[j] = s.q2;
    }
    Ok((q1, q2))
}

/// Transformed moments π and their covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamStats {
    pub names: Vec<String>,
    pub kinds: Vec<VariableKind>,
    pub categories: Vec<Vec<i64>>,
    pub anchors: Vec<Anchor>,
    /// All thresholds after the transform, anchored ones included.
    pub tau_ddot: Vec<Vec<f64>>,
    pub mu_ddot: DVector<f64>,
    pub sigma_ddot: DMatrix<f64>,
    pub q1: DVector<f64>,
    pub q2: DVector<f64>,
    /// Order of the elements of π.
    pub layout: MomentLayout,
    /// Var(π), finite-sample scale.
    pub acov: DMatrix<f64>,
    pub n_obs: usize,
}

impl ReparamStats {
    pub fn value(&self, key: &StatKey) -> f64 {
        match *key {
            StatKey::Mean(j) => self.mu_ddot[j],
            StatKey::Threshold(j, k) => self.tau_ddot[j][k],
            StatKey::Cov(i, j) => self.sigma_ddot[(i, j)],
        }
    }

    /// π stacked in layout order.
    pub fn pi(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.layout.len(),
            self.layout.keys().iter().map(|k| self.value(k)),
        )
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    /// Whether the mean of variable `j` is a free statistic.
    pub fn mean_free(&self, j: usize) -> bool {
        self.kinds[j] == VariableKind::Continuous || self.anchors[j].frees_mean()
    }

    /// Whether the variance of variable `j` is a free statistic.
    pub fn variance_free(&self, j: usize) -> bool {
        self.kinds[j] == VariableKind::Continuous || self.anchors[j].frees_variance()
    }
}

fn pi_layout(stage1: &StageOneStats, anchors: &[Anchor]) -> MomentLayout {
    let p = stage1.n_vars();
    let cont = |j: usize| stage1.kinds[j] == VariableKind::Continuous;
    let mut keys = Vec::new();
    for j in 0..p {
        if cont(j) || anchors[j].frees_mean() {
            keys.push(StatKey::Mean(j));
        }
    }
    for j in 0..p {
        for k in 0..stage1.thresholds[j].len() {
            if !anchors[j].fixes(k) {
                keys.push(StatKey::Threshold(j, k));
            }
        }
    }
    for j in 0..p {
        for i in j..p {
            if i == j && !(cont(j) || anchors[j].frees_variance()) {
                continue;
            }
            keys.push(StatKey::Cov(i, j));
        }
    }
    MomentLayout::new(keys)
}

fn transform_values(
    stage1: &StageOneStats,
    anchors: &[Anchor],
) -> Result<(Vec<SlotQ>, Vec<Vec<f64>>, DVector<f64>, DMatrix<f64>)> {
    let p = stage1.n_vars();
    let slots: Vec<SlotQ> = (0..p)
        .map(|j| slot_q(&stage1.names[j], &stage1.thresholds[j], anchors[j]))
        .collect::<Result<_>>()?;
    let mut tau = Vec::with_capacity(p);
    for j in 0..p {
        let s = slots[j];
        let mut t: Vec<f64> = stage1.thresholds[j]
            .iter()
            .map(|&x| (x + s.q1) * s.q2)
            .collect();
        // anchored entries are set exactly rather than through rounding
        match anchors[j] {
            Anchor::None => {}
            Anchor::MeanOnly { index, value } => t[index] = value,
            Anchor::MeanVariance { a, b, va, vb } => {
                t[a] = va;
                t[b] = vb;
            }
        }
        tau.push(t);
    }
    let mu = DVector::from_fn(p, |j, _| slots[j].q1 * slots[j].q2 + stage1.means[j]);
    let sigma = DMatrix::from_fn(p, p, |i, j| {
        let (i, j) = (i.max(j), i.min(j));
        slots[i].q2 * stage1.sigma[(i, j)] * slots[j].q2
    });
    Ok((slots, tau, mu, sigma))
}

/// Apply the anchors to the stage-one moments. Var(π) is included.
pub fn transform_moments(stage1: &StageOneStats, spec: &ReparamSpec) -> Result<ReparamStats> {
    let anchors = spec.resolve(stage1)?;
    let (slots, tau_ddot, mu_ddot, sigma_ddot) = transform_values(stage1, &anchors)?;
    let layout = pi_layout(stage1, &anchors);
    let l = jacobian_with(stage1, &anchors, &slots, &layout)?;
    let acov = var_pi(stage1, &l)?;
    Ok(ReparamStats {
        names: stage1.names.clone(),
        kinds: stage1.kinds.clone(),
        categories: stage1.categories.clone(),
        anchors,
        tau_ddot,
        mu_ddot,
        sigma_ddot,
        q1: DVector::from_iterator(slots.len(), slots.iter().map(|s| s.q1)),
        q2: DVector::from_iterator(slots.len(), slots.iter().map(|s| s.q2)),
        layout,
        acov,
        n_obs: stage1.n_obs,
    })
}

/// L = ∂π/∂ωᵀ: rows follow the π layout, columns the ω layout.
pub fn reparam_jacobian(stage1: &StageOneStats, spec: &ReparamSpec) -> Result<DMatrix<f64>> {
    let anchors = spec.resolve(stage1)?;
    let (slots, ..) = transform_values(stage1, &anchors)?;
    let layout = pi_layout(stage1, &anchors);
    jacobian_with(stage1, &anchors, &slots, &layout)
}

fn jacobian_with(
    stage1: &StageOneStats,
    anchors: &[Anchor],
    slots: &[SlotQ],
    pi: &MomentLayout,
) -> Result<DMatrix<f64>> {
    let p = stage1.n_vars();
    let om = &stage1.layout;
    let d = om.len();
    let col = |key: StatKey| {
        om.position(&key).ok_or_else(|| {
            Error::Numerical(format!(
                "stage-one layout lacks {key:?}; layouts are inconsistent"
            ))
        })
    };

    // dq₁, dq₂: p × d
    let mut dq1 = DMatrix::zeros(p, d);
    let mut dq2 = DMatrix::zeros(p, d);
    for (j, s) in slots.iter().enumerate() {
        for &(k, d1, d2) in &s.d[..s.nd] {
            let c = col(StatKey::Threshold(j, k))?;
            dq1[(j, c)] = d1;
            dq2[(j, c)] = d2;
        }
    }

    // vec of a diagonal matrix from its diagonal
    let diag_l = LStructure::new(&PatternSpec::diagonal_by(&vec![true; p], &vec![0.0; p]))?;
    let dd = diag_l.duplication();
    let dd_plus = diag_l.elimination();
    let q1m = DMatrix::from_diagonal(&DVector::from_iterator(p, slots.iter().map(|s| s.q1)));
    let q2m = DMatrix::from_diagonal(&DVector::from_iterator(p, slots.iter().map(|s| s.q2)));
    let eye = DMatrix::<f64>::identity(p, p);
    let dvec_q1 = dd * &dq1;
    let dvec_q2 = dd * &dq2;

    // vec Σ from ω
    let sig_pat = PatternSpec::symmetric_by(p, |i, j| {
        (i == j && stage1.kinds[j] == VariableKind::Ordinal).then_some(1.0)
    });
    let sig_l = LStructure::new(&sig_pat)?;
    let mut sel = DMatrix::zeros(sig_l.n_free(), d);
    for (k, (i, j)) in sig_pat.free_positions().into_iter().enumerate() {
        sel[(k, col(StatKey::cov(i, j))?)] = 1.0;
    }
    let dvec_sigma = sig_l.duplication() * sel;

    // Σ̈ = Q₂ΣQ₂
    let q2s = &q2m * &stage1.sigma;
    let dvec_sdd = (kron(&q2s, &eye) + kron(&eye, &q2s)) * &dvec_q2 + kron(&q2m, &q2m) * dvec_sigma;
    let pi_sig_pat = PatternSpec::symmetric_by(p, |i, j| {
        (i == j && !pi.contains(&StatKey::Cov(i, i))).then_some(0.0)
    });
    let pi_sig_l = LStructure::new(&pi_sig_pat)?;
    let sdd_rows = pi_sig_l.elimination() * dvec_sdd;
    let mut sdd_index = std::collections::HashMap::new();
    for (k, (i, j)) in pi_sig_pat.free_positions().into_iter().enumerate() {
        sdd_index.insert(StatKey::cov(i, j), k);
    }

    // μ̈ = diag(Q₁Q₂) + μ
    let dvec_mu = kron(&q2m, &eye) * &dvec_q1 + kron(&eye, &q1m) * &dvec_q2;
    let mut mu_rows = dd_plus * dvec_mu;
    for j in 0..p {
        if stage1.kinds[j] == VariableKind::Continuous {
            mu_rows[(j, col(StatKey::Mean(j))?)] += 1.0;
        }
    }

    let mut l = DMatrix::zeros(pi.len(), d);
    for (r, key) in pi.keys().iter().enumerate() {
        match *key {
            StatKey::Mean(j) => l.row_mut(r).copy_from(&mu_rows.row(j)),
            StatKey::Cov(..) => {
                let k = sdd_index[key];
                l.row_mut(r).copy_from(&sdd_rows.row(k));
            }
            StatKey::Threshold(j, k) => {
                // τ̈_k = (τ_k + q₁)q₂: (Q₂ ⊗ I)dQ₁ + (I ⊗ (Q₁ + D_τk))dQ₂, diagonal slot j
                let mut dk = DMatrix::zeros(p, p);
                dk[(j, j)] = stage1.thresholds[j][k];
                let blk =
                    dd_plus * (kron(&q2m, &eye) * &dvec_q1 + kron(&eye, &(&q1m + dk)) * &dvec_q2);
                l.row_mut(r).copy_from(&blk.row(j));
                l[(r, col(StatKey::Threshold(j, k))?)] += slots[j].q2;
            }
        }
    }
    debug_assert!(anchors.len() == p);
    Ok(l)
}

/// Var(π) = L·Σ_ω·Lᵀ, symmetrized.
pub fn var_pi(stage1: &StageOneStats, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if l.ncols() != stage1.acov.nrows() {
        return Err(Error::Validation(format!(
            "Jacobian has {} columns, Σ_ω is {}x{}",
            l.ncols(),
            stage1.acov.nrows(),
            stage1.acov.ncols()
        )));
    }
    let v = l * &stage1.acov * l.transpose();
    Ok((&v + v.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments1::VariableMeta;
    use crate::patcalc::numdiff;

    fn single(tau: &[f64]) -> StageOneStats {
        let meta = VariableMeta::ordinal_count("y", tau.len() + 1).unwrap();
        StageOneStats::from_moments(
            &[meta],
            &DVector::zeros(1),
            &[tau.to_vec()],
            &DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn mv(a: usize, b: usize, va: f64, vb: f64) -> Anchor {
        Anchor::MeanVariance { a, b, va, vb }
    }

    #[test]
    fn q_for_unit_anchors() {
        let st = single(&[-0.5, 0.3]);
        let (q1, q2) =
            compute_q(&st, &ReparamSpec::standard().with("y", mv(0, 1, 0.0, 1.0))).unwrap();
        assert!((q1[0] - 0.5).abs() < 1e-15);
        assert!((q2[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn q_for_education_anchors() {
        let st = single(&[-0.2, 0.9]);
        let (q1, q2) = compute_q(
            &st,
            &ReparamSpec::standard().with("y", mv(0, 1, 12.0, 16.0)),
        )
        .unwrap();
        assert!((q1[0] - 3.5).abs() < 1e-13);
        assert!((q2[0] - 4.0 / 1.1).abs() < 1e-13);
        assert!(((-0.2 + q1[0]) * q2[0] - 12.0).abs() < 1e-12);
        assert!(((0.9 + q1[0]) * q2[0] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn third_threshold_mean_and_variance() {
        let st = single(&[-0.5, 0.3, 1.0]);
        let r =
            transform_moments(&st, &ReparamSpec::standard().with("y", mv(0, 1, 0.0, 1.0))).unwrap();
        assert!((r.tau_ddot[0][2] - 1.875).abs() < 1e-14);
        assert!((r.mu_ddot[0] - 0.625).abs() < 1e-14);
        assert!((r.sigma_ddot[(0, 0)] - 1.5625).abs() < 1e-14);
        assert_eq!(r.tau_ddot[0][0], 0.0);
        assert_eq!(r.tau_ddot[0][1], 1.0);
    }

    #[test]
    fn coincident_thresholds_are_singular() {
        let meta = VariableMeta::ordinal_count("y", 4).unwrap();
        let mut st = StageOneStats::from_moments(
            &[meta],
            &DVector::zeros(1),
            &[vec![-0.5, 0.3, 1.0]],
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        st.thresholds[0][1] = -0.5;
        let err =
            compute_q(&st, &ReparamSpec::standard().with("y", mv(0, 1, 0.0, 1.0))).unwrap_err();
        assert!(matches!(err, Error::SingularTransform { .. }));
    }

    #[test]
    fn binary_rejects_two_anchors() {
        let st = single(&[0.1]);
        assert!(compute_q(&st, &ReparamSpec::standard().with("y", mv(0, 1, 0.0, 1.0))).is_err());
        let ok = transform_moments(
            &st,
            &ReparamSpec::standard().with(
                "y",
                Anchor::MeanOnly {
                    index: 0,
                    value: 0.0,
                },
            ),
        )
        .unwrap();
        assert!((ok.mu_ddot[0] + 0.1).abs() < 1e-15);
        assert_eq!(ok.sigma_ddot[(0, 0)], 1.0);
    }

    #[test]
    fn single_variable_jacobian_matches_differences() {
        let mut st = single(&[-0.5, 0.3, 1.0]);
        st.acov = DMatrix::identity(3, 3);
        let spec = ReparamSpec::standard().with("y", mv(0, 1, 0.0, 1.0));
        let l = reparam_jacobian(&st, &spec).unwrap();
        let nd = numdiff(
            |w: &DVector<f64>| transform_moments(&st.with_omega(w), &spec).map(|r| r.pi()),
            &st.omega(),
            1e-6,
        )
        .unwrap();
        assert_eq!(l.shape(), nd.shape());
        for (a, b) in l.iter().zip(nd.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
