//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! before asserting.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use pivsem::gauss::{bvn_cdf, bvn_cdf_da, bvn_cdf_drho};
use pivsem::patcalc::{
    inverse_rule, numdiff, product_rule, quadratic_form_rule, sandwich_inverse_rule, vec,
};
use pivsem::pivfit::{jacobian_theta1, jacobian_theta2, VarRef2};
use pivsem::{
    assemble_omega, build_system, fit_data, fit_moments, fit_theta1, fit_theta2, paper_design,
    parse_model, reparam_jacobian, run_study, transform_moments, Anchor, CoefRef, DataTable,
    Design, FitOptions, FitResult, ModelParams, ModelSpec, MomentFile, MomentInput, NpdPolicy,
    ParamGroup, Parameterization, ReparamSpec, StageOneStats, StudyConfig, StudySummary,
    VariableMeta, Weight,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {verdict} ({detail})");
}

/// Largest elementwise error scaled by max(1, |reference|).
fn rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5
}

fn sorted_thresholds(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut t = -1.2 + 0.4 * normal(rng);
    (0..k)
        .map(|_| {
            t += 0.3 + rng.random::<f64>();
            t
        })
        .collect()
}

/// Random stage-one statistics: two five-category ordinal variables and two
/// continuous ones, with a correlation-scaled Σ for the ordinal block.
fn random_stage1(rng: &mut ChaCha8Rng) -> StageOneStats {
    let metas = vec![
        VariableMeta::ordinal_count("o1", 5).unwrap(),
        VariableMeta::continuous("c1"),
        VariableMeta::ordinal_count("o2", 5).unwrap(),
        VariableMeta::continuous("c2"),
    ];
    let s = random_spd(rng, 4);
    let d: Vec<f64> = (0..4)
        .map(|j| if j % 2 == 0 { s[(j, j)].sqrt() } else { 1.0 })
        .collect();
    let sigma = DMatrix::from_fn(4, 4, |i, j| s[(i, j)] / (d[i] * d[j]));
    let means = DVector::from_fn(4, |_, _| normal(rng));
    let th = vec![
        sorted_thresholds(rng, 4),
        vec![],
        sorted_thresholds(rng, 4),
        vec![],
    ];
    let mut st = StageOneStats::from_moments(&metas, &means, &th, &sigma).unwrap();
    st.acov = random_spd(rng, st.layout.len()) * 1e-3;
    st.n_obs = 500;
    st
}

fn random_anchor(rng: &mut ChaCha8Rng) -> Anchor {
    match rng.random_range(0..3) {
        0 => Anchor::None,
        1 => Anchor::MeanOnly {
            index: rng.random_range(0..4),
            value: normal(rng),
        },
        _ => {
            let a = rng.random_range(0..3);
            let b = rng.random_range(a + 1..4);
            let va = 10.0 * normal(rng);
            Anchor::MeanVariance {
                a,
                b,
                va,
                vb: va + 0.5 + 5.0 * rng.random::<f64>(),
            }
        }
    }
}

const DESIGN_MODEL: &str = "\
eta1 =~ y1 + y2
eta2 =~ y3 + y4 + y5
eta3 =~ y6 + y7 + y8
eta4 =~ y9 + y10
eta5 =~ y11 + y12
eta3 ~ eta1
eta4 ~ eta2
eta5 ~ eta2 + eta3 + eta4
";

/// Moments near those of a randomized five-factor model, perturbed so the
/// model does not fit exactly. y6-y12 are ordinal.
fn random_model_input(rng: &mut ChaCha8Rng, model: &ModelSpec) -> MomentInput {
    let mut params = ModelParams::fixed_part(model);
    for i in 0..12 {
        for f in 0..5 {
            if model.lambda[i][f].is_free() {
                params.lambda[(i, f)] = 0.4 + 0.8 * rng.random::<f64>();
            }
        }
    }
    for h in 0..5 {
        for g in 0..5 {
            if model.beta[h][g].is_free() {
                params.beta[(h, g)] = 0.1 + 0.4 * rng.random::<f64>();
            }
        }
        params.psi[(h, h)] = 0.4 + 0.6 * rng.random::<f64>();
    }
    params.psi[(0, 1)] = 0.2 * params.psi[(0, 0)].min(params.psi[(1, 1)]);
    params.psi[(1, 0)] = params.psi[(0, 1)];
    for i in 0..12 {
        params.theta_eps[(i, i)] = 0.3 + 0.5 * rng.random::<f64>();
    }
    let (mut sigma, _) = pivsem::implied_moments(&params).unwrap();
    let noise = random_matrix(rng, 12, 12) * 0.02;
    sigma += &noise + noise.transpose();
    let sd: Vec<f64> = (0..12)
        .map(|i| if i >= 5 { sigma[(i, i)].sqrt() } else { 1.0 })
        .collect();
    let sigma = DMatrix::from_fn(12, 12, |i, j| sigma[(i, j)] / (sd[i] * sd[j]));
    let metas: Vec<VariableMeta> = (1..=12)
        .map(|i| {
            if i >= 6 {
                VariableMeta::ordinal_count(format!("y{i}"), 5).unwrap()
            } else {
                VariableMeta::continuous(format!("y{i}"))
            }
        })
        .collect();
    let means = DVector::from_fn(12, |_, _| normal(rng));
    let th: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            if i >= 5 {
                sorted_thresholds(rng, 4)
            } else {
                vec![]
            }
        })
        .collect();
    let mut st = StageOneStats::from_moments(&metas, &means, &th, &sigma).unwrap();
    st.acov = random_spd(rng, st.layout.len()) * 1e-3;
    st.n_obs = 400;
    MomentInput::from_stage1(&st)
        .select(&model.observed)
        .unwrap()
}

fn with_coefs(model: &ModelSpec, coefs: &[(CoefRef, f64)]) -> ModelParams {
    let mut p = ModelParams::fixed_part(model);
    for &(c, v) in coefs {
        match c {
            CoefRef::Loading(i, f) => p.lambda[(i, f)] = v,
            CoefRef::Regression(h, g) => p.beta[(h, g)] = v,
        }
    }
    p
}

fn implied_at(params: &ModelParams, keys: &[pivsem::StatKey]) -> DVector<f64> {
    let (s, _) = pivsem::implied_moments(params).unwrap();
    DVector::from_iterator(
        keys.len(),
        keys.iter().map(|k| match *k {
            pivsem::StatKey::Cov(i, j) => s[(i, j)],
            _ => unreachable!(),
        }),
    )
}

#[test]
fn criterion_1_analytic_derivatives_match_finite_differences() {
    const TRIALS: usize = 20;
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |family: &'static str, e: f64| {
        let w = worst.entry(family).or_insert(0.0);
        *w = w.max(e);
    };

    for _ in 0..TRIALS {
        // matrix rules
        let n = rng.random_range(2..5);
        let x = random_spd(&mut rng, n);
        let fd = numdiff(
            |v: &DVector<f64>| {
                DMatrix::from_column_slice(n, n, v.as_slice())
                    .try_inverse()
                    .map(|m| vec(&m))
                    .ok_or(())
            },
            &vec(&x),
            1e-6,
        )
        .unwrap();
        note("inverse rule", rel_err(&inverse_rule(&x).unwrap(), &fd));

        let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
        let a = random_matrix(&mut rng, n, r);
        let b = random_matrix(&mut rng, n, c);
        let fd = numdiff(
            |v: &DVector<f64>| {
                let xi = DMatrix::from_column_slice(n, n, v.as_slice())
                    .try_inverse()
                    .ok_or(())?;
                Ok::<_, ()>(vec(&(a.transpose() * xi * &b)))
            },
            &vec(&x),
            1e-6,
        )
        .unwrap();
        note(
            "sandwich rule",
            rel_err(&sandwich_inverse_rule(&a, &x, &b).unwrap(), &fd),
        );

        let am = random_spd(&mut rng, n);
        let fd = numdiff(
            |v: &DVector<f64>| {
                let xm = DMatrix::from_column_slice(n, n, v.as_slice());
                Ok::<_, ()>(vec(&(&xm * &am * &xm)))
            },
            &vec(&x),
            1e-6,
        )
        .unwrap();
        note(
            "quadratic form rule",
            rel_err(&quadratic_form_rule(&x, &am), &fd),
        );

        // U(t) and V(t) linear in a parameter vector t
        let (p, q, s, k) = (
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
            3,
        );
        let du = random_matrix(&mut rng, p * q, k);
        let dv = random_matrix(&mut rng, q * s, k);
        let u0 = random_matrix(&mut rng, p, q);
        let v0 = random_matrix(&mut rng, q, s);
        let t0 = DVector::from_fn(k, |_, _| normal(&mut rng));
        let at = |t: &DVector<f64>| {
            let u = &u0 + DMatrix::from_column_slice(p, q, (&du * t).as_slice());
            let v = &v0 + DMatrix::from_column_slice(q, s, (&dv * t).as_slice());
            (u, v)
        };
        let fd = numdiff(
            |t: &DVector<f64>| {
                let (u, v) = at(t);
                Ok::<_, ()>(vec(&(u * v)))
            },
            &t0,
            1e-6,
        )
        .unwrap();
        let (u, v) = at(&t0);
        note(
            "product rule",
            rel_err(&product_rule(&u, &v, &du, &dv), &fd),
        );

        // bivariate normal
        let (ga, gb, rho) = (
            normal(&mut rng),
            normal(&mut rng),
            1.8 * rng.random::<f64>() - 0.9,
        );
        let fd = numdiff(
            |v: &DVector<f64>| bvn_cdf(v[0], v[1], v[2]).map(|p| DVector::from_element(1, p)),
            &DVector::from_vec(vec![ga, gb, rho]),
            1e-5,
        )
        .unwrap();
        let an = DMatrix::from_row_slice(
            1,
            3,
            &[
                bvn_cdf_da(ga, gb, rho),
                bvn_cdf_da(gb, ga, rho),
                bvn_cdf_drho(ga, gb, rho).unwrap(),
            ],
        );
        note("bivariate normal", rel_err(&an, &fd));

        // threshold transform
        let st = random_stage1(&mut rng);
        let spec = ReparamSpec::standard()
            .with("o1", random_anchor(&mut rng))
            .with("o2", random_anchor(&mut rng));
        let fd = numdiff(
            |w: &DVector<f64>| transform_moments(&st.with_omega(w), &spec).map(|r| r.pi()),
            &st.omega(),
            1e-6,
        )
        .unwrap();
        note(
            "reparameterization",
            rel_err(&reparam_jacobian(&st, &spec).unwrap(), &fd),
        );
    }

    let model = parse_model(DESIGN_MODEL).unwrap();
    let system = build_system(&model).unwrap();
    for _ in 0..TRIALS {
        let input = random_model_input(&mut rng, &model);
        let t1 = fit_theta1(&model, &system, &input).unwrap();
        let fd = numdiff(
            |v: &DVector<f64>| {
                fit_theta1(&model, &system, &input.with_values(v)).map(|t| t.values())
            },
            &input.values(),
            1e-6,
        )
        .unwrap();
        note(
            "coefficients (K, incl. intercept rows)",
            rel_err(&t1.k, &fd),
        );

        let mut params = with_coefs(&model, &t1.coefs);
        let t2 = fit_theta2(&model, &params, &input, Weight::Full).unwrap();
        // H: θ₂ is linear in the covariance moments for fixed θ₁
        let cov_pos: Vec<usize> = t2
            .cov_keys
            .iter()
            .map(|k| input.layout.position(k).unwrap())
            .collect();
        let fd = numdiff(
            |v: &DVector<f64>| {
                fit_theta2(&model, &params, &input.with_values(v), Weight::Full).map(|t| t.values)
            },
            &input.values(),
            1e-6,
        )
        .unwrap();
        let fd_cov = DMatrix::from_fn(fd.nrows(), cov_pos.len(), |r, c| fd[(r, cov_pos[c])]);
        note("variance estimator (H)", rel_err(&t2.h, &fd_cov));

        for (e, &v) in t2.entries.iter().zip(t2.values.iter()) {
            match *e {
                VarRef2::Psi(g, h) => {
                    params.psi[(g, h)] = v;
                    params.psi[(h, g)] = v;
                }
                VarRef2::Eps(i, j) => {
                    params.theta_eps[(i, j)] = v;
                    params.theta_eps[(j, i)] = v;
                }
            }
        }
        let keys = &t2.cov_keys;
        let coefs: Vec<CoefRef> = t1.coefs.iter().map(|c| c.0).collect();
        let x0 = DVector::from_iterator(coefs.len(), t1.coefs.iter().map(|c| c.1));
        let fd = numdiff(
            |x: &DVector<f64>| {
                let mut p = params.clone();
                for (c, &v) in coefs.iter().zip(x.iter()) {
                    match *c {
                        CoefRef::Loading(i, f) => p.lambda[(i, f)] = v,
                        CoefRef::Regression(h, g) => p.beta[(h, g)] = v,
                    }
                }
                Ok::<_, ()>(implied_at(&p, keys))
            },
            &x0,
            1e-6,
        )
        .unwrap();
        note(
            "implied moments in θ₁ (J₁)",
            rel_err(&jacobian_theta1(&params, &coefs, keys).unwrap(), &fd),
        );

        let fd = numdiff(
            |x: &DVector<f64>| {
                let mut p = params.clone();
                for (e, &v) in t2.entries.iter().zip(x.iter()) {
                    match *e {
                        VarRef2::Psi(g, h) => {
                            p.psi[(g, h)] = v;
                            p.psi[(h, g)] = v;
                        }
                        VarRef2::Eps(i, j) => {
                            p.theta_eps[(i, j)] = v;
                            p.theta_eps[(j, i)] = v;
                        }
                    }
                }
                Ok::<_, ()>(implied_at(&p, keys))
            },
            &t2.values,
            1e-6,
        )
        .unwrap();
        note(
            "implied moments in θ₂ (J₂)",
            rel_err(&jacobian_theta2(&params, &t2.entries, keys).unwrap(), &fd),
        );
    }

    let max = worst.values().copied().fold(0.0, f64::max);
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    report(
        1,
        max < TOL,
        &format!("{TRIALS} inputs per family; {}", detail.join(", ")),
    );
    assert!(max < TOL, "{worst:?}");
}

fn bivariate(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> (Vec<f64>, Vec<f64>) {
    let s = (1.0 - rho * rho).sqrt();
    (0..n)
        .map(|_| {
            let a = normal(rng);
            (a, rho * a + s * normal(rng))
        })
        .unzip()
}

fn discretize(z: &[f64], cuts: &[f64]) -> Vec<f64> {
    z.iter()
        .map(|&v| cuts.iter().filter(|&&c| v > c).count() as f64)
        .collect()
}

#[test]
fn criterion_2_polychoric_and_polyserial_recovery() {
    // Φ⁻¹ of cumulative probabilities (0.25, 0.5, 0.75) and (0.3, 0.7)
    let cuts_a = [-0.6744897501960817, 0.0, 0.6744897501960817];
    let cuts_b = [-0.5244005127080407, 0.5244005127080407];
    let n = 50_000;
    let mut worst_rho: f64 = 0.0;
    let mut worst_tau: f64 = 0.0;
    for (r, rho) in [-0.8, 0.0, 0.5].into_iter().enumerate() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + 100 * r as u64 + seed);
            let (z1, z2) = bivariate(&mut rng, n, rho);
            let ya = discretize(&z1, &cuts_a);
            let yb = discretize(&z2, &cuts_b);
            let x: Vec<f64> = z2.iter().map(|v| 2.0 + 1.5 * v).collect();

            let polychoric =
                DataTable::new(vec!["a".into(), "b".into()], vec![ya.clone(), yb]).unwrap();
            let metas = [
                VariableMeta::ordinal_count("a", 4).unwrap(),
                VariableMeta::ordinal_count("b", 3).unwrap(),
            ];
            let st = assemble_omega(&polychoric, &metas).unwrap();
            worst_rho = worst_rho.max((st.sigma[(1, 0)] - rho).abs());
            let ia = st.index_of("a").unwrap();
            let ib = st.index_of("b").unwrap();
            for (t, c) in st.thresholds[ia].iter().zip(cuts_a) {
                worst_tau = worst_tau.max((t - c).abs());
            }
            for (t, c) in st.thresholds[ib].iter().zip(cuts_b) {
                worst_tau = worst_tau.max((t - c).abs());
            }

            let polyserial = DataTable::new(vec!["a".into(), "x".into()], vec![ya, x]).unwrap();
            let metas = [
                VariableMeta::ordinal_count("a", 4).unwrap(),
                VariableMeta::continuous("x"),
            ];
            let st = assemble_omega(&polyserial, &metas).unwrap();
            let r = st.sigma[(1, 0)] / (st.sigma[(0, 0)] * st.sigma[(1, 1)]).sqrt();
            worst_rho = worst_rho.max((r - rho).abs());
            for (t, c) in st.thresholds[0].iter().zip(cuts_a) {
                worst_tau = worst_tau.max((t - c).abs());
            }
        }
    }
    let pass = worst_rho < 0.02 && worst_tau < 0.02;
    report(
        2,
        pass,
        &format!("max |ρ̂−ρ| {worst_rho:.4}, max threshold error {worst_tau:.4}"),
    );
    assert!(pass);
}

fn correlation(s: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt()
    })
}

/// Anchor exactness, identity round trip and correlation invariance for one
/// set of stage-one statistics. Returns the largest deviations.
fn reparam_properties(st: &StageOneStats, spec: &ReparamSpec) -> (bool, f64, f64) {
    let r = transform_moments(st, spec).unwrap();
    let mut exact = true;
    for (j, name) in st.names.iter().enumerate() {
        match spec.anchor(name) {
            Anchor::None => {}
            Anchor::MeanOnly { index, value } => exact &= r.tau_ddot[j][index] == value,
            Anchor::MeanVariance { a, b, va, vb } => {
                exact &= r.tau_ddot[j][a] == va && r.tau_ddot[j][b] == vb
            }
        }
    }
    let id = transform_moments(st, &ReparamSpec::standard()).unwrap();
    let round = (id.pi() - st.omega()).amax();
    let corr = (correlation(&r.sigma_ddot) - correlation(&st.sigma)).amax();
    // back-transform: standardized thresholds and correlations recover stage one
    let mut back: f64 = 0.0;
    for j in 0..st.n_vars() {
        let sd = r.sigma_ddot[(j, j)].sqrt();
        for (t, t0) in r.tau_ddot[j].iter().zip(&st.thresholds[j]) {
            back = back.max(((t - r.mu_ddot[j]) / sd - t0).abs());
        }
    }
    (exact, round, corr.max(back))
}

#[test]
fn criterion_3_reparameterization_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut exact, mut round, mut inv) = (true, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let st = random_stage1(&mut rng);
        let spec = ReparamSpec::standard()
            .with("o1", random_anchor(&mut rng))
            .with("o2", random_anchor(&mut rng));
        let (e, r, c) = reparam_properties(&st, &spec);
        exact &= e;
        round = round.max(r);
        inv = inv.max(c);
    }
    let pass = exact && round <= 1e-12 && inv <= 1e-12;
    report(
        3,
        pass,
        &format!("anchors exact: {exact}, identity round trip {round:.1e}, correlation invariance {inv:.1e}"),
    );
    assert!(pass);
}

/// Generating values of the five-factor design as published.
fn published_design() -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("eta3~eta1", 0.5),
        ("eta4~eta2", 0.4),
        ("eta5~eta2", 0.3),
        ("eta5~eta3", 0.4),
        ("eta5~eta4", 0.4),
        ("eta1=~y1", 1.0),
        ("eta1=~y2", 0.4),
        ("eta2=~y3", 1.0),
        ("eta2=~y4", 0.7),
        ("eta2=~y5", 0.6),
        ("eta3=~y6", 1.0),
        ("eta3=~y7", 0.8),
        ("eta3=~y8", 0.7),
        ("eta4=~y9", 1.0),
        ("eta4=~y10", 0.6),
        ("eta5=~y11", 1.0),
        ("eta5=~y12", 0.5),
        ("eta1~~eta1", 0.7),
        ("eta2~~eta1", 0.3),
        ("eta2~~eta2", 0.8),
        ("eta3~~eta3", 0.4),
        ("eta4~~eta4", 0.5),
        ("eta5~~eta5", 0.5),
    ])
}

#[test]
fn criterion_4_population_moments_recover_generating_values() {
    let design = Design::new(paper_design()).unwrap();
    let fit = design.truth(Parameterization::Standard).unwrap();
    let mut worst: f64 = 0.0;
    let mut missing = Vec::new();
    for (name, v) in published_design() {
        match fit.param(name) {
            Some(p) => worst = worst.max((p.estimate - v).abs()),
            None => missing.push(name),
        }
    }
    let g = &design.params;
    let e = &fit.estimates;
    worst = worst
        .max((&e.lambda - &g.lambda).amax())
        .max((&e.beta - &g.beta).amax())
        .max((&e.psi - &g.psi).amax())
        .max((&e.theta_eps - &g.theta_eps).amax())
        .max(e.alpha_y.amax())
        .max(e.alpha_eta.amax());
    // thresholds at Φ⁻¹ of (0.3, 0.7, 0.9, 0.96)
    let cuts = [
        -0.5244005127080407,
        0.5244005127080407,
        1.2815515655446004,
        1.7506860712521692,
    ];
    for i in 6..=12 {
        for (k, c) in cuts.iter().enumerate() {
            let p = fit.param(&format!("y{i}|t{}", k + 1)).unwrap();
            worst = worst.max((p.estimate - c).abs());
        }
    }
    let pass = worst < 1e-10 && missing.is_empty();
    report(
        4,
        pass,
        &format!("max deviation {worst:.1e}; missing {missing:?}"),
    );
    assert!(pass);
}

/// Standard parameterization, both NPD policies, 200 replications at every
/// sample size of the design.
fn desk_study() -> &'static StudySummary {
    static STUDY: OnceLock<StudySummary> = OnceLock::new();
    STUDY.get_or_init(|| {
        let config = StudyConfig {
            replications: 200,
            parameterizations: vec![Parameterization::Standard],
            ..paper_design()
        };
        run_study(&config).unwrap()
    })
}

fn rb(n: usize, policy: NpdPolicy, g: ParamGroup) -> Option<f64> {
    desk_study()
        .cell(n, Parameterization::Standard, policy, g)
        .and_then(|c| c.rb)
}

#[test]
fn criterion_5_relative_bias_at_desk_scale() {
    let s = desk_study();
    let ex = NpdPolicy::Exclude;
    let mut fails = Vec::new();

    let large: Vec<(ParamGroup, f64)> = ParamGroup::ALL
        .iter()
        .filter_map(|&g| rb(3200, ex, g).map(|v| (g, v)))
        .collect();
    for &(g, v) in &large {
        if v.abs() >= 2.0 {
            fails.push(format!("N=3200 {} RB {v:.2}", g.symbol()));
        }
    }

    // sign, |RB| > 5 and within ±50% of the published value
    let band = |v: f64, published: f64| {
        v.signum() == published.signum()
            && v.abs() > 5.0
            && (v - published).abs() <= 0.5 * published.abs()
    };
    let lo = rb(100, ex, ParamGroup::LambdaO).unwrap();
    let zeta = rb(100, ex, ParamGroup::Zeta).unwrap();
    if !band(lo, -8.7) {
        fails.push(format!("N=100 Λ_y(o) RB {lo:.2} outside [-13.05, -5]"));
    }
    if !band(zeta, 13.3) {
        fails.push(format!("N=100 Σζ RB {zeta:.2} outside [6.65, 19.95]"));
    }
    for r in &s.rates {
        if r.nonconverged_pct != 0.0 {
            fails.push(format!(
                "N={} nonconvergence {:.1}%",
                r.n, r.nonconverged_pct
            ));
        }
    }
    let worst = large.iter().map(|x| x.1.abs()).fold(0.0, f64::max);
    let pass = fails.is_empty();
    report(
        5,
        pass,
        &format!(
            "N=3200 max |RB| {worst:.2}; N=100 Λ_y(o) {lo:.2}, Σζ {zeta:.2}; {}",
            if pass {
                "all bands met".to_string()
            } else {
                fails.join("; ")
            }
        ),
    );
    assert!(pass, "{fails:?}");
}

#[test]
fn criterion_6_standard_error_calibration_and_npd_rate() {
    let s = desk_study();
    let mut fails = Vec::new();
    let mut worst: f64 = 0.0;
    for g in ParamGroup::ALL {
        if let Some(v) = s
            .cell(3200, Parameterization::Standard, NpdPolicy::Exclude, g)
            .and_then(|c| c.rbse)
        {
            worst = worst.max(v.abs());
            if v.abs() > 10.0 {
                fails.push(format!("{} RBSE {v:.1}", g.symbol()));
            }
        }
    }
    let npd = s.rate(100, Parameterization::Standard).unwrap().npd_pct;
    if !(30.0..=60.0).contains(&npd) {
        fails.push(format!("N=100 NPD {npd:.1}%"));
    }
    let pass = fails.is_empty();
    report(
        6,
        pass,
        &format!("N=3200 max |RBSE| {worst:.1}; N=100 NPD {npd:.1}%"),
    );
    assert!(pass, "{fails:?}");
}

const EDU_MODEL: &str = "\
ME =~ maeduc + madeg
PE =~ paeduc + padeg
CE =~ cheduc + chdeg
CE ~ ME + PE
";

/// Education-like data: years of schooling (continuous, mean 13, sd 3)
/// and five-category degree codes 1..5 for three constructs.
fn education_data(n: usize) -> DataTable {
    let config: StudyConfig = serde_json::from_value(serde_json::json!({
        "model": EDU_MODEL,
        "parameters": {
            "ME=~madeg": 0.9, "PE=~padeg": 0.9, "CE=~chdeg": 0.9,
            "CE~ME": 0.2, "CE~PE": 0.2,
            "ME~~ME": 0.8, "PE~~PE": 0.8, "ME~~PE": 0.3, "CE~~CE": 0.5
        },
        "ordinal": {
            "madeg": [0.15, 0.5, 0.1, 0.15, 0.1],
            "padeg": [0.15, 0.5, 0.1, 0.15, 0.1],
            "chdeg": [0.1, 0.45, 0.1, 0.2, 0.15]
        },
        "sample_sizes": [n],
        "replications": 1,
        "seed": 17
    }))
    .unwrap();
    let d = Design::new(config).unwrap();
    let raw = d.generate(n, 0);
    let ordinal = d.ordinal_names();
    let cols = (0..raw.n_cols())
        .map(|j| {
            let is_ord = ordinal.contains(&raw.names()[j]);
            raw.column(j)
                .iter()
                .map(|&v| if is_ord { v + 1.0 } else { 13.0 + 3.0 * v })
                .collect()
        })
        .collect();
    DataTable::new(raw.names().to_vec(), cols).unwrap()
}

fn education_metas(data: &DataTable) -> Vec<VariableMeta> {
    data.names()
        .iter()
        .enumerate()
        .map(|(j, n)| {
            if n.ends_with("deg") {
                VariableMeta::ordinal_from_column(n.clone(), data.column(j)).unwrap()
            } else {
                VariableMeta::continuous(n.clone())
            }
        })
        .collect()
}

fn education_anchors() -> BTreeMap<String, Anchor> {
    ["madeg", "padeg", "chdeg"]
        .into_iter()
        .map(|v| {
            (
                v.to_string(),
                Anchor::MeanVariance {
                    a: 0,
                    b: 2,
                    va: 12.0,
                    vb: 16.0,
                },
            )
        })
        .collect()
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Path of the `pivsem` binary, built once with the test profile.
fn cli() -> &'static PathBuf {
    static BIN: OnceLock<PathBuf> = OnceLock::new();
    BIN.get_or_init(|| {
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let status = Command::new(cargo)
            .current_dir(workspace_root())
            .args([
                "build",
                "-q",
                "--profile",
                "test",
                "-p",
                "pivsem-cli",
                "--bin",
                "pivsem",
            ])
            .status()
            .expect("cargo runs");
        assert!(status.success(), "building the CLI failed");
        let target = std::env::var_os("CARGO_TARGET_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| workspace_root().join("target"));
        target.join("debug").join("pivsem")
    })
}

fn run_cli(args: &[&str]) -> String {
    let out = Command::new(cli()).args(args).output().expect("CLI runs");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_csv(data: &DataTable, path: &std::path::Path) {
    let mut s = data.names().join(",") + "\n";
    for i in 0..data.n_rows() {
        let row: Vec<String> = (0..data.n_cols())
            .map(|j| data.column(j)[i].to_string())
            .collect();
        s += &(row.join(",") + "\n");
    }
    std::fs::write(path, s).unwrap();
}

const ANCHOR_ARGS: [&str; 6] = [
    "--anchors",
    "madeg=t1:12,t3:16",
    "--anchors",
    "padeg=t1:12,t3:16",
    "--anchors",
    "chdeg=t1:12,t3:16",
];

#[test]
fn criterion_7_fixed_threshold_mechanism_on_education_data() {
    let data = education_data(1500);
    let metas = education_metas(&data);
    let st = assemble_omega(&data, &metas).unwrap();
    let mut spec = ReparamSpec::standard();
    for (k, a) in education_anchors() {
        spec = spec.with(k, a);
    }
    let (exact, round, inv) = reparam_properties(&st, &spec);

    let model = parse_model(EDU_MODEL).unwrap();
    let options = FitOptions {
        anchors: education_anchors(),
        ..FitOptions::default()
    };
    let fit = fit_data(&model, &data, &metas, &options).unwrap();
    let mut fit_exact = fit.parameterization == Parameterization::Alternative;
    for v in ["madeg", "padeg", "chdeg"] {
        fit_exact &= fit.param(&format!("{v}|t1")).unwrap().estimate == 12.0;
        fit_exact &= fit.param(&format!("{v}|t3")).unwrap().estimate == 16.0;
        let t2 = fit.param(&format!("{v}|t2")).unwrap().estimate;
        let t4 = fit.param(&format!("{v}|t4")).unwrap().estimate;
        fit_exact &= 12.0 < t2 && t2 < 16.0 && 16.0 < t4;
    }

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("edu.csv");
    let model_path = dir.path().join("edu.txt");
    write_csv(&data, &csv);
    std::fs::write(&model_path, EDU_MODEL).unwrap();
    let mut args = vec![
        "fit",
        "--data",
        csv.to_str().unwrap(),
        "--model",
        model_path.to_str().unwrap(),
        "--types",
        "madeg=ordinal,padeg=ordinal,chdeg=ordinal",
    ];
    args.extend(ANCHOR_ARGS);
    let table = run_cli(&args);
    let header: Vec<&str> = table
        .lines()
        .find(|l| l.starts_with("Parameter"))
        .map(|l| l.split_whitespace().collect())
        .unwrap_or_default();
    let layout = header == ["Parameter", "Est.", "Std.Err.", "z", "R²_S"]
        && [
            "ME=~madeg",
            "CE~ME",
            "madeg|t1",
            "madeg|t2",
            "CE~1",
            "CE~~CE",
            "chdeg~~chdeg",
        ]
        .iter()
        .all(|n| table.lines().any(|l| l.starts_with(n)))
        && table.contains("MIIVs:")
        && table.contains("Shea R²:");

    let pass = exact && round <= 1e-12 && inv <= 1e-12 && fit_exact && layout;
    report(
        7,
        pass,
        &format!(
            "anchors exact: {exact}/{fit_exact}, round trip {round:.1e}, invariance {inv:.1e}, report layout: {layout}"
        ),
    );
    assert!(pass, "{table}");
}

fn max_diff(a: &FitResult, b: &FitResult) -> f64 {
    assert_eq!(a.params.len(), b.params.len());
    a.params
        .iter()
        .zip(&b.params)
        .map(|(x, y)| {
            assert_eq!(x.name, y.name);
            let se = match (x.se, y.se) {
                (Some(s), Some(t)) => (s - t).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            (x.estimate - y.estimate).abs().max(se)
        })
        .fold(0.0, f64::max)
}

fn json_params(text: &str) -> Vec<(String, f64, Option<f64>)> {
    let v: serde_json::Value = serde_json::from_str(text).unwrap();
    v["parameters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            (
                p["name"].as_str().unwrap().to_string(),
                p["estimate"].as_f64().unwrap(),
                p["se"].as_f64(),
            )
        })
        .collect()
}

#[test]
fn criterion_8_moments_round_trip() {
    let data = education_data(1200);
    let metas = education_metas(&data);
    let model = parse_model(EDU_MODEL).unwrap();
    let mut lib_worst: f64 = 0.0;
    for anchors in [BTreeMap::new(), education_anchors()] {
        let options = FitOptions {
            anchors,
            ..FitOptions::default()
        };
        let direct = fit_data(&model, &data, &metas, &options).unwrap();
        let st = pivsem::stage1_for(&model, &data, &metas, &options).unwrap();
        let text = serde_json::to_string(&MomentInput::from_stage1(&st).to_file()).unwrap();
        let file: MomentFile = serde_json::from_str(&text).unwrap();
        let replay =
            fit_moments(&model, &MomentInput::from_file(&file).unwrap(), &options).unwrap();
        lib_worst = lib_worst.max(max_diff(&direct, &replay));
    }

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("edu.csv");
    let model_path = dir.path().join("edu.txt");
    let bundle = dir.path().join("moments.json");
    write_csv(&data, &csv);
    std::fs::write(&model_path, EDU_MODEL).unwrap();
    let (csv, model_s, bundle_s) = (
        csv.to_str().unwrap(),
        model_path.to_str().unwrap(),
        bundle.to_str().unwrap(),
    );
    let types = "madeg=ordinal,padeg=ordinal,chdeg=ordinal";
    let mut cli_worst: f64 = 0.0;
    for anchored in [false, true] {
        let extra: &[&str] = if anchored { &ANCHOR_ARGS } else { &[] };
        let mut m = vec![
            "moments", "--data", csv, "--types", types, "--model", model_s, "--out", bundle_s,
        ];
        m.extend(extra);
        run_cli(&m);
        let mut direct = vec![
            "fit", "--format", "json", "--data", csv, "--types", types, "--model", model_s,
        ];
        direct.extend(extra);
        let mut replay = vec![
            "fit",
            "--format",
            "json",
            "--from-moments",
            bundle_s,
            "--model",
            model_s,
        ];
        replay.extend(extra);
        let a = json_params(&run_cli(&direct));
        let b = json_params(&run_cli(&replay));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            let se = match (x.2, y.2) {
                (Some(s), Some(t)) => (s - t).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            cli_worst = cli_worst.max((x.1 - y.1).abs()).max(se);
        }
    }
    let pass = lib_worst <= 1e-12 && cli_worst <= 1e-12;
    report(
        8,
        pass,
        &format!("library max difference {lib_worst:.1e}, CLI max difference {cli_worst:.1e}"),
    );
    assert!(pass);
}
