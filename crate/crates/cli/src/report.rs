//! Text, JSON and CSV renderings. Every format carries the same numbers;
//! JSON and CSV print them at full precision.

use anyhow::Result;
use pivsem::{FitResult, MomentInput, Parameterization, StudySummary, VariableKind, Weight};
use serde::Serialize;

use crate::Format;

pub const SCHEMA_VERSION: u32 = 1;

fn z(estimate: f64, se: Option<f64>) -> Option<f64> {
    se.filter(|&s| s > 0.0).map(|s| estimate / s)
}

fn param_label(p: Parameterization) -> &'static str {
    match p {
        Parameterization::Standard => "standard",
        Parameterization::Alternative => "alternative",
    }
}

fn weight_label(w: Weight) -> &'static str {
    match w {
        Weight::Full => "full",
        Weight::Diagonal => "diagonal",
        Weight::Identity => "identity",
    }
}

fn warnings(fit: &FitResult) -> Vec<&'static str> {
    let mut w = Vec::new();
    if fit.npd_sigma_zeta {
        w.push("latent disturbance covariance matrix is not positive definite");
    }
    if fit.npd_sigma_eps {
        w.push("measurement error covariance matrix is not positive definite");
    }
    if fit.negative_derived_variance {
        w.push("a derived residual variance of an ordinal indicator is negative");
    }
    w
}

#[derive(Serialize)]
struct ParamRow<'a> {
    name: &'a str,
    group: pivsem::ParamGroup,
    estimate: f64,
    se: Option<f64>,
    z: Option<f64>,
    free: bool,
    shea_r2: Option<f64>,
}

#[derive(Serialize)]
struct FitJson<'a> {
    schema_version: u32,
    n_obs: usize,
    parameterization: &'static str,
    weight: &'static str,
    parameters: Vec<ParamRow<'a>>,
    equations: &'a [pivsem::EquationReport],
    npd_sigma_zeta: bool,
    npd_sigma_eps: bool,
    negative_derived_variance: bool,
}

pub fn fit(fit: &FitResult, weight: Weight, format: Format) -> String {
    match format {
        Format::Table => fit_table(fit, weight),
        Format::Json => {
            let doc = FitJson {
                schema_version: SCHEMA_VERSION,
                n_obs: fit.n_obs,
                parameterization: param_label(fit.parameterization),
                weight: weight_label(weight),
                parameters: fit
                    .params
                    .iter()
                    .map(|p| ParamRow {
                        name: &p.name,
                        group: p.group,
                        estimate: p.estimate,
                        se: p.se,
                        z: z(p.estimate, p.se),
                        free: p.free,
                        shea_r2: p.shea_r2,
                    })
                    .collect(),
                equations: &fit.equations,
                npd_sigma_zeta: fit.npd_sigma_zeta,
                npd_sigma_eps: fit.npd_sigma_eps,
                negative_derived_variance: fit.negative_derived_variance,
            };
            serde_json::to_string_pretty(&doc).expect("fit report serializes") + "\n"
        }
        Format::Csv => {
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let mut s = String::from("parameter,group,estimate,se,z,free,shea_r2\n");
            for p in &fit.params {
                s += &format!(
                    "{},{},{},{},{},{},{}\n",
                    p.name,
                    serde_json::to_value(p.group)
                        .expect("group serializes")
                        .as_str()
                        .unwrap_or_default(),
                    p.estimate,
                    cell(p.se),
                    cell(z(p.estimate, p.se)),
                    p.free,
                    cell(p.shea_r2)
                );
            }
            s
        }
    }
}

fn fit_table(fit: &FitResult, weight: Weight) -> String {
    let mut s = format!(
        "PIV estimates  N = {}  parameterization: {}  weight: {}\n\n",
        fit.n_obs,
        param_label(fit.parameterization),
        weight_label(weight)
    );
    let width = fit
        .params
        .iter()
        .map(|p| p.name.len())
        .max()
        .unwrap_or(9)
        .max(9)
        + 2;
    s += &format!(
        "{:<width$}{:>10}{:>10}{:>9}{:>8}\n",
        "Parameter", "Est.", "Std.Err.", "z", "R²_S"
    );
    s += &format!("{}\n", "-".repeat(width + 37));
    let num = |v: Option<f64>, w: usize, d: usize| {
        v.map(|x| format!("{x:>w$.d$}"))
            .unwrap_or_else(|| " ".repeat(w))
    };
    let mut last = None;
    for p in &fit.params {
        if last.is_some()
            && last != Some(p.group)
            && group_section(last.unwrap()) != group_section(p.group)
        {
            s += "\n";
        }
        last = Some(p.group);
        s += &format!(
            "{:<width$}{}{}{}{}\n",
            p.name,
            num(Some(p.estimate), 10, 3),
            num(p.se, 10, 3),
            num(z(p.estimate, p.se), 9, 2),
            num(p.shea_r2, 8, 2)
        );
    }
    s += "\nEquations (model-implied instruments)\n";
    for e in &fit.equations {
        s += &format!(
            "  {}: {} on {}\n",
            e.label,
            e.dependent,
            e.regressors.join(", ")
        );
        s += &format!("    MIIVs: {}\n", e.instruments.join(", "));
        let r2: Vec<String> = e
            .regressors
            .iter()
            .zip(&e.shea_r2)
            .map(|(r, v)| format!("{r} {v:.3}"))
            .collect();
        s += &format!("    Shea R²: {}\n", r2.join(", "));
    }
    let w = warnings(fit);
    if !w.is_empty() {
        s += "\n";
        for line in w {
            s += &format!("warning: {line}\n");
        }
    }
    s
}

fn group_section(g: pivsem::ParamGroup) -> u8 {
    use pivsem::ParamGroup::*;
    match g {
        LambdaC | LambdaO => 0,
        Beta => 1,
        Tau => 2,
        AlphaEta | AlphaYc | AlphaYo => 3,
        Zeta => 4,
        EpsC | EpsO => 5,
    }
}

pub fn moments(input: &MomentInput, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(&input.to_file())? + "\n",
        Format::Csv => {
            let mut s = String::from("variable");
            for n in &input.names {
                s += &format!(",{n}");
            }
            s += "\n";
            for (i, n) in input.names.iter().enumerate() {
                s += n;
                for j in 0..input.n_vars() {
                    s += &format!(",{}", input.sigma[(i, j)]);
                }
                s += "\n";
            }
            s
        }
        Format::Table => {
            let w = input
                .names
                .iter()
                .map(String::len)
                .max()
                .unwrap_or(4)
                .max(8)
                + 2;
            let mut s = format!(
                "N = {}\n\n{:<w$}{:>12}{:>12}  thresholds\n",
                input.n_obs, "variable", "kind", "mean"
            );
            for (j, n) in input.names.iter().enumerate() {
                let kind = match input.kinds[j] {
                    VariableKind::Ordinal => "ordinal",
                    VariableKind::Continuous => "continuous",
                };
                let t: Vec<String> = input.thresholds[j]
                    .iter()
                    .map(|t| format!("{t:.4}"))
                    .collect();
                s += &format!(
                    "{n:<w$}{kind:>12}{:>12.4}  {}\n",
                    input.means[j],
                    t.join(" ")
                );
            }
            s += "\nCovariance matrix\n";
            s += &format!("{:<w$}", "");
            for n in &input.names {
                s += &format!("{n:>w$}");
            }
            s += "\n";
            for (i, n) in input.names.iter().enumerate() {
                s += &format!("{n:<w$}");
                for j in 0..=i {
                    s += &format!("{:>w$.4}", input.sigma[(i, j)]);
                }
                s += "\n";
            }
            s
        }
    })
}

#[derive(Serialize)]
struct StudyJson<'a> {
    schema_version: u32,
    #[serde(flatten)]
    summary: &'a StudySummary,
}

pub fn study(summary: &StudySummary, format: Format) -> Result<String> {
    Ok(match format {
        Format::Table => summary.to_table(),
        Format::Csv => summary.to_csv(),
        Format::Json => {
            serde_json::to_string_pretty(&StudyJson {
                schema_version: SCHEMA_VERSION,
                summary,
            })? + "\n"
        }
    })
}

pub fn shea_csv(summary: &StudySummary) -> String {
    let mut s = String::from("parameterization,n,equation,mean,q10,median,q90\n");
    for r in &summary.shea {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            param_label(r.parameterization),
            r.n,
            r.equation,
            r.mean,
            r.q10,
            r.median,
            r.q90
        );
    }
    s
}
