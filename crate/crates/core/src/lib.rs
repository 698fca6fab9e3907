pub mod data;
pub mod error;
pub mod gauss;
pub mod layout;
pub mod modelir;
pub mod moments1;
pub mod patcalc;
pub mod pivfit;
pub mod reparam;
pub mod simlab;

pub use data::DataTable;
pub use error::{Error, Result};
pub use layout::{MomentLayout, StatKey};
pub use modelir::{
    build_system, find_miivs, parse_model, shea_r2, to_estimating_system, CoefRef, EquationKind,
    MiivEquation, ModelSpec, Parameterization, Slot, VarRef,
};
pub use moments1::{
    assemble_omega, assemble_omega_with, estimate_pairwise, estimate_univariate, AcovMethod,
    PairEstimate, PairKind, Stage1Options, StageOneStats, Univariate, VariableKind, VariableMeta,
};
pub use pivfit::{
    anchor_spec, apply_anchors, fit_data, fit_moments, fit_theta1, fit_theta2, implied_moments,
    infer_metas, model_anchors, parameterize, stage1_for, vcov_theta1, vcov_theta2, EquationReport,
    FitOptions, FitResult, ModelParams, MomentFile, MomentInput, ParamEstimate, ParamGroup, Weight,
};
pub use reparam::{
    compute_q, reparam_jacobian, transform_moments, var_pi, Anchor, ReparamSpec, ReparamStats,
};
pub use simlab::{paper_design, run_study, Design, NpdPolicy, StudyConfig, StudySummary};
