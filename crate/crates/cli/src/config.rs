//! Strict JSON run configuration.

use std::path::{Path, PathBuf};

use bls_core::instances::{
    make_coupled_scalar, make_diag_ridge, make_inverse_lqr, make_quadratic_toy, make_ridge,
    make_ridge_cross_entropy, make_scalar_cos,
};
use bls_core::{
    DiffConfig, GradcheckTolerances, HessianMode, LowerConfig, ProblemInstance, UpperConfig,
    UpperMethod,
};
use serde::Deserialize;

use crate::output::Format;
use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// starting / evaluation point; the instance default when absent
    pub p0: Option<Vec<f64>>,
    #[serde(default)]
    pub lower: LowerSection,
    #[serde(default)]
    pub upper: UpperSection,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub landscape: LandscapeSection,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Gd, Method::Newton]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        #[serde(default = "four")]
        m: usize,
        #[serde(default = "four")]
        n: usize,
    },
    ScalarCos {},
    CoupledScalar {},
    #[serde(alias = "RR")]
    Ridge {
        #[serde(default = "twenty")]
        features: usize,
        #[serde(default = "hundred")]
        samples: usize,
        #[serde(default)]
        loss: UpperLoss,
    },
    #[serde(alias = "diag")]
    DiagRidge {
        #[serde(default = "ten")]
        features: usize,
        #[serde(default = "hundred")]
        samples: usize,
        #[serde(default)]
        loss: UpperLoss,
    },
    InverseLqr {
        #[serde(default = "two")]
        state_dim: usize,
        #[serde(default = "one")]
        control_dim: usize,
        #[serde(default = "ten")]
        horizon: usize,
        u_lim: Option<f64>,
        alpha: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperLoss {
    #[default]
    Squared,
    CrossEntropy,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn four() -> usize {
    4
}
fn ten() -> usize {
    10
}
fn twenty() -> usize {
    20
}
fn hundred() -> usize {
    100
}

impl ProblemSpec {
    pub fn build(&self, seed: u64) -> bls_core::Result<ProblemInstance> {
        match *self {
            ProblemSpec::Quadratic { m, n } => make_quadratic_toy(m, n, seed),
            ProblemSpec::ScalarCos {} => Ok(make_scalar_cos()),
            ProblemSpec::CoupledScalar {} => Ok(make_coupled_scalar()),
            ProblemSpec::Ridge {
                features,
                samples,
                loss: UpperLoss::Squared,
            } => make_ridge(features, samples, seed),
            ProblemSpec::DiagRidge {
                features,
                samples,
                loss: UpperLoss::Squared,
            } => make_diag_ridge(features, samples, seed),
            ProblemSpec::Ridge {
                features,
                samples,
                loss: UpperLoss::CrossEntropy,
            } => make_ridge_cross_entropy(features, samples, seed, false),
            ProblemSpec::DiagRidge {
                features,
                samples,
                loss: UpperLoss::CrossEntropy,
            } => make_ridge_cross_entropy(features, samples, seed, true),
            ProblemSpec::InverseLqr {
                state_dim,
                control_dim,
                horizon,
                u_lim,
                alpha,
            } => make_inverse_lqr(state_dim, control_dim, horizon, u_lim, alpha, seed),
        }
    }

    /// Same barrier instance at another sharpness.
    pub fn build_with_alpha(&self, seed: u64, alpha: f64) -> bls_core::Result<ProblemInstance> {
        match *self {
            ProblemSpec::InverseLqr {
                state_dim,
                control_dim,
                horizon,
                u_lim,
                ..
            } => make_inverse_lqr(state_dim, control_dim, horizon, u_lim, Some(alpha), seed),
            _ => self.build(seed),
        }
    }

    pub fn is_constrained_lqr(&self) -> bool {
        matches!(self, ProblemSpec::InverseLqr { u_lim: Some(_), .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gd,
    Newton,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::Newton => "newton",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerSection {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

impl LowerSection {
    pub fn resolve(&self) -> LowerConfig {
        let mut cfg = LowerConfig::with_tol(self.tol.unwrap_or(1e-12));
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    General,
    PaperExact,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpperSection {
    pub step: Option<f64>,
    pub max_halvings: Option<usize>,
    pub lambda0: Option<f64>,
    pub armijo: Option<f64>,
    pub max_backtracks: Option<usize>,
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
    pub f_tol: Option<f64>,
    pub hessian_mode: Option<ModeName>,
}

impl UpperSection {
    pub fn resolve(&self, method: Method) -> UpperConfig {
        let mut cfg = match method {
            Method::Gd => UpperConfig::gradient_descent(),
            Method::Newton => UpperConfig::newton(),
        };
        debug_assert_eq!(cfg.method == UpperMethod::Newton, method == Method::Newton);
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(
            step,
            max_halvings,
            lambda0,
            armijo,
            max_backtracks,
            max_iter,
            grad_tol,
            f_tol
        );
        if let Some(m) = self.hessian_mode {
            cfg.hessian_mode = match m {
                ModeName::General => HessianMode::General,
                ModeName::PaperExact => HessianMode::PaperExact,
            };
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub first_step: Option<f64>,
    pub second_step: Option<f64>,
    pub jacobian_tol: Option<f64>,
    pub hessian_tol: Option<f64>,
    pub total_gradient_tol: Option<f64>,
    pub total_hessian_tol: Option<f64>,
}

impl GradcheckSection {
    pub fn diff(&self) -> Result<DiffConfig, CliError> {
        let d = DiffConfig::default();
        DiffConfig::new(
            self.first_step.unwrap_or(d.first_step),
            self.second_step.unwrap_or(d.second_step),
        )
        .map_err(|e| CliError::Config(format!("gradcheck: {e}")))
    }

    pub fn tolerances(&self) -> GradcheckTolerances {
        let d = GradcheckTolerances::default();
        GradcheckTolerances {
            jacobian: self.jacobian_tol.unwrap_or(d.jacobian),
            hessian: self.hessian_tol.unwrap_or(d.hessian),
            total_gradient: self.total_gradient_tol.unwrap_or(d.total_gradient),
            total_hessian: self.total_hessian_tol.unwrap_or(d.total_hessian),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_eps_max")]
    pub eps_max: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            deltas: default_deltas(),
            trials: default_trials(),
            eps_max: default_eps_max(),
        }
    }
}

fn default_deltas() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2]
}
fn default_trials() -> usize {
    20
}
fn default_eps_max() -> f64 {
    10.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_span")]
    pub span: f64,
    #[serde(default = "default_method")]
    pub method: Method,
    /// barrier sharpness values compared on one plane (constrained LQR only)
    #[serde(default)]
    pub alphas: Vec<f64>,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            count: default_count(),
            span: default_span(),
            method: default_method(),
            alphas: Vec::new(),
        }
    }
}

fn default_count() -> usize {
    11
}
fn default_span() -> f64 {
    1.5
}
fn default_method() -> Method {
    Method::Newton
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: &str| Err(CliError::Config(format!("key `{key}`: {why}")));
        if self.seeds.is_empty() {
            return bad("seeds", "must not be empty");
        }
        if self.methods.is_empty() {
            return bad("methods", "must not be empty");
        }
        if self.bounds.deltas.iter().any(|d| !(*d > 0.0)) {
            return bad("bounds.deltas", "entries must be positive");
        }
        if self.bounds.trials == 0 {
            return bad("bounds.trials", "must be positive");
        }
        if self.landscape.count < 2 {
            return bad("landscape.count", "must be at least 2");
        }
        if !(self.landscape.span > 0.0) {
            return bad("landscape.span", "must be positive");
        }
        if self.landscape.alphas.iter().any(|a| !(*a > 0.0)) {
            return bad("landscape.alphas", "entries must be positive");
        }
        if !self.landscape.alphas.is_empty() && !self.problem.is_constrained_lqr() {
            return bad(
                "landscape.alphas",
                "requires an inverse_lqr problem with u_lim",
            );
        }
        Ok(())
    }

    /// Instance for one seed with the configured starting point applied.
    pub fn instance(&self, seed: u64) -> Result<ProblemInstance, CliError> {
        let inst = self
            .problem
            .build(seed)
            .map_err(|e| CliError::Config(format!("key `problem`: {e}")))?;
        self.with_p0(inst)
    }

    pub fn with_p0(&self, mut inst: ProblemInstance) -> Result<ProblemInstance, CliError> {
        if let Some(p0) = &self.p0 {
            if p0.len() != inst.p0.len() {
                return Err(CliError::Config(format!(
                    "key `p0`: expected {} entries for {}, found {}",
                    inst.p0.len(),
                    inst.name,
                    p0.len()
                )));
            }
            inst.p0 = p0.clone();
        }
        Ok(inst)
    }
}
