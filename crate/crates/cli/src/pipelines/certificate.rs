use anisoflow::flow::{integrate_flow, uniform_times, FieldRegistry, FlowMap, SplitVectorField};
use anisoflow::grid::Region;
use anisoflow::stability::{certify_pair, BudgetSplit, Certificate, CertifyOptions};
use serde::Deserialize;

use super::{default_two, fmt, write};
use crate::config::typed;
use crate::error::RunError;
use crate::pipeline::{Check, Pipeline, PointContext};

pub const BUDGET_TOL: f64 = 1e-12;

/// Parameters shared by the certificate and stability pipelines.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairParams {
    pub field: String,
    #[serde(default)]
    pub field_params: toml::Table,
    pub field_bar: Option<String>,
    #[serde(default)]
    pub field_bar_params: toml::Table,
    #[serde(default = "default_density")]
    pub seed_density: usize,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_t1")]
    pub t1: f64,
    #[serde(default = "default_times")]
    pub times: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_one")]
    pub c_lambda: f64,
    #[serde(default = "default_ladder")]
    pub lambda_ladder: Vec<f64>,
    #[serde(default = "default_two")]
    pub p: f64,
    #[serde(default = "default_one")]
    pub delta2_max: f64,
    #[serde(default = "default_one")]
    pub growth_cap: f64,
    #[serde(default)]
    pub split: Option<BudgetSplit>,
    #[serde(default = "default_samples")]
    pub l1_samples: usize,
}

fn default_density() -> usize {
    24
}
fn default_t1() -> f64 {
    1.0
}
fn default_times() -> usize {
    11
}
fn default_dt() -> f64 {
    0.005
}
fn default_eta() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.1
}
fn default_r() -> f64 {
    1.0
}
fn default_one() -> f64 {
    1.0
}
fn default_ladder() -> Vec<f64> {
    (1..=7).map(f64::from).collect()
}
fn default_samples() -> usize {
    16_384
}

impl PairParams {
    pub fn fields(&self, ctx: &PointContext) -> Result<(SplitVectorField, SplitVectorField), RunError> {
        let reg = FieldRegistry::builtin();
        let b = reg.create(&self.field, &ctx.grid, &self.field_params)?;
        let bar_name = self.field_bar.as_deref().unwrap_or(&self.field);
        let bbar = reg.create(bar_name, &ctx.grid, &self.field_bar_params)?;
        Ok((b, bbar))
    }

    pub fn options(&self) -> CertifyOptions {
        CertifyOptions {
            eta: self.eta,
            gamma: self.gamma,
            r: self.r,
            c_lambda: self.c_lambda,
            lambda_ladder: self.lambda_ladder.clone(),
            p: self.p,
            split: self.split.unwrap_or_default(),
            delta2_max: self.delta2_max,
            growth_cap: self.growth_cap,
        }
    }

    pub fn check(&self, ctx: &PointContext) -> Result<(), RunError> {
        let (b, bbar) = self.fields(ctx)?;
        if !(self.t1 > self.t0) || self.times < 2 {
            return Err(RunError::Schema("need t1 > t0 and at least two recorded times".into()));
        }
        let cap = b.cfl_cap(self.t0, self.t1).min(bbar.cfl_cap(self.t0, self.t1));
        if self.dt > cap {
            return Err(RunError::Schema(format!("dt = {} exceeds the CFL cap {cap:.3e}", self.dt)));
        }
        self.options().split.validate()?;
        Ok(())
    }

    pub fn flows(&self, b: &SplitVectorField, bbar: &SplitVectorField, r: f64) -> Result<(FlowMap, FlowMap), RunError> {
        let ball = Region::centered_ball(b.dim(), r)?;
        let times = uniform_times(self.t0, self.t1, self.times);
        Ok((integrate_flow(b, &ball, self.seed_density, &times, self.dt)?, integrate_flow(bbar, &ball, self.seed_density, &times, self.dt)?))
    }
}

/// Budget checks and artifacts shared with the stability pipeline.
pub fn record(ctx: &PointContext, cert: &Certificate) -> Result<Vec<Check>, RunError> {
    write(ctx, "certificate.toml", &cert.to_toml_string()?)?;
    let again = cert.reevaluate();
    let mut csv = String::from("term,value\n");
    for (i, v) in cert.budget_terms.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 2, fmt(*v)));
    }
    write(ctx, "budget.csv", &csv)?;
    let sum: f64 = again.iter().sum();
    let same = again.iter().zip(&cert.budget_terms).all(|(a, b)| (a - b).abs() <= BUDGET_TOL * b.abs().max(1e-300));
    Ok(vec![
        Check::new("budget", sum <= cert.params.eta + BUDGET_TOL, format!("sum {sum:.6e} against eta {}", cert.params.eta)),
        Check::new("reevaluation", same, "stored terms match a fresh evaluation"),
    ])
}

pub struct CertificatePipeline;

impl Pipeline for CertificatePipeline {
    fn validate(&self, ctx: &PointContext) -> Result<(), RunError> {
        typed::<PairParams>(&ctx.params)?.check(ctx)
    }

    fn run(&self, ctx: &PointContext) -> Result<Vec<Check>, RunError> {
        let p: PairParams = typed(&ctx.params)?;
        let (b, bbar) = p.fields(ctx)?;
        let (x, xbar) = p.flows(&b, &bbar, p.r)?;
        let cert = certify_pair(&b, &bbar, &x, &xbar, &p.options())?;
        record(ctx, &cert)
    }
}
