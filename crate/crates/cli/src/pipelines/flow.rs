use std::fs::File;
use std::io::BufWriter;

use anisoflow::flow::{compressibility, integrate_flow, superlevel_decay, uniform_times, FieldRegistry, SplitVectorField};
use anisoflow::grid::Region;
use serde::Deserialize;

use super::{default_true, fmt, write};
use crate::config::typed;
use crate::error::RunError;
use crate::pipeline::{Check, Pipeline, PointContext};
use crate::plot::{line_chart, Series};

/// Builtin fields whose flows preserve Lebesgue measure.
const DIVERGENCE_FREE: [&str; 5] = ["rotation", "shear", "sin_cos", "vlasov", "zero"];

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    field: String,
    #[serde(default)]
    field_params: toml::Table,
    #[serde(default = "default_radius")]
    seed_radius: f64,
    #[serde(default = "default_density")]
    seed_density: usize,
    #[serde(default)]
    t0: f64,
    #[serde(default = "default_t1")]
    t1: f64,
    #[serde(default = "default_times")]
    times: usize,
    #[serde(default = "default_dt")]
    dt: f64,
    lambda_ladder: Option<Vec<f64>>,
    compressibility_band: Option<[f64; 2]>,
    #[serde(default = "default_true")]
    write_trajectories: bool,
}

fn default_radius() -> f64 {
    1.0
}
fn default_density() -> usize {
    32
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

fn field(ctx: &PointContext, p: &Params) -> Result<SplitVectorField, RunError> {
    Ok(FieldRegistry::builtin().create(&p.field, &ctx.grid, &p.field_params)?)
}

pub struct FlowPipeline;

impl Pipeline for FlowPipeline {
    fn validate(&self, ctx: &PointContext) -> Result<(), RunError> {
        let p: Params = typed(&ctx.params)?;
        let b = field(ctx, &p)?;
        if !(p.t1 > p.t0) || p.times < 2 {
            return Err(RunError::Schema("need t1 > t0 and at least two recorded times".into()));
        }
        let cap = b.cfl_cap(p.t0, p.t1);
        if p.dt > cap {
            return Err(RunError::Schema(format!("dt = {} exceeds the CFL cap {cap:.3e}", p.dt)));
        }
        Ok(())
    }

    fn run(&self, ctx: &PointContext) -> Result<Vec<Check>, RunError> {
        let p: Params = typed(&ctx.params)?;
        let b = field(ctx, &p)?;
        let region = Region::centered_ball(ctx.grid.dim(), p.seed_radius)?;
        let fm = integrate_flow(&b, &region, p.seed_density, &uniform_times(p.t0, p.t1, p.times), p.dt)?;
        if p.write_trajectories {
            let mut w = BufWriter::new(File::create(ctx.path("trajectories.csv"))?);
            fm.write_csv(&mut w)?;
        }
        let l = compressibility(&fm, &region)?;
        let escaped = fm.escaped.iter().filter(|e| e.is_some()).count();
        write(ctx, "flow.csv", &format!("field,seeds,escaped,compressibility\n{},{},{escaped},{}\n", p.field, fm.len(), fmt(l)))?;

        let max_half = ctx.grid.half_width().iter().cloned().fold(0.0, f64::max);
        let ladder = p.lambda_ladder.clone().unwrap_or_else(|| {
            (0..8).map(|k| p.seed_radius + (max_half - p.seed_radius).max(0.0) * k as f64 / 7.0).collect()
        });
        let curve = superlevel_decay(&fm, p.seed_radius, &ladder)?;
        let mut csv = String::from("lambda,measure\n");
        for (lam, m) in &curve.points {
            csv.push_str(&format!("{},{}\n", fmt(*lam), fmt(*m)));
        }
        write(ctx, "decay.csv", &csv)?;
        if ctx.plots {
            line_chart(&ctx.path("decay.svg"), "|B_r \\ G_lambda|", "lambda", &[Series::new(&p.field, curve.points.clone())])?;
        }

        let mut checks = vec![Check::new("decay_monotone", curve.monotone, format!("{} ladder values", ladder.len()))];
        let band = p.compressibility_band.or_else(|| DIVERGENCE_FREE.contains(&p.field.as_str()).then_some([0.95, 1.05]));
        if let Some([lo, hi]) = band {
            checks.push(Check::new("compressibility", (lo..=hi).contains(&l), format!("{l:.4} in [{lo}, {hi}]")));
        }
        Ok(checks)
    }
}
