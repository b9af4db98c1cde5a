use anisoflow::grid::lebesgue_norm;
use anisoflow::weak_lebesgue::{verify_interpolation, weak_norm, WeakNormReport};
use serde::Deserialize;

use super::{default_two, fmt, write, RegionSpec};
use crate::config::typed;
use crate::error::RunError;
use crate::fixtures::load_function;
use crate::pipeline::{Check, Pipeline, PointContext};
use crate::plot::{line_chart, Series};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    function: String,
    #[serde(default = "default_two")]
    p: f64,
    #[serde(default)]
    region: RegionSpec,
    expected_l1: Option<f64>,
    #[serde(default = "default_rel")]
    rel_tol: f64,
}

fn default_rel() -> f64 {
    0.02
}

pub struct NormsPipeline;

impl Pipeline for NormsPipeline {
    fn validate(&self, ctx: &PointContext) -> Result<(), RunError> {
        let p: Params = typed(&ctx.params)?;
        p.region.build(ctx.grid.dim())?.validate(&ctx.grid)?;
        if !(p.p >= 1.0) {
            return Err(RunError::Schema(format!("p = {} must be at least 1", p.p)));
        }
        Ok(())
    }

    fn run(&self, ctx: &PointContext) -> Result<Vec<Check>, RunError> {
        let p: Params = typed(&ctx.params)?;
        let u = load_function(&p.function, &ctx.grid, ctx.base())?;
        let region = p.region.build(ctx.grid.dim())?;
        let r = verify_interpolation(&u, p.p, &region)?;
        let l1 = lebesgue_norm(&u, 1.0, &region)?;
        let lp = lebesgue_norm(&u, p.p, &region)?;
        let weak1 = weak_norm(&u, 1.0, &region)?;

        let mut csv = String::from("p,l1,lp,weak1,m1,mp,region_measure,lhs,rhs,clamped,holds\n");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            p.p,
            fmt(l1),
            fmt(lp),
            fmt(weak1.value),
            fmt(r.m1),
            fmt(r.mp),
            fmt(r.region_measure),
            fmt(r.lhs),
            fmt(r.rhs),
            r.clamped,
            r.holds
        ));
        write(ctx, "norms.csv", &csv)?;
        write(ctx, "weak.csv", &format!("{}\n{}\n", WeakNormReport::csv_header(), weak1.csv_row()))?;
        let mut dist = String::from("lambda,measure\n");
        for (l, m) in &weak1.distribution_samples {
            dist.push_str(&format!("{},{}\n", fmt(*l), fmt(*m)));
        }
        write(ctx, "distribution.csv", &dist)?;
        if ctx.plots {
            let pts = weak1.distribution_samples.iter().map(|&(l, m)| (l, l * m)).collect();
            line_chart(&ctx.path("distribution.svg"), "lambda |{|u| > lambda}|", "lambda", &[Series::new("weak 1", pts)])?;
        }

        let mut checks = vec![
            Check::new("interpolation", r.holds, format!("lhs {:.6} rhs {:.6}", r.lhs, r.rhs)),
            Check::new("chebyshev", weak1.value <= l1 * (1.0 + 1e-12), format!("weak {:.6} L1 {:.6}", weak1.value, l1)),
        ];
        if let Some(e) = p.expected_l1 {
            let ok = (r.lhs - e).abs() <= p.rel_tol * e && (r.rhs - e).abs() <= p.rel_tol * e;
            checks.push(Check::new("expected_l1", ok, format!("expected {e}, lhs {:.6}, rhs {:.6}", r.lhs, r.rhs)));
        }
        Ok(checks)
    }
}
