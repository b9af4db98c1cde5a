use std::fs::File;
use std::io::BufWriter;

use anisoflow::stability::{certify_pair, stability_report, Certificate};

use super::certificate::{record, PairParams};
use crate::config::typed;
use crate::error::RunError;
use crate::pipeline::{Check, Pipeline, PointContext};
use crate::plot::{line_chart, Series};

fn stored(ctx: &PointContext) -> Result<Option<Certificate>, RunError> {
    let Some(path) = ctx.loaded.manifest("certificate") else { return Ok(None) };
    let text = std::fs::read_to_string(&path)?;
    Ok(Some(Certificate::from_toml_str(&text)?))
}

pub struct StabilityPipeline;

impl Pipeline for StabilityPipeline {
    fn validate(&self, ctx: &PointContext) -> Result<(), RunError> {
        typed::<PairParams>(&ctx.params)?.check(ctx)?;
        stored(ctx).map(|_| ())
    }

    fn run(&self, ctx: &PointContext) -> Result<Vec<Check>, RunError> {
        let p: PairParams = typed(&ctx.params)?;
        let (b, bbar) = p.fields(ctx)?;
        let cert = stored(ctx)?;
        let r = cert.as_ref().map_or(p.r, |c| c.params.r);
        let (x, xbar) = p.flows(&b, &bbar, r)?;
        let cert = match cert {
            Some(c) => c,
            None => certify_pair(&b, &bbar, &x, &xbar, &p.options())?,
        };
        let mut checks = record(ctx, &cert)?;
        let rep = stability_report(&b, &bbar, &x, &xbar, &cert, p.l1_samples)?;
        let mut w = BufWriter::new(File::create(ctx.path("report.csv"))?);
        rep.write_csv(&mut w)?;
        drop(w);
        if ctx.plots {
            let series = |v: &[f64]| rep.times.iter().copied().zip(v.iter().copied()).collect();
            let mut s = vec![Series::new("phi", series(&rep.phi)), Series::new("superlevel", series(&rep.superlevel))];
            if rep.rhs.is_finite() {
                s.push(Series::new("rhs", series(&vec![rep.rhs; rep.times.len()])));
            }
            line_chart(&ctx.path("report.svg"), "stability", "time", &s)?;
        }
        let worst = rep.superlevel.iter().cloned().fold(0.0, f64::max);
        checks.push(Check::new("stability", rep.holds, format!("max superlevel {worst:.4e}, rhs {:.4e}, L1 {:.4e}", rep.rhs, rep.l1_difference)));
        checks.push(Check::new("phi_lower_bound", rep.lower_bound_holds, format!("{} recorded times", rep.times.len())));
        Ok(checks)
    }
}
