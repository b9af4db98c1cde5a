use anisoflow::maximal::{
    maximal_function_with, pointwise_domination_constant, smooth_maximal_with, BumpFamily, BumpRegistry, Ladder, SmoothInput,
};
use serde::Deserialize;

use super::{default_two, node_table, write};
use crate::config::typed;
use crate::error::RunError;
use crate::fixtures::{load_function, MeasureRegistry};
use crate::pipeline::{Check, Pipeline, PointContext};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    function: Option<String>,
    measure: Option<String>,
    #[serde(default)]
    measure_params: toml::Table,
    #[serde(default = "default_bump")]
    bump: String,
    #[serde(default = "default_two")]
    ladder_ratio: f64,
}

fn default_bump() -> String {
    "bump_std".into()
}

impl Params {
    fn parse(ctx: &PointContext) -> Result<(Self, BumpFamily, Ladder), RunError> {
        let p: Params = typed(&ctx.params)?;
        if p.function.is_some() == p.measure.is_some() {
            return Err(RunError::Schema("give exactly one of `function` and `measure`".into()));
        }
        let fam = BumpFamily::single(BumpRegistry::builtin().create(&p.bump, ctx.grid.dim())?)?;
        let g = &ctx.grid;
        let max = g.half_width().iter().cloned().fold(0.0, f64::max);
        let ladder = Ladder::geometric(g.min_spacing(), max, p.ladder_ratio)?;
        Ok((p, fam, ladder))
    }
}

pub struct MaximalPipeline;

impl Pipeline for MaximalPipeline {
    fn validate(&self, ctx: &PointContext) -> Result<(), RunError> {
        let (p, fam, _) = Params::parse(ctx)?;
        if p.measure.is_some() && !fam.smooth {
            return Err(RunError::Schema(format!("measure input needs a smooth bump, `{}` is not", p.bump)));
        }
        Ok(())
    }

    fn run(&self, ctx: &PointContext) -> Result<Vec<Check>, RunError> {
        let (p, fam, ladder) = Params::parse(ctx)?;
        let g = &ctx.grid;
        if let Some(spec) = &p.function {
            let u = load_function(spec, g, ctx.base())?;
            let m = maximal_function_with(&u, &ladder)?;
            let s = smooth_maximal_with(&fam, SmoothInput::Function(&u), &ladder)?;
            write(
                ctx,
                "maximal.csv",
                &node_table(g, &[("u", Some(&u), None), ("maximal", Some(&m), None), ("smooth", Some(&s.values), Some(&s.mask))]),
            )?;
            let c = pointwise_domination_constant(&fam);
            let mut worst: f64 = 0.0;
            let mut below = true;
            for i in 0..g.len() {
                below &= m.value(i) >= u.value(i).abs();
                if s.mask[i] && m.value(i) > 0.0 {
                    worst = worst.max(s.values.value(i) / m.value(i));
                }
            }
            Ok(vec![
                Check::new("maximal_dominates_input", below, "M u >= |u| at every node"),
                Check::new(
                    "smooth_domination",
                    worst <= c * (1.0 + 1e-9),
                    format!("max smooth / M = {worst:.6}, constant {c:.6}"),
                ),
            ])
        } else {
            let name = p.measure.as_deref().expect("checked in parse");
            let mu = MeasureRegistry::builtin().create(name, g, &p.measure_params)?;
            let s = smooth_maximal_with(&fam, SmoothInput::Measure(&mu, g), &ladder)?;
            write(ctx, "maximal.csv", &node_table(g, &[("smooth", Some(&s.values), Some(&s.mask))]))?;
            let finite = (0..g.len()).all(|i| !s.mask[i] || s.values.value(i).is_finite());
            Ok(vec![Check::new("finite", finite, format!("{} unmasked nodes", s.mask.iter().filter(|&&m| m).count()))])
        }
    }
}
