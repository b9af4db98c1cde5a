use anisoflow::diffquot::{big_u, sin_cos_fixture, verify_difference_quotient, AnisotropyMatrix, DerivativeStructure};
use anisoflow::grid::GridFunction;
use anisoflow::io::write_csv;
use anisoflow::singular::KernelRegistry;
use serde::Deserialize;

use super::{fmt, write};
use crate::config::typed;
use crate::error::RunError;
use crate::fixtures::load_function;
use crate::pipeline::{Check, Pipeline, PointContext};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    #[serde(default = "default_structure")]
    structure: String,
    function: Option<String>,
    #[serde(default = "one")]
    delta1: f64,
    #[serde(default = "one")]
    delta2: f64,
    #[serde(default = "default_pairs")]
    pairs: usize,
    #[serde(default = "default_dirs")]
    direction_samples: usize,
    #[serde(default = "default_sep")]
    separation_cells: f64,
    #[serde(default = "default_rate")]
    pass_rate: f64,
    #[serde(default)]
    write_u: bool,
}

fn default_structure() -> String {
    "fixture:sin_cos".into()
}
fn one() -> f64 {
    1.0
}
fn default_pairs() -> usize {
    10_000
}
fn default_dirs() -> usize {
    64
}
fn default_sep() -> f64 {
    2.0
}
fn default_rate() -> f64 {
    0.99
}

fn inputs(ctx: &PointContext, p: &Params) -> Result<(GridFunction, DerivativeStructure), RunError> {
    match p.structure.as_str() {
        "fixture:sin_cos" => {
            let (f, ds) = sin_cos_fixture(ctx.grid.points()[0])?;
            if ds.grid != ctx.grid {
                return Err(RunError::Schema("the sin_cos fixture needs a square grid of half-width pi split 1 + 1".into()));
            }
            Ok((f, ds))
        }
        "manifest" => {
            let path = ctx.loaded.manifest("structure").ok_or_else(|| RunError::Schema("manifests.structure is required".into()))?;
            let ds = DerivativeStructure::load(&path, &ctx.grid, &KernelRegistry::builtin())?;
            let spec = p.function.as_deref().ok_or_else(|| RunError::Schema("a manifest structure needs `function`".into()))?;
            Ok((load_function(spec, &ctx.grid, ctx.base())?, ds))
        }
        other => Err(RunError::Schema(format!("structure must be `fixture:sin_cos` or `manifest`, not `{other}`"))),
    }
}

pub struct DiffQuotPipeline;

impl Pipeline for DiffQuotPipeline {
    fn validate(&self, ctx: &PointContext) -> Result<(), RunError> {
        let p: Params = typed(&ctx.params)?;
        AnisotropyMatrix::new(p.delta1, p.delta2, ctx.grid.n1(), ctx.grid.n2())?;
        if p.structure == "manifest" && ctx.loaded.manifest("structure").is_none() {
            return Err(RunError::Schema("manifests.structure is required".into()));
        }
        Ok(())
    }

    fn run(&self, ctx: &PointContext) -> Result<Vec<Check>, RunError> {
        let p: Params = typed(&ctx.params)?;
        let (f, ds) = inputs(ctx, &p)?;
        let a = AnisotropyMatrix::new(p.delta1, p.delta2, ctx.grid.n1(), ctx.grid.n2())?;
        let u = big_u(&ds, &a, p.direction_samples)?;
        let sep = p.separation_cells * ctx.grid.max_spacing();
        let r = verify_difference_quotient(&f, &u, p.pairs, sep, ctx.seed)?;
        let mut csv = String::from("delta1,delta2,pairs,pass_rate,worst_ratio,tolerance\n");
        csv.push_str(&format!("{},{},{},{},{},{}\n", p.delta1, p.delta2, r.pairs, fmt(r.pass_rate), fmt(r.worst_ratio), r.tolerance));
        write(ctx, "diffquot.csv", &csv)?;
        if p.write_u {
            write_csv(&u.values, &ctx.path("u.csv"))?;
        }
        Ok(vec![Check::new(
            "difference_quotient",
            r.pass_rate >= p.pass_rate,
            format!("pass rate {:.4} over {} pairs, worst ratio {:.4}", r.pass_rate, r.pairs, r.worst_ratio),
        )])
    }
}
