use anisoflow::grid::{lebesgue_norm, Region};
use anisoflow::singular::{apply, apply_to_measure, validate_kernel, Kernel};
use serde::Deserialize;

use super::{fmt, node_table, write};
use crate::config::typed;
use crate::error::RunError;
use crate::fixtures::{load_function, load_kernel, MeasureRegistry};
use crate::pipeline::{Check, Pipeline, PointContext};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    kernel: String,
    function: Option<String>,
    measure: Option<String>,
    #[serde(default)]
    measure_params: toml::Table,
    #[serde(default = "default_cloud")]
    cloud: usize,
}

fn default_cloud() -> usize {
    1000
}

impl Params {
    fn parse(ctx: &PointContext) -> Result<(Self, Kernel), RunError> {
        let p: Params = typed(&ctx.params)?;
        if p.function.is_some() == p.measure.is_some() {
            return Err(RunError::Schema("give exactly one of `function` and `measure`".into()));
        }
        let k = load_kernel(&p.kernel, ctx.grid.dim(), ctx.base())?;
        if k.dim() != ctx.grid.dim() {
            return Err(RunError::Schema(format!("kernel `{}` acts in dimension {}", p.kernel, k.dim())));
        }
        Ok((p, k))
    }
}

pub struct SingIntPipeline;

impl Pipeline for SingIntPipeline {
    fn validate(&self, ctx: &PointContext) -> Result<(), RunError> {
        Params::parse(ctx).map(|_| ())
    }

    fn run(&self, ctx: &PointContext) -> Result<Vec<Check>, RunError> {
        let (p, k) = Params::parse(ctx)?;
        let g = &ctx.grid;
        let mut checks = Vec::new();

        if k.pointwise() {
            let v = validate_kernel(k.as_ref(), p.cloud);
            let mut csv = String::from("kernel,c0_meas,c1_meas,a1_meas,multiplier_sup_meas,valid\n");
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                k.name(),
                fmt(v.c0_meas),
                fmt(v.c1_meas),
                fmt(v.a1_meas),
                fmt(v.multiplier_sup_meas),
                v.valid
            ));
            write(ctx, "kernel.csv", &csv)?;
            let detail = if v.valid { "measured constants within the declared ones".to_string() } else { v.failures.join("; ") };
            checks.push(Check::new("kernel_constants", v.valid, detail));
        }

        if let Some(spec) = &p.function {
            let u = load_function(spec, g, ctx.base())?;
            let ku = apply(k.as_ref(), &u)?;
            write(ctx, "singint.csv", &node_table(g, &[("input", Some(&u), None), ("output", Some(&ku), None)]))?;
            let (nu, nk) = (lebesgue_norm(&u, 2.0, &Region::Full)?, lebesgue_norm(&ku, 2.0, &Region::Full)?);
            let sup = k.constants().multiplier_sup.max(k.multiplier_at_zero().norm());
            checks.push(Check::new("l2_bound", nk <= sup * nu * (1.0 + 1e-9), format!("||Ku|| {nk:.6}, sup |m| ||u|| {:.6}", sup * nu)));
        } else {
            let name = p.measure.as_deref().expect("checked in parse");
            let mu = MeasureRegistry::builtin().create(name, g, &p.measure_params)?;
            let r = apply_to_measure(k.as_ref(), &mu, g)?;
            write(ctx, "singint.csv", &node_table(g, &[("output", Some(&r.values), Some(&r.mask))]))?;
            let finite = (0..g.len()).all(|i| !r.mask[i] || r.values.value(i).is_finite());
            checks.push(Check::new("finite", finite, format!("atom on a node: {}", r.atom_on_node)));
        }
        Ok(checks)
    }
}
