//! The experiment kinds.

use std::fmt::Write as _;
use std::fs;

use anisoflow::grid::{Grid, GridFunction, Region};
use serde::Deserialize;

use crate::error::RunError;
use crate::pipeline::{PipelineRegistry, PointContext};

mod certificate;
mod diffquot;
mod flow;
mod maximal;
mod norms;
mod singint;
mod stability;

pub fn register_all(r: &mut PipelineRegistry) {
    r.register("certificate", "select stability parameters for a pair of fields", certificate::CertificatePipeline);
    r.register("diffquot", "check difference quotients against the U bound", diffquot::DiffQuotPipeline);
    r.register("flow", "integrate a field, report compressibility and sublevel decay", flow::FlowPipeline);
    r.register("maximal", "classical and smooth maximal functions", maximal::MaximalPipeline);
    r.register("norms", "Lebesgue and weak norms with the interpolation bound", norms::NormsPipeline);
    r.register("singint", "apply a singular kernel to a function or measure", singint::SingIntPipeline);
    r.register("stability", "compare two flows against a certified bound", stability::StabilityPipeline);
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(untagged)]
pub enum RegionSpec {
    #[default]
    Full,
    Named(String),
    Ball {
        radius: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

impl RegionSpec {
    pub fn build(&self, dim: usize) -> Result<Region, RunError> {
        Ok(match self {
            RegionSpec::Full => Region::Full,
            RegionSpec::Named(s) if s == "full" => Region::Full,
            RegionSpec::Named(s) => return Err(RunError::Schema(format!("unknown region `{s}`"))),
            RegionSpec::Ball { radius, center } => Region::ball(center.clone().unwrap_or_else(|| vec![0.0; dim]), *radius)?,
            RegionSpec::Box { lo, hi } => Region::open_box(lo.clone(), hi.clone())?,
        })
    }
}

pub fn write(ctx: &PointContext, file: &str, body: &str) -> Result<(), RunError> {
    fs::write(ctx.path(file), body)?;
    Ok(())
}

pub fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

/// Node table with one column per named field; masked nodes get an empty
/// cell in the masked columns.
pub fn node_table(grid: &Grid, columns: &[(&str, Option<&GridFunction>, Option<&[bool]>)]) -> String {
    let mut s = String::new();
    let coords: Vec<String> = (1..=grid.dim()).map(|a| format!("x{a}")).collect();
    let names: Vec<&str> = columns.iter().filter(|c| c.1.is_some()).map(|c| c.0).collect();
    let _ = writeln!(s, "{},{}", coords.join(","), names.join(","));
    let mut x = vec![0.0; grid.dim()];
    for i in 0..grid.len() {
        grid.node(i, &mut x);
        let mut row: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
        for (_, f, m) in columns {
            let Some(f) = f else { continue };
            row.push(if m.is_some_and(|m| !m[i]) { String::new() } else { fmt(f.value(i)) });
        }
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn default_two() -> f64 {
    2.0
}

pub fn default_true() -> bool {
    true
}
