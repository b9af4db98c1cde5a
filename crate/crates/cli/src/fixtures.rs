//! Named inputs addressable from configs, and the combined catalog.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anisoflow::flow::FieldRegistry;
use anisoflow::grid::{Grid, GridFunction};
use anisoflow::io::{read_grid_function, sample_expression};
use anisoflow::maximal::BumpRegistry;
use anisoflow::singular::{Kernel, KernelRegistry, SignedMeasure, TableKernel};

use crate::error::RunError;
use crate::pipeline::PipelineRegistry;

type MeasureFactory = Box<dyn Fn(&Grid, &toml::Table) -> Result<SignedMeasure, RunError> + Send + Sync>;
type FunctionFactory = Box<dyn Fn(&Grid) -> Result<GridFunction, RunError> + Send + Sync>;

fn num(t: &toml::Table, key: &str, default: f64) -> Result<f64, RunError> {
    match t.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_float()
            .or_else(|| v.as_integer().map(|i| i as f64))
            .ok_or_else(|| RunError::Schema(format!("`{key}` must be a number"))),
    }
}

fn nums(t: &toml::Table, key: &str) -> Result<Option<Vec<f64>>, RunError> {
    let Some(v) = t.get(key) else { return Ok(None) };
    let arr = v.as_array().ok_or_else(|| RunError::Schema(format!("`{key}` must be an array")))?;
    arr.iter()
        .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
        .collect::<Option<Vec<f64>>>()
        .map(Some)
        .ok_or_else(|| RunError::Schema(format!("`{key}` must hold numbers")))
}

/// Finite signed measures on a grid.
pub struct MeasureRegistry {
    entries: BTreeMap<String, (&'static str, MeasureFactory)>,
}

impl MeasureRegistry {
    pub fn builtin() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register("dirac", "point mass `weight` at `location`", |g, p| {
            let loc = nums(p, "location")?.unwrap_or_else(|| vec![0.0; g.dim()]);
            Ok(SignedMeasure::from_atoms(g.dim(), vec![(loc, num(p, "weight", 1.0)?)])?)
        });
        r.register("atoms", "flat list `atoms` of coordinates followed by a weight", |g, p| {
            let d = g.dim();
            let flat = nums(p, "atoms")?.unwrap_or_default();
            if flat.is_empty() || flat.len() % (d + 1) != 0 {
                return Err(RunError::Schema(format!("atoms must be a nonempty flat list of {d} coordinates and a weight")));
            }
            Ok(SignedMeasure::from_atoms(d, flat.chunks(d + 1).map(|c| (c[..d].to_vec(), c[d])).collect())?)
        });
        r.register("gaussian", "density of total mass `mass` and width `width`", |g, p| {
            let (m, w) = (num(p, "mass", 1.0)?, num(p, "width", 0.5)?);
            let norm = m / (std::f64::consts::PI * w * w).powf(g.dim() as f64 / 2.0);
            let u = GridFunction::sample(g, |x| norm * (-x.iter().map(|v| v * v).sum::<f64>() / (w * w)).exp())?;
            Ok(SignedMeasure::from_density(u)?)
        });
        r.register("indicator", "density equal to 1 on the centered ball of radius `radius`", |g, p| {
            let rad = num(p, "radius", 1.0)?;
            let u = GridFunction::sample(g, |x| if x.iter().map(|v| v * v).sum::<f64>() <= rad * rad { 1.0 } else { 0.0 })?;
            Ok(SignedMeasure::from_density(u)?)
        });
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        summary: &'static str,
        f: impl Fn(&Grid, &toml::Table) -> Result<SignedMeasure, RunError> + Send + Sync + 'static,
    ) {
        self.entries.insert(name.into(), (summary, Box::new(f)));
    }

    pub fn catalog(&self) -> Vec<(String, &'static str)> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.0)).collect()
    }

    pub fn create(&self, name: &str, grid: &Grid, params: &toml::Table) -> Result<SignedMeasure, RunError> {
        let (_, f) = self.entries.get(name).ok_or_else(|| RunError::Schema(format!("unknown measure `{name}`")))?;
        f(grid, params)
    }
}

/// Sample functions that expressions cannot describe.
pub struct FunctionRegistry {
    entries: BTreeMap<String, (&'static str, FunctionFactory)>,
}

impl FunctionRegistry {
    pub fn builtin() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register("inv_sqrt", "x^(-1/2) on (0, 1), zero elsewhere", |g| {
            if g.dim() != 1 {
                return Err(RunError::Schema("inv_sqrt is one-dimensional".into()));
            }
            Ok(GridFunction::sample_clamped(g, &[0.0], |x| if x[0] > 0.0 && x[0] < 1.0 { x[0].powf(-0.5) } else { 0.0 })?)
        });
        r.register("indicator_interval", "1 on [-1, 1]", |g| {
            Ok(GridFunction::sample(g, |x| if x.iter().all(|v| v.abs() <= 1.0) { 1.0 } else { 0.0 })?)
        });
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        summary: &'static str,
        f: impl Fn(&Grid) -> Result<GridFunction, RunError> + Send + Sync + 'static,
    ) {
        self.entries.insert(name.into(), (summary, Box::new(f)));
    }

    pub fn catalog(&self) -> Vec<(String, &'static str)> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.0)).collect()
    }

    pub fn create(&self, name: &str, grid: &Grid) -> Result<GridFunction, RunError> {
        let (_, f) = self.entries.get(name).ok_or_else(|| RunError::Schema(format!("unknown function fixture `{name}`")))?;
        f(grid)
    }
}

/// `fixture:<name>`, `file:<path>` relative to `base`, or a formula in
/// `x1..xN`.
pub fn load_function(spec: &str, grid: &Grid, base: &Path) -> Result<GridFunction, RunError> {
    if let Some(name) = spec.strip_prefix("fixture:") {
        return FunctionRegistry::builtin().create(name.trim(), grid);
    }
    if let Some(p) = spec.strip_prefix("file:") {
        let u = read_grid_function(&base.join(p.trim()))?;
        if u.grid() != grid {
            return Err(RunError::Schema(format!("{p} is not sampled on the configured grid")));
        }
        return Ok(u);
    }
    Ok(sample_expression(spec, grid, 0)?)
}

/// A registry name, or `table:<path>` for a tabulated radial multiplier.
pub fn load_kernel(spec: &str, dim: usize, base: &Path) -> Result<Kernel, RunError> {
    if let Some(p) = spec.strip_prefix("table:") {
        return Ok(Arc::new(TableKernel::load(&base.join(p.trim()))?));
    }
    Ok(KernelRegistry::builtin().create(spec, dim)?)
}

/// Every named fixture as `(section, name, summary)`, sorted.
pub fn catalog() -> Vec<(&'static str, String, &'static str)> {
    let mut out = Vec::new();
    out.extend(BumpRegistry::builtin().catalog().into_iter().map(|(n, s)| ("bump", n, s)));
    out.extend(FieldRegistry::builtin().catalog().into_iter().map(|(n, s)| ("field", n, s)));
    out.extend(FunctionRegistry::builtin().catalog().into_iter().map(|(n, s)| ("function", n, s)));
    out.extend(KernelRegistry::builtin().catalog().into_iter().map(|(n, s)| ("kernel", n, s)));
    out.push(("kernel", "table".to_string(), "radial multiplier table loaded from `table:<path>`"));
    out.extend(MeasureRegistry::builtin().catalog().into_iter().map(|(n, s)| ("measure", n, s)));
    out.extend(PipelineRegistry::builtin().catalog().into_iter().map(|(n, s)| ("pipeline", n.to_string(), s)));
    out.sort();
    out
}
