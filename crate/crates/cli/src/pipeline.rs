use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anisoflow::grid::Grid;
use rayon::prelude::*;

use crate::config::Loaded;
use crate::error::RunError;
use crate::pipelines;

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "ANISOFLOW_WORKERS";

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

/// Everything a pipeline sees for one sweep point.
pub struct PointContext<'a> {
    pub index: usize,
    pub dir: PathBuf,
    pub grid: Grid,
    pub params: toml::Table,
    pub loaded: &'a Loaded,
    pub seed: u64,
    pub plots: bool,
}

impl PointContext<'_> {
    pub fn base(&self) -> &Path {
        &self.loaded.base
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

pub trait Pipeline: Send + Sync {
    /// Reject bad parameters without doing the work.
    fn validate(&self, ctx: &PointContext) -> Result<(), RunError>;
    fn run(&self, ctx: &PointContext) -> Result<Vec<Check>, RunError>;
}

pub struct PipelineRegistry {
    entries: BTreeMap<&'static str, (&'static str, Box<dyn Pipeline>)>,
}

impl PipelineRegistry {
    pub fn builtin() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        pipelines::register_all(&mut r);
        r
    }

    pub fn register(&mut self, name: &'static str, summary: &'static str, p: impl Pipeline + 'static) {
        self.entries.insert(name, (summary, Box::new(p)));
    }

    pub fn catalog(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|(k, e)| (*k, e.0)).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn Pipeline, RunError> {
        self.entries
            .get(name)
            .map(|e| e.1.as_ref())
            .ok_or_else(|| RunError::Schema(format!("unknown experiment kind `{name}`")))
    }
}

#[derive(Clone, Debug)]
pub struct Row {
    pub point: String,
    pub check: Check,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub kind: String,
    pub rows: Vec<Row>,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.check.passed)
    }

    pub fn failures(&self) -> Vec<&Row> {
        self.rows.iter().filter(|r| !r.check.passed).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pipeline,point,check,status,detail\n");
        for r in &self.rows {
            let status = if r.check.passed { "pass" } else { "fail" };
            let detail = r.check.detail.replace(['"', '\n'], " ");
            let _ = writeln!(s, "{},{},{},{status},\"{detail}\"", self.kind, r.point, r.check.name);
        }
        s
    }
}

pub fn worker_cap() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
}

fn point_name(i: usize) -> String {
    format!("point_{i:03}")
}

fn contexts<'a>(loaded: &'a Loaded, plots: bool) -> Result<Vec<PointContext<'a>>, RunError> {
    let grid = loaded.config.grid.build()?;
    let out = loaded.output_dir();
    Ok(loaded
        .points()?
        .into_iter()
        .enumerate()
        .map(|(index, params)| PointContext {
            index,
            dir: out.join(point_name(index)),
            grid: grid.clone(),
            params,
            loaded,
            seed: loaded.config.seed.wrapping_add(index as u64),
            plots,
        })
        .collect())
}

/// Schema-check a config and every sweep point.
pub fn validate(loaded: &Loaded) -> Result<usize, RunError> {
    let reg = PipelineRegistry::builtin();
    let p = reg.get(&loaded.config.kind)?;
    let ctxs = contexts(loaded, false)?;
    for c in &ctxs {
        p.validate(c).map_err(|e| RunError::Schema(format!("{}: {e}", point_name(c.index))))?;
    }
    Ok(ctxs.len())
}

/// Run every sweep point and write `summary.csv` in the output directory.
pub fn execute(loaded: &Loaded, plots: bool, workers: Option<usize>) -> Result<RunSummary, RunError> {
    validate(loaded)?;
    let reg = PipelineRegistry::builtin();
    let pipeline = reg.get(&loaded.config.kind)?;
    let ctxs = contexts(loaded, plots && loaded.config.plots)?;
    let out = loaded.output_dir();
    fs::create_dir_all(&out)?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| RunError::Runtime(e.to_string()))?;
    let results: Vec<Result<Vec<Check>, RunError>> = pool.install(|| {
        ctxs.par_iter()
            .map(|c| {
                fs::create_dir_all(&c.dir)?;
                fs::write(c.path("params.toml"), toml::to_string(&c.params).unwrap_or_default())?;
                match pipeline.run(c) {
                    Err(RunError::Runtime(m)) => Ok(vec![Check::new("error", false, m)]),
                    other => other,
                }
            })
            .collect()
    });

    let mut rows = Vec::new();
    for (c, r) in ctxs.iter().zip(results) {
        let checks = r.map_err(|e| RunError::Schema(format!("{}: {e}", point_name(c.index))))?;
        rows.extend(checks.into_iter().map(|check| Row { point: point_name(c.index), check }));
    }
    let summary = RunSummary { kind: loaded.config.kind.clone(), rows };
    fs::write(out.join("summary.csv"), summary.to_csv())?;
    Ok(summary)
}
