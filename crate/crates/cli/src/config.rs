use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anisoflow::grid::Grid;
use serde::Deserialize;

use crate::error::RunError;

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn expand(&self, dim: usize) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone(); dim],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n1: usize,
    #[serde(default)]
    pub n2: usize,
    pub half_width: OneOrMany<f64>,
    pub points: OneOrMany<usize>,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid, RunError> {
        let d = self.n1 + self.n2;
        let hw = self.half_width.expand(d);
        let pts = self.points.expand(d);
        if hw.len() != d || pts.len() != d {
            return Err(RunError::Schema(format!("grid needs {d} half-widths and point counts")));
        }
        Ok(Grid::new(self.n1, hw, pts)?)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: String,
    pub grid: GridSpec,
    #[serde(default)]
    pub manifests: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub params: toml::Table,
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub plots: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

/// A loaded config with paths resolved against its directory.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn from_path(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Schema(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, base)
    }

    pub fn from_str(text: &str, base: PathBuf) -> Result<Self, RunError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| RunError::Schema(e.to_string()))?;
        let loaded = Self { config, base };
        loaded.check()?;
        Ok(loaded)
    }

    fn check(&self) -> Result<(), RunError> {
        for (name, p) in &self.config.manifests {
            if !self.base.join(p).exists() {
                return Err(RunError::Schema(format!("manifest `{name}` not found at {}", p.display())));
            }
        }
        if let Some((k, _)) = self.config.sweep.iter().find(|(_, v)| v.is_empty()) {
            return Err(RunError::Schema(format!("sweep `{k}` has no values")));
        }
        self.config.grid.build()?;
        Ok(())
    }

    pub fn manifest(&self, name: &str) -> Option<PathBuf> {
        self.config.manifests.get(name).map(|p| self.base.join(p))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base.join(&self.config.output)
    }

    /// Parameter tables of every sweep point, in lexicographic order of the
    /// sweep keys with the last key varying fastest.
    pub fn points(&self) -> Result<Vec<toml::Table>, RunError> {
        let keys: Vec<&String> = self.config.sweep.keys().collect();
        let sizes: Vec<usize> = keys.iter().map(|k| self.config.sweep[*k].len()).collect();
        let total: usize = sizes.iter().product();
        let mut out = Vec::with_capacity(total);
        for mut idx in 0..total {
            let mut t = self.config.params.clone();
            let mut choice = vec![0; keys.len()];
            for (c, &s) in choice.iter_mut().zip(&sizes).rev() {
                *c = idx % s;
                idx /= s;
            }
            for (k, &c) in keys.iter().zip(&choice) {
                set_dotted(&mut t, k, self.config.sweep[*k][c].clone())?;
            }
            out.push(t);
        }
        Ok(out)
    }
}

/// `a.b.c = v`, creating intermediate tables.
fn set_dotted(t: &mut toml::Table, key: &str, v: toml::Value) -> Result<(), RunError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields a part");
    let mut cur = t;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| RunError::Schema(format!("sweep key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), v);
    Ok(())
}

/// Deserialize a parameter table into a typed struct.
pub fn typed<T: serde::de::DeserializeOwned>(t: &toml::Table) -> Result<T, RunError> {
    toml::Value::Table(t.clone()).try_into().map_err(|e: toml::de::Error| RunError::Schema(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_expands_in_order() {
        let text = r#"
kind = "flow"
grid = { n1 = 1, n2 = 1, half_width = 4.0, points = 32 }
params = { field = "rotation" }
[sweep]
"field_params.omega" = [1.0, 2.0]
dt = [0.01, 0.005, 0.001]
"#;
        let l = Loaded::from_str(text, PathBuf::new()).unwrap();
        let pts = l.points().unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[2]["dt"].as_float(), Some(0.005));
        assert_eq!(pts[1]["field_params"]["omega"].as_float(), Some(2.0));
        assert_eq!(pts[1]["dt"].as_float(), Some(0.01));
        assert_eq!(pts[0]["field"].as_str(), Some("rotation"));
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let text = "kind = \"norms\"\ngrid = { n1 = 1, half_width = 1.0, points = 8 }\nsweep = { p = [] }\n";
        assert!(matches!(Loaded::from_str(text, PathBuf::new()), Err(RunError::Schema(_))));
    }

    #[test]
    fn missing_manifest_is_rejected() {
        let text = "kind = \"diffquot\"\ngrid = { n1 = 1, half_width = 1.0, points = 8 }\nmanifests = { structure = \"nope.toml\" }\n";
        let e = Loaded::from_str(text, PathBuf::from("/nonexistent")).unwrap_err();
        assert!(e.to_string().contains("structure"));
    }
}
