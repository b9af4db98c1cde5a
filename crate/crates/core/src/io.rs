//! GridFunction serialization: CSV with a metadata header, or flat binary.
//!
//! CSV layout:
//! ```text
//! n1=1,n2=1,components=1,half_width=1 2,points=8 16
//! x1,x2,v0
//! -1,-2,0.25
//! ```
//! Binary layout (little endian): magic `AFGF`, `u32` dim, `u32` n1,
//! `u32` components, then per axis `f64` half-width and `u64` points, then
//! the values as `f64`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};

const MAGIC: &[u8; 4] = b"AFGF";

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

pub fn grid_header(grid: &Grid, components: usize) -> String {
    format!(
        "n1={},n2={},components={},half_width={},points={}",
        grid.n1(),
        grid.n2(),
        components,
        join(grid.half_width()),
        join(grid.points())
    )
}

pub fn to_csv_string(u: &GridFunction) -> String {
    let g = u.grid();
    let mut s = grid_header(g, u.components());
    s.push('\n');
    let cols: Vec<String> = (1..=g.dim())
        .map(|a| format!("x{a}"))
        .chain((0..u.components()).map(|c| format!("v{c}")))
        .collect();
    s.push_str(&cols.join(","));
    s.push('\n');
    let mut x = vec![0.0; g.dim()];
    for i in 0..g.len() {
        g.node(i, &mut x);
        let mut first = true;
        for v in x.iter().chain(u.node_values(i)) {
            if !first {
                s.push(',');
            }
            first = false;
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_csv(u: &GridFunction, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(u))?;
    Ok(())
}

fn parse_header(line: &str) -> Result<(Grid, usize)> {
    let mut n1 = None;
    let mut n2 = None;
    let mut comps = None;
    let mut hw = None;
    let mut pts = None;
    for field in line.trim().split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field `{field}`")))?;
        let num = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Parse(format!("{k}: {e}")));
        match k.trim() {
            "n1" => n1 = Some(num(v)?),
            "n2" => n2 = Some(num(v)?),
            "components" => comps = Some(num(v)?),
            "half_width" => {
                hw = Some(
                    v.split_whitespace()
                        .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("half_width: {e}"))))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "points" => pts = Some(v.split_whitespace().map(num).collect::<Result<Vec<_>>>()?),
            other => return Err(Error::Parse(format!("unknown header key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::Parse(format!("header misses `{k}`"));
    let (n1, n2) = (n1.ok_or_else(|| missing("n1"))?, n2.ok_or_else(|| missing("n2"))?);
    let hw = hw.ok_or_else(|| missing("half_width"))?;
    if hw.len() != n1 + n2 {
        return Err(Error::Parse(format!("n1 + n2 = {} but {} axes", n1 + n2, hw.len())));
    }
    let grid = Grid::new(n1, hw, pts.ok_or_else(|| missing("points"))?)?;
    Ok((grid, comps.unwrap_or(1)))
}

pub fn from_csv_reader(reader: impl Read) -> Result<GridFunction> {
    let mut lines = BufReader::new(reader).lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty file".into()))??;
    let (grid, comps) = parse_header(&header)?;
    lines.next().ok_or_else(|| Error::Parse("missing column row".into()))??;
    let d = grid.dim();
    let mut values = Vec::with_capacity(grid.len() * comps);
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + comps {
            return Err(Error::Parse(format!("row {row}: {} fields, expected {}", fields.len(), d + comps)));
        }
        for f in &fields[d..] {
            values.push(f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {row}: {e}")))?);
        }
    }
    GridFunction::new(grid, comps, values)
}

pub fn read_csv(path: &Path) -> Result<GridFunction> {
    from_csv_reader(std::fs::File::open(path)?)
}

pub fn to_binary(u: &GridFunction) -> Vec<u8> {
    let g = u.grid();
    let mut out = Vec::with_capacity(16 + 16 * g.dim() + 8 * u.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(g.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(g.n1() as u32).to_le_bytes());
    out.extend_from_slice(&(u.components() as u32).to_le_bytes());
    for a in 0..g.dim() {
        out.extend_from_slice(&g.half_width()[a].to_le_bytes());
        out.extend_from_slice(&(g.points()[a] as u64).to_le_bytes());
    }
    for v in u.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_binary(bytes: &[u8]) -> Result<GridFunction> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| Error::Parse("truncated binary grid".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Parse("bad magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let dim = u32_at(take(4)?);
    let n1 = u32_at(take(4)?);
    let comps = u32_at(take(4)?);
    let mut hw = Vec::with_capacity(dim);
    let mut pts = Vec::with_capacity(dim);
    for _ in 0..dim {
        hw.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        pts.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
    }
    let grid = Grid::new(n1, hw, pts)?;
    let n = grid.len() * comps;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
    }
    GridFunction::new(grid, comps, values)
}

pub fn write_binary(u: &GridFunction, path: &Path) -> Result<()> {
    std::fs::File::create(path)?.write_all(&to_binary(u))?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<GridFunction> {
    from_binary(&std::fs::read(path)?)
}

/// Read by extension: `.bin` is binary, anything else CSV.
pub fn read_grid_function(path: &Path) -> Result<GridFunction> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => read_binary(path),
        _ => read_csv(path),
    }
}

/// Sample a formula on `grid`. Coordinates are named `x{offset+1}`,
/// `x{offset+2}`, ... so that block-2 data can use their global names.
pub fn sample_expression(text: &str, grid: &Grid, offset: usize) -> Result<GridFunction> {
    use exmex::Express;
    let expr = exmex::parse::<f64>(text).map_err(|e| Error::Parse(format!("{text}: {e}")))?;
    let axes: Vec<usize> = expr
        .var_names()
        .iter()
        .map(|name| {
            name.strip_prefix('x')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n > offset && n <= offset + grid.dim())
                .map(|n| n - offset - 1)
                .ok_or_else(|| Error::Parse(format!("{text}: unknown variable {name}")))
        })
        .collect::<Result<_>>()?;
    let mut args = vec![0.0; axes.len()];
    let mut failure = None;
    let u = GridFunction::sample(grid, |x| {
        for (a, &ax) in args.iter_mut().zip(&axes) {
            *a = x[ax];
        }
        expr.eval(&args).unwrap_or_else(|e| {
            failure.get_or_insert(e.to_string());
            f64::NAN
        })
    });
    if let Some(e) = failure {
        return Err(Error::Parse(format!("{text}: {e}")));
    }
    u
}
