//! Vector fields with split structure, particle flows and their
//! compressibility and sublevel diagnostics.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::cloud::{ball_volume, halton, sphere_area};
use crate::diffquot::{DerivativeStructure, DerivativeTerm};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction, Region};
use crate::maximal::StdBump;
use crate::singular::{Hilbert, Identity, Kernel, Riesz2d, SignedMeasure};

/// Velocity field given by a formula.
pub trait AnalyticField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);
}

/// `b(x) = M x + c`.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub matrix: Vec<f64>,
    pub drift: Vec<f64>,
}

impl LinearField {
    pub fn new(dim: usize, matrix: Vec<f64>, drift: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim || drift.len() != dim {
            return Err(Error::InvalidArgument("linear field shape mismatch".into()));
        }
        Ok(Self { dim, matrix, drift })
    }

    pub fn zero(dim: usize) -> Self {
        Self { dim, matrix: vec![0.0; dim * dim], drift: vec![0.0; dim] }
    }

    /// `omega (-x2, x1)` in the first two coordinates.
    pub fn rotation(dim: usize, omega: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("rotation needs two coordinates".into()));
        }
        let mut f = Self::zero(dim);
        f.matrix[1] = -omega;
        f.matrix[dim] = omega;
        Ok(f)
    }

    pub fn dilation(dim: usize, rate: f64) -> Self {
        let mut f = Self::zero(dim);
        (0..dim).for_each(|i| f.matrix[i * dim + i] = rate);
        f
    }

    /// `b1 = s x_N`, other components zero.
    pub fn shear(dim: usize, s: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("shear needs two coordinates".into()));
        }
        let mut f = Self::zero(dim);
        f.matrix[dim - 1] = s;
        Ok(f)
    }

    pub fn divergence(&self) -> f64 {
        (0..self.dim).map(|i| self.matrix[i * self.dim + i]).sum()
    }
}

impl AnalyticField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.drift[i] + (0..self.dim).map(|j| self.matrix[i * self.dim + j] * x[j]).sum::<f64>();
        }
    }
}

/// `b = a (cos x2, sin(x1 + phase) cos x2)` on the plane.
#[derive(Clone, Copy, Debug)]
pub struct SinCosField {
    pub amplitude: f64,
    pub phase: f64,
}

impl AnalyticField for SinCosField {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.amplitude * x[1].cos();
        out[1] = self.amplitude * (x[0] + self.phase).sin() * x[1].cos();
    }
}

/// Mass of the standard bump inside radius `s`, tabulated.
#[derive(Clone, Debug)]
pub struct RadialMass {
    table: Vec<f64>,
}

impl RadialMass {
    const N: usize = 4096;

    pub fn new(dim: usize) -> Self {
        let b = StdBump::new(dim);
        let area = sphere_area(dim);
        let h = 1.0 / Self::N as f64;
        let f = |r: f64| area * b.profile(r * r) * r.powi(dim as i32 - 1);
        let mut table = vec![0.0; Self::N + 1];
        for i in 0..Self::N {
            let (a, m, c) = (i as f64 * h, (i as f64 + 0.5) * h, (i + 1) as f64 * h);
            table[i + 1] = table[i] + h / 6.0 * (f(a) + 4.0 * f(m) + f(c));
        }
        let total = table[Self::N];
        table.iter_mut().for_each(|v| *v /= total);
        Self { table }
    }

    pub fn at(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return 1.0;
        }
        if s <= 0.0 {
            return 0.0;
        }
        let p = s * Self::N as f64;
        let i = p.floor() as usize;
        let f = p - i as f64;
        self.table[i] * (1.0 - f) + self.table[i + 1] * f
    }
}

/// `b(x, v) = (v, E(x))` with `E` the field of the charge distribution
/// `rho * rho_eta` in `n = 1, 2` space dimensions.
#[derive(Clone, Debug)]
pub struct VlasovField {
    pub n: usize,
    pub coupling: f64,
    pub eta: f64,
    pub atoms: Vec<(Vec<f64>, f64)>,
    mass: Arc<RadialMass>,
}

impl VlasovField {
    pub fn new(n: usize, coupling: f64, eta: f64, atoms: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        if !(1..=2).contains(&n) {
            return Err(Error::InvalidArgument(format!("Vlasov fields need n in {{1, 2}}, got {n}")));
        }
        if eta < 0.0 || atoms.iter().any(|a| a.0.len() != n) {
            return Err(Error::InvalidArgument("bad mollifier scale or atom dimension".into()));
        }
        Ok(Self { n, coupling, eta, atoms, mass: Arc::new(RadialMass::new(n)) })
    }

    fn enclosed(&self, r: f64) -> f64 {
        if self.eta == 0.0 {
            1.0
        } else {
            self.mass.at(r / self.eta)
        }
    }

    /// Electric field at position `x`.
    pub fn electric(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (a, w) in &self.atoms {
            if self.n == 1 {
                let d = x[0] - a[0];
                if d != 0.0 {
                    out[0] += 0.5 * self.coupling * w * d.signum() * self.enclosed(d.abs());
                }
            } else {
                let (d0, d1) = (x[0] - a[0], x[1] - a[1]);
                let r2 = d0 * d0 + d1 * d1;
                if r2 > 0.0 {
                    let c = self.coupling * w * self.enclosed(r2.sqrt()) / (2.0 * PI * r2);
                    out[0] += c * d0;
                    out[1] += c * d1;
                }
            }
        }
    }

    /// Charge density `rho * rho_eta` at `x` (`eta > 0`).
    pub fn density(&self, x: &[f64]) -> f64 {
        let b = StdBump::new(self.n);
        let s = self.eta.powi(-(self.n as i32));
        self.atoms
            .iter()
            .map(|(a, w)| {
                let r2: f64 = a.iter().zip(x).map(|(p, q)| ((q - p) / self.eta).powi(2)).sum();
                w * s * b.profile(r2)
            })
            .sum()
    }

    pub fn total_charge_variation(&self) -> f64 {
        self.atoms.iter().map(|a| a.1.abs()).sum()
    }
}

impl AnalyticField for VlasovField {
    fn dim(&self) -> usize {
        2 * self.n
    }
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        out[..n].copy_from_slice(&x[n..]);
        let (_, e) = out.split_at_mut(n);
        self.electric(&x[..n], e);
    }
}

#[derive(Clone, Debug)]
pub enum FieldSource {
    Analytic(Arc<dyn AnalyticField>),
    /// Slices at increasing times, linearly interpolated in time.
    Gridded { times: Vec<f64>, slices: Vec<GridFunction> },
}

/// Vector field on `R^(n1+n2)` with its derivative structure.
#[derive(Clone, Debug)]
pub struct SplitVectorField {
    pub name: String,
    /// Domain box, block split and CFL spacing.
    pub grid: Grid,
    pub source: FieldSource,
    /// `(time, structure)` slices; empty when no structure is known.
    pub structure: Vec<(f64, DerivativeStructure)>,
    /// Declared integrability exponent `p > 1`.
    pub p_integrability: f64,
}

/// `b / (1 + |x|) = b1 + b2` with `b1` integrable and `b2` bounded.
#[derive(Clone, Debug)]
pub struct GrowthSplit {
    pub b1: GridFunction,
    pub b2: GridFunction,
    pub l1_b1: f64,
    pub linf_b2: f64,
}

impl SplitVectorField {
    pub fn analytic(name: &str, grid: Grid, field: Arc<dyn AnalyticField>) -> Result<Self> {
        if field.dim() != grid.dim() {
            return Err(Error::GridMismatch("field dimension differs from its grid".into()));
        }
        Ok(Self { name: name.into(), grid, source: FieldSource::Analytic(field), structure: Vec::new(), p_integrability: 2.0 })
    }

    pub fn gridded(name: &str, times: Vec<f64>, slices: Vec<GridFunction>) -> Result<Self> {
        let grid = slices.first().ok_or_else(|| Error::InvalidArgument("no field slices".into()))?.grid().clone();
        if times.len() != slices.len() || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("slice times must be increasing, one per slice".into()));
        }
        if slices.iter().any(|s| s.grid() != &grid || s.components() != grid.dim()) {
            return Err(Error::GridMismatch("slices must be vector fields on one grid".into()));
        }
        Ok(Self {
            name: name.into(),
            grid,
            source: FieldSource::Gridded { times, slices },
            structure: Vec::new(),
            p_integrability: 2.0,
        })
    }

    pub fn with_structure(mut self, structure: Vec<(f64, DerivativeStructure)>) -> Self {
        self.structure = structure;
        self
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Time interval covered by the slices (unbounded for formulas).
    pub fn time_span(&self) -> (f64, f64) {
        match &self.source {
            FieldSource::Analytic(_) => (f64::NEG_INFINITY, f64::INFINITY),
            FieldSource::Gridded { times, .. } => (times[0], *times.last().expect("nonempty")),
        }
    }

    /// Evaluate `b(t, x)`; false outside the domain.
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> bool {
        if !self.grid.contains(x) {
            return false;
        }
        match &self.source {
            FieldSource::Analytic(f) => {
                f.eval(t, x, out);
                true
            }
            FieldSource::Gridded { times, slices } => {
                let k = times.partition_point(|&s| s <= t).clamp(1, times.len().max(2) - 1);
                if times.len() == 1 {
                    return slices[0].interpolate(x, out);
                }
                let (t0, t1) = (times[k - 1], times[k]);
                let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                let mut tmp = [0.0f64; 8];
                let d = out.len();
                if !slices[k - 1].interpolate(x, out) || !slices[k].interpolate(x, &mut tmp[..d]) {
                    return false;
                }
                out.iter_mut().zip(&tmp[..d]).for_each(|(a, b)| *a = (1.0 - w) * *a + w * b);
                true
            }
        }
    }

    /// Vector samples of `b(t, .)` at the grid nodes.
    pub fn sample(&self, t: f64) -> Result<GridFunction> {
        let d = self.dim();
        GridFunction::sample_vector(&self.grid, d, |x, out| {
            if !self.eval(t, x, out) {
                out.iter_mut().for_each(|o| *o = 0.0);
            }
        })
    }

    /// `max |b|` over the grid nodes at the times `t0`, the midpoint and `t1`.
    pub fn max_speed(&self, t0: f64, t1: f64) -> f64 {
        let times: Vec<f64> = match &self.source {
            FieldSource::Analytic(_) => vec![t0, 0.5 * (t0 + t1), t1],
            FieldSource::Gridded { times, .. } => times.clone(),
        };
        let d = self.dim();
        times
            .iter()
            .map(|&t| {
                (0..self.grid.len())
                    .into_par_iter()
                    .map(|i| {
                        let x = self.grid.node_vec(i);
                        let mut out = vec![0.0; d];
                        if self.eval(t, &x, &mut out) {
                            out.iter().map(|v| v * v).sum::<f64>().sqrt()
                        } else {
                            0.0
                        }
                    })
                    .reduce(|| 0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Largest admissible step `h_min / (2 max |b|)`.
    pub fn cfl_cap(&self, t0: f64, t1: f64) -> f64 {
        let s = self.max_speed(t0, t1);
        if s == 0.0 {
            f64::INFINITY
        } else {
            self.grid.min_spacing() / (2.0 * s)
        }
    }

    /// Split `b(t) / (1 + |x|)`: the part of magnitude above `cap` goes to
    /// `b1`, the rest to `b2`.
    pub fn growth_split(&self, t: f64, cap: f64) -> Result<GrowthSplit> {
        let b = self.sample(t)?;
        let d = self.dim();
        let g = &self.grid;
        let mut v1 = Vec::with_capacity(b.values().len());
        let mut v2 = Vec::with_capacity(b.values().len());
        let mut x = vec![0.0; d];
        let mut l1 = 0.0;
        let mut linf: f64 = 0.0;
        for i in 0..g.len() {
            g.node(i, &mut x);
            let w = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let q: Vec<f64> = b.node_values(i).iter().map(|v| v / w).collect();
            let m = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = if m > cap { cap / m } else { 1.0 };
            let mut n1 = 0.0;
            for &c in &q {
                v2.push(c * s);
                v1.push(c * (1.0 - s));
                n1 += (c * (1.0 - s)).powi(2);
            }
            l1 += n1.sqrt() * g.cell_measure();
            linf = linf.max(m.min(cap));
        }
        Ok(GrowthSplit {
            b1: GridFunction::new(g.clone(), d, v1)?,
            b2: GridFunction::new(g.clone(), d, v2)?,
            l1_b1: l1,
            linf_b2: linf,
        })
    }

    /// Largest node error of `(b1 + b2)(1 + |x|) - b`.
    pub fn growth_split_error(&self, t: f64, split: &GrowthSplit) -> Result<f64> {
        let b = self.sample(t)?;
        let g = &self.grid;
        let d = self.dim();
        let mut err: f64 = 0.0;
        for i in 0..g.len() {
            let x = g.node_vec(i);
            let w = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..d {
                let r = (split.b1.node_values(i)[c] + split.b2.node_values(i)[c]) * w;
                err = err.max((r - b.node_values(i)[c]).abs());
            }
        }
        Ok(err)
    }

    /// Structure slice in force at time `t`.
    pub fn structure_at(&self, t: f64) -> Option<&DerivativeStructure> {
        if self.structure.is_empty() {
            return None;
        }
        let k = self.structure.partition_point(|s| s.0 <= t).max(1) - 1;
        Some(&self.structure[k].1)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyReport {
    pub max_error: f64,
    pub scale: f64,
    pub checked: usize,
}

/// Compare central differences of `b(t)` with the derivatives reconstructed
/// from its structure, at nodes two spacings inside the box and outside
/// the clamp masks.
pub fn structure_consistency(b: &SplitVectorField, t: f64) -> Result<ConsistencyReport> {
    let ds = b.structure_at(t).ok_or_else(|| Error::InvalidArgument("field has no derivative structure".into()))?;
    if ds.grid != b.grid {
        return Err(Error::GridMismatch("structure grid differs from field grid".into()));
    }
    let s = b.sample(t)?;
    let g = &b.grid;
    let d = g.dim();
    let strides = g.strides();
    let pts = g.points();
    let mut idx = vec![0usize; d];
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut checked = 0;
    for comp in 0..d {
        for axis in 0..d {
            let (rec, mask) = ds.reconstruct(comp, axis)?;
            let h = g.spacing(axis);
            for i in 0..g.len() {
                g.unravel(i, &mut idx);
                if !mask[i] || idx.iter().zip(pts).any(|(&k, &n)| k < 2 || k + 2 >= n) {
                    continue;
                }
                let fd = (s.node_values(i + strides[axis])[comp] - s.node_values(i - strides[axis])[comp]) / (2.0 * h);
                err = err.max((fd - rec.value(i)).abs());
                scale = scale.max(rec.value(i).abs());
                checked += 1;
            }
        }
    }
    Ok(ConsistencyReport { max_error: err, scale, checked })
}

/// Particle trajectories on recorded times.
#[derive(Clone, Debug)]
pub struct FlowMap {
    pub dim: usize,
    pub seeds: Vec<Vec<f64>>,
    pub seed_spacing: Vec<f64>,
    pub cell_measure: f64,
    pub times: Vec<f64>,
    /// Seed-major, then time, then coordinate.
    pub positions: Vec<f64>,
    /// Index of the first recorded time after the particle left the box.
    pub escaped: Vec<Option<usize>>,
    pub start_time: f64,
}

impl FlowMap {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn position(&self, seed: usize, time: usize) -> &[f64] {
        let o = (seed * self.times.len() + time) * self.dim;
        &self.positions[o..o + self.dim]
    }

    pub fn same_seeds(&self, other: &FlowMap) -> bool {
        self.seeds == other.seeds && self.times == other.times && self.cell_measure == other.cell_measure
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let coords: Vec<String> = (1..=self.dim).map(|a| format!("x{a}")).collect();
        writeln!(w, "seed_id,time,{}", coords.join(","))?;
        for s in 0..self.len() {
            for (k, t) in self.times.iter().enumerate() {
                let p: Vec<String> = self.position(s, k).iter().map(|v| format!("{v:.12e}")).collect();
                writeln!(w, "{s},{t},{}", p.join(","))?;
            }
        }
        Ok(())
    }
}

/// Lattice cell centers with `density` cells per axis over the bounding box
/// of `region`, kept when inside it.
pub fn seed_lattice(region: &Region, grid: &Grid, density: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if density == 0 {
        return Err(Error::InvalidArgument("seed density must be positive".into()));
    }
    let d = grid.dim();
    let (lo, hi): (Vec<f64>, Vec<f64>) = match region {
        Region::Full => (grid.half_width().iter().map(|w| -w).collect(), grid.half_width().to_vec()),
        Region::Ball { center, radius } => (
            center.iter().map(|c| c - radius).collect(),
            center.iter().map(|c| c + radius).collect(),
        ),
        Region::Box { lo, hi } => (lo.clone(), hi.clone()),
        Region::ProductBalls { radius, .. } => (vec![-radius; d], vec![*radius; d]),
    };
    let s: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (b - a) / density as f64).collect();
    let total = density.pow(d as u32);
    let mut seeds = Vec::new();
    let mut x = vec![0.0; d];
    for idx in 0..total {
        let mut rem = idx;
        for a in (0..d).rev() {
            x[a] = lo[a] + ((rem % density) as f64 + 0.5) * s[a];
            rem /= density;
        }
        if region.contains(&x) {
            seeds.push(x.clone());
        }
    }
    if seeds.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok((seeds, s))
}

/// Evenly spaced recording times `t0, ..., t1`.
pub fn uniform_times(t0: f64, t1: f64, count: usize) -> Vec<f64> {
    let n = count.max(2) - 1;
    (0..=n).map(|k| t0 + (t1 - t0) * k as f64 / n as f64).collect()
}

/// RK4 integration of `dX/ds = b(s, X)` from `times[0]` through `times`,
/// with substeps of at most `dt` landing on every recorded time.
pub fn integrate_flow(
    b: &SplitVectorField,
    seed_region: &Region,
    seed_density: usize,
    times: &[f64],
    dt: f64,
) -> Result<FlowMap> {
    let (seeds, spacing) = seed_lattice(seed_region, &b.grid, seed_density)?;
    integrate_seeds(b, seeds, spacing, times, dt)
}

pub fn integrate_seeds(
    b: &SplitVectorField,
    seeds: Vec<Vec<f64>>,
    seed_spacing: Vec<f64>,
    times: &[f64],
    dt: f64,
) -> Result<FlowMap> {
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("recording times must be increasing".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("time step must be positive".into()));
    }
    let (t0, t1) = (times[0], *times.last().expect("nonempty"));
    let (s0, s1) = b.time_span();
    if t0 < s0 || t1 > s1 {
        return Err(Error::InvalidArgument(format!("field slices cover [{s0}, {s1}], flow needs [{t0}, {t1}]")));
    }
    let cap = b.cfl_cap(t0, t1);
    if dt > cap {
        return Err(Error::Cfl { dt, cap });
    }
    let d = b.dim();
    let nt = times.len();
    let results: Vec<(Vec<f64>, Option<usize>)> = seeds
        .par_iter()
        .map(|seed| {
            let mut out = Vec::with_capacity(nt * d);
            let mut x = seed.clone();
            out.extend_from_slice(&x);
            let mut escaped = None;
            let mut k1 = vec![0.0; d];
            let mut k2 = vec![0.0; d];
            let mut k3 = vec![0.0; d];
            let mut k4 = vec![0.0; d];
            let mut y = vec![0.0; d];
            for k in 1..nt {
                if escaped.is_none() {
                    let span = times[k] - times[k - 1];
                    let n = (span / dt).ceil().max(1.0) as usize;
                    let h = span / n as f64;
                    for step in 0..n {
                        let t = times[k - 1] + step as f64 * h;
                        let ok = b.eval(t, &x, &mut k1)
                            && {
                                (0..d).for_each(|a| y[a] = x[a] + 0.5 * h * k1[a]);
                                b.eval(t + 0.5 * h, &y, &mut k2)
                            }
                            && {
                                (0..d).for_each(|a| y[a] = x[a] + 0.5 * h * k2[a]);
                                b.eval(t + 0.5 * h, &y, &mut k3)
                            }
                            && {
                                (0..d).for_each(|a| y[a] = x[a] + h * k3[a]);
                                b.eval(t + h, &y, &mut k4)
                            };
                        if ok {
                            (0..d).for_each(|a| y[a] = x[a] + h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]));
                        }
                        if !ok || !b.grid.contains(&y) {
                            escaped = Some(k);
                            break;
                        }
                        x.copy_from_slice(&y);
                    }
                }
                out.extend_from_slice(&x);
            }
            (out, escaped)
        })
        .collect();
    let mut positions = Vec::with_capacity(seeds.len() * nt * d);
    let mut escaped = Vec::with_capacity(seeds.len());
    for (p, e) in results {
        positions.extend(p);
        escaped.push(e);
    }
    let cell_measure = seed_spacing.iter().product();
    Ok(FlowMap { dim: d, seeds, seed_spacing, cell_measure, times: times.to_vec(), positions, escaped, start_time: t0 })
}

/// Partition spacing of the compressibility histogram, in seed spacings.
pub const PARTITION_FACTOR: f64 = 4.0;

/// Estimate of the compressibility constant: the largest density of the
/// pushforward of the seeds in `test_region`, deposited with cloud-in-cell
/// weights on a lattice of spacing `PARTITION_FACTOR` seed spacings, over
/// all recorded times.
pub fn compressibility(fm: &FlowMap, test_region: &Region) -> Result<f64> {
    let live: Vec<usize> = (0..fm.len()).filter(|&s| test_region.contains(&fm.seeds[s])).collect();
    if live.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let d = fm.dim;
    let hcell: Vec<f64> = fm.seed_spacing.iter().map(|s| s * PARTITION_FACTOR).collect();
    let origin: Vec<f64> = (0..d)
        .map(|a| fm.seeds.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min) - 0.5 * fm.seed_spacing[a])
        .collect();
    let vol: f64 = hcell.iter().product();
    let mut best: f64 = 0.0;
    for k in 0..fm.times.len() {
        let mut acc: HashMap<Vec<i64>, f64> = HashMap::new();
        let mut base = vec![0i64; d];
        let mut frac = vec![0.0; d];
        for &s in &live {
            if fm.escaped[s].is_some_and(|e| e <= k) {
                continue;
            }
            let p = fm.position(s, k);
            for a in 0..d {
                let q = (p[a] - origin[a]) / hcell[a];
                base[a] = q.floor() as i64;
                frac[a] = q - base[a] as f64;
            }
            for corner in 0..(1usize << d) {
                let mut w = fm.cell_measure;
                let mut key = base.clone();
                for a in 0..d {
                    if corner >> a & 1 == 1 {
                        w *= frac[a];
                        key[a] += 1;
                    } else {
                        w *= 1.0 - frac[a];
                    }
                }
                *acc.entry(key).or_insert(0.0) += w;
            }
        }
        best = best.max(acc.values().cloned().fold(0.0, f64::max) / vol);
    }
    Ok(best)
}

/// Seeds whose recorded trajectory stays in the closed ball of radius
/// `lambda`; escaped particles are excluded.
pub fn sublevel(fm: &FlowMap, lambda: f64) -> Vec<bool> {
    (0..fm.len())
        .map(|s| {
            fm.escaped[s].is_none()
                && (0..fm.times.len()).all(|k| fm.position(s, k).iter().map(|v| v * v).sum::<f64>() <= lambda * lambda)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayCurve {
    pub r: f64,
    pub points: Vec<(f64, f64)>,
    pub monotone: bool,
}

impl DecayCurve {
    /// Smallest ladder value with measure at most `eta`.
    pub fn first_below(&self, eta: f64) -> Option<f64> {
        self.points.iter().find(|p| p.1 <= eta).map(|p| p.0)
    }
}

/// `lambda -> |B_r \ G_lambda|` on the seeds of `fm` inside `B_r`.
pub fn superlevel_decay(fm: &FlowMap, r: f64, ladder: &[f64]) -> Result<DecayCurve> {
    if ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("lambda ladder must be increasing".into()));
    }
    let inside: Vec<bool> = fm.seeds.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>() <= r * r).collect();
    let points: Vec<(f64, f64)> = ladder
        .iter()
        .map(|&l| {
            let g = sublevel(fm, l);
            let n = inside.iter().zip(&g).filter(|(i, g)| **i && !**g).count();
            (l, n as f64 * fm.cell_measure)
        })
        .collect();
    let monotone = points.windows(2).all(|w| w[1].1 <= w[0].1);
    Ok(DecayCurve { r, points, monotone })
}

/// `||b - bbar||_{L1((t0, t1) x B_lambda)}` by Halton quadrature with
/// `samples` points in `(t0, t1) x [-lambda, lambda]^N`.
pub fn l1_difference(b: &SplitVectorField, bbar: &SplitVectorField, lambda: f64, t0: f64, t1: f64, samples: usize) -> Result<f64> {
    let d = b.dim();
    if bbar.dim() != d || d + 1 > 8 {
        return Err(Error::GridMismatch("fields of different or unsupported dimension".into()));
    }
    let total: f64 = (1..=samples)
        .into_par_iter()
        .map(|i| {
            let mut u = [0.0f64; 8];
            halton(i, d + 1, &mut u);
            let t = t0 + (t1 - t0) * u[0];
            let x: Vec<f64> = (0..d).map(|a| lambda * (2.0 * u[a + 1] - 1.0)).collect();
            if x.iter().map(|v| v * v).sum::<f64>() > lambda * lambda {
                return 0.0;
            }
            let mut p = vec![0.0; d];
            let mut q = vec![0.0; d];
            if !b.eval(t, &x, &mut p) || !bbar.eval(t, &x, &mut q) {
                return 0.0;
            }
            p.iter().zip(&q).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / samples as f64 * (t1 - t0) * (2.0 * lambda).powi(d as i32))
}

/// `|B_r|` in `R^d`.
pub fn ball_measure(d: usize, r: f64) -> f64 {
    ball_volume(d) * r.powi(d as i32)
}

fn param(params: &toml::Table, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(toml::Value::Float(v)) => Ok(*v),
        Some(toml::Value::Integer(v)) => Ok(*v as f64),
        Some(v) => Err(Error::Parse(format!("parameter {key} must be a number, got {v}"))),
    }
}

fn param_vec(params: &toml::Table, key: &str) -> Result<Option<Vec<f64>>> {
    match params.get(key) {
        None => Ok(None),
        Some(toml::Value::Array(a)) => a
            .iter()
            .map(|v| match v {
                toml::Value::Float(f) => Ok(*f),
                toml::Value::Integer(i) => Ok(*i as f64),
                other => Err(Error::Parse(format!("{key}: expected numbers, got {other}"))),
            })
            .collect::<Result<Vec<f64>>>()
            .map(Some),
        Some(v) => Err(Error::Parse(format!("{key} must be an array, got {v}"))),
    }
}

/// Constant structure of a linear field: `d_j b^i = M_ij`.
pub fn linear_structure(grid: &Grid, f: &LinearField) -> Result<DerivativeStructure> {
    let g1 = grid.block1()?;
    let g2 = grid.block2()?;
    let id: Kernel = Arc::new(Identity { dim: g1.dim() });
    let d = grid.dim();
    let mut terms = Vec::new();
    for i in 0..d {
        for j in 0..d {
            let m = f.matrix[i * d + j];
            if m != 0.0 {
                terms.push(DerivativeTerm {
                    component: i,
                    axis: j,
                    k: 1,
                    kernel: id.clone(),
                    gamma: GridFunction::constant(g2.clone(), 1.0)?,
                    datum: SignedMeasure::from_density(GridFunction::constant(g1.clone(), m)?)?,
                });
            }
        }
    }
    DerivativeStructure::new(grid.clone(), terms)
}

/// Structure of [`SinCosField`] on a plane grid.
pub fn sin_cos_structure(grid: &Grid, f: &SinCosField) -> Result<DerivativeStructure> {
    let g1 = grid.block1()?;
    let g2 = grid.block2()?;
    let (a, ph) = (f.amplitude, f.phase);
    let h: Kernel = Arc::new(Hilbert);
    let id: Kernel = Arc::new(Identity { dim: 1 });
    let term = |component, axis, kernel: &Kernel, gamma: GridFunction, datum: GridFunction| -> Result<DerivativeTerm> {
        Ok(DerivativeTerm { component, axis, k: 1, kernel: kernel.clone(), gamma, datum: SignedMeasure::from_density(datum)? })
    };
    let terms = vec![
        term(0, 1, &id, GridFunction::sample(&g2, |x| -x[0].sin())?, GridFunction::constant(g1.clone(), a)?)?,
        term(1, 0, &h, GridFunction::sample(&g2, |x| x[0].cos())?, GridFunction::sample(&g1, |x| -a * (x[0] + ph).sin())?)?,
        term(1, 1, &h, GridFunction::sample(&g2, |x| -x[0].sin())?, GridFunction::sample(&g1, |x| a * (x[0] + ph).cos())?)?,
    ];
    DerivativeStructure::new(grid.clone(), terms)
}

/// Structure of a mollified Vlasov field on a grid over `(x, v)`: block
/// (2,1) carries `d_j E_i` as kernels acting on the smoothed charge, block
/// (1,2) the identity `d_v v`.
pub fn vlasov_structure(grid: &Grid, f: &VlasovField) -> Result<DerivativeStructure> {
    if f.eta == 0.0 {
        return Err(Error::InvalidArgument("structure needs a positive mollifier scale".into()));
    }
    let n = f.n;
    if grid.n1() != n || grid.n2() != n {
        return Err(Error::GridMismatch("Vlasov grids split into position and velocity blocks".into()));
    }
    let g1 = grid.block1()?;
    let g2 = grid.block2()?;
    let rho = GridFunction::sample(&g1, |x| f.density(x))?;
    let one2 = GridFunction::constant(g2.clone(), 1.0)?;
    let id: Kernel = Arc::new(Identity { dim: n });
    let mut terms = Vec::new();
    for i in 0..n {
        terms.push(DerivativeTerm {
            component: i,
            axis: n + i,
            k: 1,
            kernel: id.clone(),
            gamma: one2.clone(),
            datum: SignedMeasure::from_density(GridFunction::constant(g1.clone(), 1.0)?)?,
        });
    }
    if n == 1 {
        terms.push(DerivativeTerm {
            component: 1,
            axis: 0,
            k: 1,
            kernel: id,
            gamma: one2,
            datum: SignedMeasure::from_density(rho.scale(f.coupling)?)?,
        });
    } else {
        for i in 0..2 {
            for j in 0..2 {
                terms.push(DerivativeTerm {
                    component: n + i,
                    axis: j,
                    k: 1,
                    kernel: Arc::new(Riesz2d::new(i + 1, j + 1)?),
                    gamma: one2.clone(),
                    datum: SignedMeasure::from_density(rho.scale(-f.coupling)?)?,
                });
            }
            terms.push(DerivativeTerm {
                component: n + i,
                axis: i,
                k: 2,
                kernel: id.clone(),
                gamma: one2.clone(),
                datum: SignedMeasure::from_density(rho.scale(0.5 * f.coupling)?)?,
            });
        }
    }
    DerivativeStructure::new(grid.clone(), terms)
}

/// Vlasov field of `rho` (atoms only) on the phase-space `grid`.
pub fn vlasov_field(rho: &SignedMeasure, coupling: f64, eta: f64, grid: &Grid) -> Result<SplitVectorField> {
    if rho.density.is_some() {
        return Err(Error::InvalidArgument("Vlasov charges are given as atoms".into()));
    }
    let n = rho.dim;
    let atoms = rho.atoms.iter().map(|a| (a.location.clone(), a.weight)).collect();
    let f = VlasovField::new(n, coupling, eta, atoms)?;
    if grid.dim() != 2 * n || grid.n1() != n {
        return Err(Error::GridMismatch(format!("Vlasov field with n = {n} needs a (x, v) grid of dimension {}", 2 * n)));
    }
    let structure = if eta > 0.0 { vec![(f64::NEG_INFINITY, vlasov_structure(grid, &f)?)] } else { Vec::new() };
    let name = format!("vlasov(eta={eta})");
    Ok(SplitVectorField::analytic(&name, grid.clone(), Arc::new(f))?.with_structure(structure))
}

type FieldFactory = Box<dyn Fn(&Grid, &toml::Table) -> Result<SplitVectorField> + Send + Sync>;

/// Named field constructors with TOML parameters.
pub struct FieldRegistry {
    entries: BTreeMap<String, (&'static str, FieldFactory)>,
}

fn with_drift(mut f: LinearField, params: &toml::Table) -> Result<LinearField> {
    if let Some(c) = param_vec(params, "drift")? {
        if c.len() != f.dim {
            return Err(Error::Parse("drift has the wrong length".into()));
        }
        f.drift = c;
    }
    Ok(f)
}

fn linear(name: &str, grid: &Grid, f: LinearField) -> Result<SplitVectorField> {
    let s = linear_structure(grid, &f).ok();
    let field = SplitVectorField::analytic(name, grid.clone(), Arc::new(f))?;
    Ok(match s {
        Some(s) => field.with_structure(vec![(f64::NEG_INFINITY, s)]),
        None => field,
    })
}

impl FieldRegistry {
    pub fn builtin() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register("zero", "b = 0 (plus optional drift)", |g, p| {
            linear("zero", g, with_drift(LinearField::zero(g.dim()), p)?)
        });
        r.register("rotation", "b = omega (-x2, x1), divergence free", |g, p| {
            linear("rotation", g, with_drift(LinearField::rotation(g.dim(), param(p, "omega", 1.0)?)?, p)?)
        });
        r.register("dilation", "b = rate x", |g, p| {
            linear("dilation", g, with_drift(LinearField::dilation(g.dim(), param(p, "rate", 1.0)?), p)?)
        });
        r.register("contraction", "b = -rate x", |g, p| {
            linear("contraction", g, with_drift(LinearField::dilation(g.dim(), -param(p, "rate", 1.0)?), p)?)
        });
        r.register("shear", "b1 = s x_N, divergence free", |g, p| {
            linear("shear", g, with_drift(LinearField::shear(g.dim(), param(p, "s", 1.0)?)?, p)?)
        });
        r.register("sin_cos", "b = a (cos x2, sin(x1 + phase) cos x2)", |g, p| {
            if g.dim() != 2 || g.n1() != 1 {
                return Err(Error::GridMismatch("sin_cos lives on a plane split 1 + 1".into()));
            }
            let f = SinCosField { amplitude: param(p, "amplitude", 1.0)?, phase: param(p, "phase", 0.0)? };
            let s = sin_cos_structure(g, &f)?;
            Ok(SplitVectorField::analytic("sin_cos", g.clone(), Arc::new(f))?.with_structure(vec![(f64::NEG_INFINITY, s)]))
        });
        r.register("vlasov", "b = (v, E(x)) for point charges mollified at scale eta", |g, p| {
            let n = g.n1();
            let flat = param_vec(p, "atoms")?.unwrap_or_default();
            if flat.len() % (n + 1) != 0 {
                return Err(Error::Parse(format!("atoms must be a flat list of {n} coordinates and a weight")));
            }
            let atoms = flat.chunks(n + 1).map(|c| (c[..n].to_vec(), c[n])).collect();
            let rho = SignedMeasure::from_atoms(n, atoms)?;
            vlasov_field(&rho, param(p, "coupling", 1.0)?, param(p, "eta", 0.0)?, g)
        });
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        summary: &'static str,
        f: impl Fn(&Grid, &toml::Table) -> Result<SplitVectorField> + Send + Sync + 'static,
    ) {
        self.entries.insert(name.into(), (summary, Box::new(f)));
    }

    pub fn catalog(&self) -> Vec<(String, &'static str)> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.0)).collect()
    }

    pub fn create(&self, name: &str, grid: &Grid, params: &toml::Table) -> Result<SplitVectorField> {
        let (_, f) = self.entries.get(name).ok_or_else(|| Error::Unknown { kind: "field", name: name.into() })?;
        f(grid, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(w: f64, n: usize) -> Grid {
        Grid::uniform(1, 1, w, n).unwrap()
    }

    #[test]
    fn zero_field_is_static() {
        let b = FieldRegistry::builtin().create("zero", &plane(4.0, 32), &toml::Table::new()).unwrap();
        let fm = integrate_flow(&b, &Region::centered_ball(2, 1.0).unwrap(), 8, &uniform_times(0.0, 1.0, 5), 0.1).unwrap();
        for s in 0..fm.len() {
            assert_eq!(fm.position(s, 4), &fm.seeds[s][..]);
        }
    }

    #[test]
    fn rotation_endpoint() {
        let b = FieldRegistry::builtin().create("rotation", &plane(4.0, 128), &toml::Table::new()).unwrap();
        let fm = integrate_seeds(&b, vec![vec![1.0, 0.0]], vec![1.0, 1.0], &[0.0, PI / 2.0], 1e-3).unwrap();
        let p = fm.position(0, 1);
        assert!(p[0].abs() < 1e-6 && (p[1] - 1.0).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn dilation_is_exponential() {
        let b = FieldRegistry::builtin().create("dilation", &plane(8.0, 64), &toml::Table::new()).unwrap();
        let fm = integrate_seeds(&b, vec![vec![0.5, -0.25]], vec![1.0, 1.0], &[0.0, 1.0], 0.01).unwrap();
        let p = fm.position(0, 1);
        assert!((p[0] - 0.5 * 1f64.exp()).abs() < 1e-8 && (p[1] + 0.25 * 1f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn cfl_is_enforced() {
        let b = FieldRegistry::builtin().create("dilation", &plane(8.0, 64), &toml::Table::new()).unwrap();
        let err = integrate_seeds(&b, vec![vec![0.0, 0.0]], vec![1.0, 1.0], &[0.0, 1.0], 0.5).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }));
    }

    #[test]
    fn escape_is_frozen() {
        let b = FieldRegistry::builtin().create("dilation", &plane(2.0, 64), &toml::Table::new()).unwrap();
        let fm = integrate_seeds(&b, vec![vec![1.0, 0.0]], vec![1.0, 1.0], &uniform_times(0.0, 1.0, 3), 0.01).unwrap();
        assert_eq!(fm.escaped[0], Some(2));
        assert!(fm.position(0, 2)[0] < 2.0);
        assert!(!sublevel(&fm, 100.0)[0]);
    }

    #[test]
    fn rotation_preserves_measure() {
        let b = FieldRegistry::builtin().create("rotation", &plane(4.0, 128), &toml::Table::new()).unwrap();
        let region = Region::centered_ball(2, 1.5).unwrap();
        let fm = integrate_flow(&b, &region, 96, &uniform_times(0.0, 1.0, 6), 0.005).unwrap();
        let l = compressibility(&fm, &region).unwrap();
        assert!((l - 1.0).abs() < 0.05, "{l}");
    }

    #[test]
    fn contraction_concentrates() {
        let b = FieldRegistry::builtin().create("contraction", &plane(4.0, 128), &toml::Table::new()).unwrap();
        let region = Region::centered_ball(2, 1.5).unwrap();
        let fm = integrate_flow(&b, &region, 96, &uniform_times(0.0, 1.0, 6), 0.005).unwrap();
        let l = compressibility(&fm, &region).unwrap();
        let e2 = 2f64.exp();
        assert!((l / e2 - 1.0).abs() < 0.1, "{l}");
    }

    #[test]
    fn growth_split_reconstructs() {
        let g = plane(4.0, 32);
        let b = FieldRegistry::builtin().create("dilation", &g, &toml::Table::new()).unwrap();
        let s = b.growth_split(0.0, 0.5).unwrap();
        assert!(b.growth_split_error(0.0, &s).unwrap() < 1e-10);
        assert!(s.linf_b2 <= 0.5 && s.l1_b1 > 0.0);
    }

    #[test]
    fn vlasov_fields() {
        let g = Grid::uniform(2, 2, 4.0, 8).unwrap();
        let b = vlasov_field(&SignedMeasure::dirac(vec![0.0, 0.0], 1.0), 2.0 * PI, 0.0, &g).unwrap();
        let mut out = [0.0; 4];
        assert!(b.eval(0.0, &[1.0, 0.0, 0.5, -0.5], &mut out));
        assert!((out[2] - 1.0).abs() < 1e-14 && out[3].abs() < 1e-14 && out[0] == 0.5 && out[1] == -0.5);
        let g1 = Grid::uniform(1, 1, 4.0, 8).unwrap();
        let b = vlasov_field(&SignedMeasure::dirac(vec![0.0], 1.0), 1.0, 0.0, &g1).unwrap();
        assert!(b.eval(0.0, &[-2.0, 0.0], &mut out[..2]));
        assert_eq!(out[1], -0.5);
        let b = vlasov_field(&SignedMeasure::zero(2), 1.0, 0.1, &g).unwrap();
        assert!(b.eval(0.0, &[1.0, 0.0, 0.5, -0.5], &mut out));
        assert_eq!(&out, &[0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn mollified_field_is_outer_point_field() {
        let f = VlasovField::new(2, 1.0, 0.5, vec![(vec![0.0, 0.0], 1.0)]).unwrap();
        let mut e = [0.0; 2];
        f.electric(&[0.7, 0.0], &mut e);
        assert!((e[0] - 1.0 / (2.0 * PI * 0.7)).abs() < 1e-12);
        f.electric(&[0.25, 0.0], &mut e);
        assert!(e[0] < 1.0 / (2.0 * PI * 0.25));
        assert!((RadialMass::new(2).at(0.999999) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sin_cos_structure_is_consistent() {
        let g = plane(PI, 128);
        let b = FieldRegistry::builtin().create("sin_cos", &g, &toml::Table::new()).unwrap();
        let r = structure_consistency(&b, 0.0).unwrap();
        let h = g.max_spacing();
        assert!(r.max_error < h * h, "{r:?}");
    }

    #[test]
    fn vlasov_structure_matches_field() {
        let g = Grid::new(1, vec![4.0, 4.0], vec![1024, 8]).unwrap();
        let rho = SignedMeasure::from_atoms(1, vec![(vec![0.3], 1.0), (vec![-0.8], 0.5)]).unwrap();
        let b = vlasov_field(&rho, 1.0, 0.5, &g).unwrap();
        let r = structure_consistency(&b, 0.0).unwrap();
        assert!(r.max_error < 1e-2 * r.scale, "{r:?}");
    }

    #[test]
    fn dilation_decay_curve() {
        let b = FieldRegistry::builtin().create("dilation", &plane(8.0, 64), &toml::Table::new()).unwrap();
        let fm = integrate_flow(&b, &Region::centered_ball(2, 1.0).unwrap(), 64, &uniform_times(0.0, 1.0, 11), 0.01).unwrap();
        let c = superlevel_decay(&fm, 1.0, &[0.5, 1.0, 2.0, 3.0]).unwrap();
        assert!(c.monotone);
        assert_eq!(c.points[3].1, 0.0);
        let s = fm.seed_spacing[0];
        let oracle = |rho: f64| ball_measure(2, 1.0) - ball_measure(2, rho.min(1.0));
        let rho = 2.0 / 1f64.exp();
        let m = c.points[2].1;
        assert!(m <= oracle(rho - 2.0 * s) && m >= oracle(rho + 2.0 * s), "{m} {}", oracle(rho));
    }

    #[test]
    fn l1_difference_of_drift() {
        let g = plane(8.0, 64);
        let reg = FieldRegistry::builtin();
        let b = reg.create("rotation", &g, &toml::Table::new()).unwrap();
        let mut p = toml::Table::new();
        p.insert("drift".into(), toml::Value::Array(vec![toml::Value::Float(0.1), toml::Value::Float(0.0)]));
        let bb = reg.create("rotation", &g, &p).unwrap();
        let v = l1_difference(&b, &bb, 2.0, 0.0, 1.0, 1 << 14).unwrap();
        assert!((v - 0.1 * 4.0 * PI).abs() < 0.01, "{v}");
    }
}
