//! Singular kernels of fundamental type, their spectral action on grid
//! functions and their pointwise action on measures.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::Serialize;

use crate::cloud::{sphere_area, sphere_cloud};
use crate::error::{Error, Result};
use crate::grid::{lebesgue_norm, Grid, GridFunction, Region};
use crate::spectral;
use crate::weak_lebesgue::weak_norm;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Declared bounds: `|K| |x|^d <= c0`, `|grad K| |x|^(d+1) <= c1`,
/// ring integrals `<= a1`, `|K^| <= multiplier_sup`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KernelConstants {
    pub c0: f64,
    pub c1: f64,
    pub a1: f64,
    pub multiplier_sup: f64,
}

pub trait FundamentalKernel: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    fn dim(&self) -> usize;

    /// Off-origin value.
    fn evaluate(&self, x: &[f64]) -> f64;

    /// Fourier multiplier at a nonzero frequency.
    fn multiplier(&self, xi: &[f64]) -> Complex64;

    /// Multiplier at the zero mode (fixes the Dirac multiple).
    fn multiplier_at_zero(&self) -> Complex64 {
        ZERO
    }

    fn constants(&self) -> KernelConstants;

    /// Homogeneous of degree `-dim`.
    fn homogeneous(&self) -> bool {
        false
    }

    /// Whether `evaluate` is meaningful (false for multiplier-only kernels).
    fn pointwise(&self) -> bool {
        true
    }

    /// Value used at a node that coincides with an atom: the mean of `K`
    /// at `+-h e_a` over all axes.
    fn clamp_value(&self, spacing: &[f64]) -> f64 {
        let d = self.dim();
        let mut x = vec![0.0; d];
        let mut acc = 0.0;
        for a in 0..d {
            x.iter_mut().for_each(|v| *v = 0.0);
            x[a] = spacing[a];
            acc += self.evaluate(&x);
            x[a] = -spacing[a];
            acc += self.evaluate(&x);
        }
        acc / (2 * d) as f64
    }
}

pub type Kernel = Arc<dyn FundamentalKernel>;

/// `K(x) = 1/(pi x)`, `K^(xi) = -i sign(xi)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hilbert;

impl FundamentalKernel for Hilbert {
    fn name(&self) -> String {
        "hilbert".into()
    }
    fn dim(&self) -> usize {
        1
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        1.0 / (PI * x[0])
    }
    fn multiplier(&self, xi: &[f64]) -> Complex64 {
        Complex64::new(0.0, -xi[0].signum())
    }
    fn constants(&self) -> KernelConstants {
        KernelConstants { c0: 1.0 / PI, c1: 1.0 / PI, a1: 0.0, multiplier_sup: 1.0 }
    }
    fn homogeneous(&self) -> bool {
        true
    }
}

/// Off-origin part of `d_i d_j` of the planar log potential
/// `-(1/2 pi) log|x|`; the full second derivative is `K_ij - (delta_ij/2) delta_0`.
#[derive(Clone, Copy, Debug)]
pub struct Riesz2d {
    i: usize,
    j: usize,
}

impl Riesz2d {
    /// Indices are 1-based, `i, j` in `{1, 2}`.
    pub fn new(i: usize, j: usize) -> Result<Self> {
        if !(1..=2).contains(&i) || !(1..=2).contains(&j) {
            return Err(Error::InvalidArgument(format!("riesz2d indices ({i},{j}) out of range")));
        }
        Ok(Self { i, j })
    }
}

impl FundamentalKernel for Riesz2d {
    fn name(&self) -> String {
        format!("riesz2d_{}{}", self.i, self.j)
    }
    fn dim(&self) -> usize {
        2
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let r4 = r2 * r2;
        match (self.i, self.j) {
            (1, 1) => (x[0] * x[0] - x[1] * x[1]) / (2.0 * PI * r4),
            (2, 2) => (x[1] * x[1] - x[0] * x[0]) / (2.0 * PI * r4),
            _ => x[0] * x[1] / (PI * r4),
        }
    }
    fn multiplier(&self, xi: &[f64]) -> Complex64 {
        let r2 = xi[0] * xi[0] + xi[1] * xi[1];
        let v = match (self.i, self.j) {
            (1, 1) => (xi[1] * xi[1] - xi[0] * xi[0]) / (2.0 * r2),
            (2, 2) => (xi[0] * xi[0] - xi[1] * xi[1]) / (2.0 * r2),
            _ => -xi[0] * xi[1] / r2,
        };
        Complex64::new(v, 0.0)
    }
    fn constants(&self) -> KernelConstants {
        KernelConstants { c0: 1.0 / (2.0 * PI), c1: 1.0 / PI, a1: 0.0, multiplier_sup: 0.5 }
    }
    fn homogeneous(&self) -> bool {
        true
    }
}

/// `K^ = 1`: the identity operator (a Dirac mass at the origin).
#[derive(Clone, Copy, Debug)]
pub struct Identity {
    pub dim: usize,
}

impl FundamentalKernel for Identity {
    fn name(&self) -> String {
        "identity".into()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn evaluate(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn multiplier(&self, _xi: &[f64]) -> Complex64 {
        Complex64::new(1.0, 0.0)
    }
    fn multiplier_at_zero(&self) -> Complex64 {
        Complex64::new(1.0, 0.0)
    }
    fn constants(&self) -> KernelConstants {
        KernelConstants { c0: 0.0, c1: 0.0, a1: 0.0, multiplier_sup: 1.0 }
    }
    fn homogeneous(&self) -> bool {
        true
    }
}

/// `K = 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroKernel {
    pub dim: usize,
}

impl FundamentalKernel for ZeroKernel {
    fn name(&self) -> String {
        "zero".into()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn evaluate(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn multiplier(&self, _xi: &[f64]) -> Complex64 {
        ZERO
    }
    fn constants(&self) -> KernelConstants {
        KernelConstants { c0: 0.0, c1: 0.0, a1: 0.0, multiplier_sup: 0.0 }
    }
    fn homogeneous(&self) -> bool {
        true
    }
}

/// One-dimensional multiplier given by a table of `(frequency, re, im)`
/// rows, linearly interpolated and held constant beyond the ends.
#[derive(Clone, Debug)]
pub struct TableKernel {
    name: String,
    rows: Vec<(f64, Complex64)>,
}

impl TableKernel {
    pub fn new(name: impl Into<String>, mut rows: Vec<(f64, Complex64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("multiplier table is empty".into()));
        }
        if rows.iter().any(|(f, m)| !(f.is_finite() && m.re.is_finite() && m.im.is_finite())) {
            return Err(Error::InvalidArgument("multiplier table has non-finite entries".into()));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { name: name.into(), rows })
    }

    /// Parse `frequency,real,imag` rows; a non-numeric first line is a header.
    pub fn from_csv_str(name: &str, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: std::result::Result<Vec<f64>, _> = f.iter().map(|s| s.parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.len() == 3 => rows.push((v[0], Complex64::new(v[1], v[2]))),
                Err(_) if n == 0 => continue,
                _ => return Err(Error::Parse(format!("multiplier table line {}: `{line}`", n + 1))),
            }
        }
        Self::new(name, rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
        Self::from_csv_str(name, &std::fs::read_to_string(path)?)
    }

    fn lookup(&self, f: f64) -> Complex64 {
        let r = &self.rows;
        if f <= r[0].0 {
            return r[0].1;
        }
        if f >= r[r.len() - 1].0 {
            return r[r.len() - 1].1;
        }
        let k = r.partition_point(|row| row.0 <= f);
        let (f0, m0) = r[k - 1];
        let (f1, m1) = r[k];
        let t = (f - f0) / (f1 - f0);
        m0 * (1.0 - t) + m1 * t
    }
}

impl FundamentalKernel for TableKernel {
    fn name(&self) -> String {
        format!("table:{}", self.name)
    }
    fn dim(&self) -> usize {
        1
    }
    fn evaluate(&self, _x: &[f64]) -> f64 {
        f64::NAN
    }
    fn multiplier(&self, xi: &[f64]) -> Complex64 {
        self.lookup(xi[0])
    }
    fn multiplier_at_zero(&self) -> Complex64 {
        self.lookup(0.0)
    }
    fn constants(&self) -> KernelConstants {
        let sup = self.rows.iter().map(|r| r.1.norm()).fold(0.0, f64::max);
        KernelConstants { c0: f64::INFINITY, c1: f64::INFINITY, a1: f64::INFINITY, multiplier_sup: sup }
    }
    fn pointwise(&self) -> bool {
        false
    }
    fn clamp_value(&self, _spacing: &[f64]) -> f64 {
        f64::NAN
    }
}

/// `delta^d K(delta x)` with multiplier `K^(xi / delta)`.
#[derive(Clone, Debug)]
pub struct Rescaled {
    inner: Kernel,
    delta: f64,
}

impl FundamentalKernel for Rescaled {
    fn name(&self) -> String {
        format!("{}@{}", self.inner.name(), self.delta)
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        let y: Vec<f64> = x.iter().map(|v| v * self.delta).collect();
        self.delta.powi(self.dim() as i32) * self.inner.evaluate(&y)
    }
    fn multiplier(&self, xi: &[f64]) -> Complex64 {
        let y: Vec<f64> = xi.iter().map(|v| v / self.delta).collect();
        self.inner.multiplier(&y)
    }
    fn multiplier_at_zero(&self) -> Complex64 {
        self.inner.multiplier_at_zero()
    }
    fn constants(&self) -> KernelConstants {
        self.inner.constants()
    }
    fn homogeneous(&self) -> bool {
        self.inner.homogeneous()
    }
    fn pointwise(&self) -> bool {
        self.inner.pointwise()
    }
    fn clamp_value(&self, spacing: &[f64]) -> f64 {
        let s: Vec<f64> = spacing.iter().map(|v| v * self.delta).collect();
        self.delta.powi(self.dim() as i32) * self.inner.clamp_value(&s)
    }
}

/// `K^delta(x) = delta^d K(delta x)`.
pub fn rescale_kernel(k: &Kernel, delta1: f64) -> Result<Kernel> {
    if !(delta1 > 0.0 && delta1.is_finite()) {
        return Err(Error::InvalidArgument(format!("rescale factor {delta1} must be positive")));
    }
    if delta1 == 1.0 {
        return Ok(k.clone());
    }
    Ok(Arc::new(Rescaled { inner: k.clone(), delta: delta1 }))
}

pub type KernelFactory = Box<dyn Fn(usize, &[usize]) -> Result<Kernel> + Send + Sync>;

struct KernelEntry {
    indices: usize,
    summary: &'static str,
    factory: KernelFactory,
}

/// Named kernel constructors. Names ending in `_` followed by index
/// letters (`riesz2d_ij`) are templates instantiated as `riesz2d_12`.
pub struct KernelRegistry {
    entries: BTreeMap<String, KernelEntry>,
}

impl KernelRegistry {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("hilbert", 0, "1/(pi x) on R", |dim, _| {
            expect_dim("hilbert", dim, 1)?;
            Ok(Arc::new(Hilbert) as Kernel)
        });
        r.register("riesz2d_ij", 2, "second derivatives of the planar log potential", |dim, ix| {
            expect_dim("riesz2d", dim, 2)?;
            Ok(Arc::new(Riesz2d::new(ix[0], ix[1])?) as Kernel)
        });
        r.register("identity", 0, "multiplier 1", |dim, _| Ok(Arc::new(Identity { dim }) as Kernel));
        r.register("zero", 0, "multiplier 0", |dim, _| Ok(Arc::new(ZeroKernel { dim }) as Kernel));
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        indices: usize,
        summary: &'static str,
        factory: impl Fn(usize, &[usize]) -> Result<Kernel> + Send + Sync + 'static,
    ) {
        self.entries.insert(name.to_string(), KernelEntry { indices, summary, factory: Box::new(factory) });
    }

    /// Registered names with their one-line summaries, sorted.
    pub fn catalog(&self) -> Vec<(String, &'static str)> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.summary)).collect()
    }

    pub fn create(&self, name: &str, dim: usize) -> Result<Kernel> {
        if let Some(e) = self.entries.get(name) {
            if e.indices == 0 {
                return (e.factory)(dim, &[]);
            }
        }
        for (key, e) in &self.entries {
            if e.indices == 0 {
                continue;
            }
            let prefix = &key[..key.len() - e.indices];
            if let Some(rest) = name.strip_prefix(prefix) {
                if rest.len() == e.indices && rest.chars().all(|c| c.is_ascii_digit()) {
                    let ix: Vec<usize> = rest.chars().map(|c| c as usize - '0' as usize).collect();
                    return (e.factory)(dim, &ix);
                }
            }
        }
        Err(Error::Unknown { kind: "kernel", name: name.to_string() })
    }
}

fn expect_dim(name: &str, dim: usize, want: usize) -> Result<()> {
    if dim != want {
        return Err(Error::InvalidArgument(format!("{name} lives in dimension {want}, not {dim}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub location: Vec<f64>,
    pub weight: f64,
}

/// Finite signed measure on the `x1` block: atoms plus an optional density.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedMeasure {
    pub dim: usize,
    pub atoms: Vec<Atom>,
    pub density: Option<GridFunction>,
}

impl SignedMeasure {
    pub fn zero(dim: usize) -> Self {
        Self { dim, atoms: Vec::new(), density: None }
    }

    pub fn dirac(location: Vec<f64>, weight: f64) -> Self {
        Self { dim: location.len(), atoms: vec![Atom { location, weight }], density: None }
    }

    pub fn from_atoms(dim: usize, atoms: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        let atoms: Vec<Atom> = atoms.into_iter().map(|(location, weight)| Atom { location, weight }).collect();
        if atoms.iter().any(|a| a.location.len() != dim || !a.weight.is_finite()) {
            return Err(Error::InvalidArgument("atom dimension or weight invalid".into()));
        }
        Ok(Self { dim, atoms, density: None })
    }

    pub fn from_density(density: GridFunction) -> Result<Self> {
        if density.components() != 1 {
            return Err(Error::InvalidArgument("density must be scalar".into()));
        }
        Ok(Self { dim: density.grid().dim(), atoms: Vec::new(), density: Some(density) })
    }

    pub fn has_atoms(&self) -> bool {
        !self.atoms.is_empty()
    }

    pub fn total_variation(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight.abs()).sum();
        let dens = self
            .density
            .as_ref()
            .map_or(0.0, |d| lebesgue_norm(d, 1.0, &Region::Full).unwrap_or(f64::INFINITY));
        atoms + dens
    }

    /// The measure `g(delta x)`: atoms move to `a / delta` with weight
    /// `delta^(-d) w`; a density keeps its node values on `target` (which
    /// must be the scaled image of its grid).
    pub fn rescaled(&self, delta: f64, target: Option<&Grid>) -> Result<SignedMeasure> {
        let s = delta.powi(-(self.dim as i32));
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom { location: a.location.iter().map(|v| v / delta).collect(), weight: a.weight * s })
            .collect();
        let density = match (&self.density, target) {
            (Some(d), Some(g)) => Some(d.on_grid(g.clone())?),
            (Some(d), None) => {
                let factors = vec![1.0 / delta; self.dim];
                Some(d.on_grid(d.grid().scaled(&factors)?)?)
            }
            (None, _) => None,
        };
        Ok(SignedMeasure { dim: self.dim, atoms, density })
    }

    /// Atoms must lie in the box of `grid`.
    pub fn check_inside(&self, grid: &Grid) -> Result<()> {
        let outside: Vec<&Atom> = self.atoms.iter().filter(|a| !grid.contains(&a.location)).collect();
        if outside.is_empty() {
            return Ok(());
        }
        let required = (0..self.dim)
            .map(|ax| outside.iter().map(|a| a.location[ax].abs()).fold(grid.half_width()[ax], f64::max))
            .collect();
        Err(Error::AtomsOutsideBox { required })
    }
}

/// Spectral action of `k` on a scalar grid function of the same dimension.
pub fn apply(k: &dyn FundamentalKernel, u: &GridFunction) -> Result<GridFunction> {
    let g = u.grid();
    if g.dim() != k.dim() || u.components() != 1 {
        return Err(Error::GridMismatch(format!(
            "kernel of dimension {} applied to a {}-component function on {} axes",
            k.dim(),
            u.components(),
            g.dim()
        )));
    }
    let m = spectral::multiplier_grid(g, &|xi| k.multiplier(xi), k.multiplier_at_zero())?;
    let mut z = spectral::forward(u.values(), g.points());
    z.iter_mut().zip(&m).for_each(|(a, b)| *a *= b);
    let (re, residue) = spectral::inverse_real(z, g.points());
    let l2 = u.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    let limit = 1e-10 * l2;
    if residue > limit && residue > 1e-300 {
        return Err(Error::ImaginaryResidue { residue, limit });
    }
    GridFunction::scalar(g.clone(), re)
}

/// Spectral action along the `x1` axes of a scalar function on the full grid.
pub fn apply_block1(k: &dyn FundamentalKernel, u: &GridFunction) -> Result<GridFunction> {
    let g = u.grid();
    let g1 = g.block1()?;
    if g1.dim() != k.dim() || u.components() != 1 {
        return Err(Error::GridMismatch("kernel dimension differs from n1".into()));
    }
    let m = spectral::multiplier_grid(&g1, &|xi| k.multiplier(xi), k.multiplier_at_zero())?;
    let inner = g.len() / g1.len();
    let mut z = spectral::to_complex(u.values());
    spectral::fft_axes(&mut z, g.points(), 0..g.n1(), false);
    for (i, c) in z.iter_mut().enumerate() {
        *c *= m[i / inner];
    }
    spectral::fft_axes(&mut z, g.points(), 0..g.n1(), true);
    let residue = z.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    let limit = 1e-10 * u.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    if residue > limit && residue > 1e-300 {
        return Err(Error::ImaginaryResidue { residue, limit });
    }
    GridFunction::scalar(g.clone(), z.into_iter().map(|c| c.re).collect())
}

/// Result of applying a kernel to a measure: values are meaningful where
/// `mask` is true (outside the one-spacing clamp around atoms).
#[derive(Clone, Debug)]
pub struct MeasureField {
    pub values: GridFunction,
    pub mask: Vec<bool>,
    /// Some atom sits exactly on a node.
    pub atom_on_node: bool,
}

/// `K * mu` on `grid`: atoms by direct evaluation with a clamp of one
/// spacing, the density spectrally.
pub fn apply_to_measure(k: &dyn FundamentalKernel, mu: &SignedMeasure, grid: &Grid) -> Result<MeasureField> {
    if grid.dim() != k.dim() || mu.dim != k.dim() {
        return Err(Error::GridMismatch("measure, kernel and grid dimensions differ".into()));
    }
    mu.check_inside(grid)?;
    let mut values = match &mu.density {
        Some(d) => {
            if d.grid() != grid {
                return Err(Error::GridMismatch("density lives on a different grid".into()));
            }
            apply(k, d)?.into_values()
        }
        None => vec![0.0; grid.len()],
    };
    let mut mask = vec![true; grid.len()];
    let mut on_node = false;
    if mu.has_atoms() {
        if !k.pointwise() {
            return Err(Error::InvalidArgument(format!("kernel {} cannot act on atoms", k.name())));
        }
        let h = grid.min_spacing();
        let spacing = grid.spacings();
        let clamp = k.clamp_value(&spacing);
        let d = grid.dim();
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        for (i, v) in values.iter_mut().enumerate() {
            grid.node(i, &mut x);
            for a in &mu.atoms {
                let mut r2 = 0.0;
                for ax in 0..d {
                    y[ax] = x[ax] - a.location[ax];
                    r2 += y[ax] * y[ax];
                }
                let r = r2.sqrt();
                let kv = if r >= h {
                    k.evaluate(&y)
                } else {
                    mask[i] = false;
                    if r == 0.0 {
                        on_node = true;
                        clamp
                    } else {
                        y.iter_mut().for_each(|c| *c *= h / r);
                        k.evaluate(&y)
                    }
                };
                *v += a.weight * kv;
            }
        }
    }
    Ok(MeasureField { values: GridFunction::scalar(grid.clone(), values)?, mask, atom_on_node: on_node })
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelValidation {
    pub c0_meas: f64,
    pub c1_meas: f64,
    pub a1_meas: f64,
    pub multiplier_sup_meas: f64,
    pub declared: KernelConstants,
    pub valid: bool,
    pub failures: Vec<String>,
}

/// Measure the fundamental-type constants on a deterministic cloud of
/// about `cloud_size` points and compare with the declared ones.
pub fn validate_kernel(k: &dyn FundamentalKernel, cloud_size: usize) -> KernelValidation {
    let d = k.dim();
    let ndir = if d == 1 { 2 } else { ((cloud_size as f64).sqrt().ceil() as usize).max(8) };
    let nrad = (cloud_size / ndir).max(2);
    let dirs = sphere_cloud(d, ndir);
    let radii: Vec<f64> = (0..nrad).map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / (nrad - 1) as f64)).collect();

    let mut c0: f64 = 0.0;
    let mut c1: f64 = 0.0;
    let mut finite = true;
    let mut x = vec![0.0; d];
    let mut xp = vec![0.0; d];
    for dir in &dirs {
        for &r in &radii {
            x.iter_mut().zip(dir).for_each(|(v, u)| *v = r * u);
            let v = k.evaluate(&x);
            finite &= v.is_finite();
            c0 = c0.max(v.abs() * r.powi(d as i32));
            let step = 1e-5 * r;
            let mut g2 = 0.0;
            for a in 0..d {
                xp.copy_from_slice(&x);
                xp[a] += step;
                let fp = k.evaluate(&xp);
                xp[a] -= 2.0 * step;
                let fm = k.evaluate(&xp);
                let da = (fp - fm) / (2.0 * step);
                g2 += da * da;
            }
            finite &= g2.is_finite();
            c1 = c1.max(g2.sqrt() * r.powi(d as i32 + 1));
        }
    }

    let ring_radii = [0.01, 0.1, 1.0, 10.0, 100.0];
    let mut a1: f64 = 0.0;
    for (p, &r1) in ring_radii.iter().enumerate() {
        for &r2 in &ring_radii[p + 1..] {
            let v = ring_integral(k, r1, r2);
            finite &= v.is_finite();
            a1 = a1.max(v.abs());
        }
    }

    let mut msup: f64 = 0.0;
    let mut xi = vec![0.0; d];
    for dir in &dirs {
        for i in 0..nrad {
            let r = 10f64.powf(-3.0 + 6.0 * i as f64 / (nrad - 1) as f64);
            xi.iter_mut().zip(dir).for_each(|(v, u)| *v = r * u);
            let m = k.multiplier(&xi).norm();
            finite &= m.is_finite();
            msup = msup.max(m);
        }
    }

    let declared = k.constants();
    let mut failures = Vec::new();
    if !finite {
        failures.push("non-finite evaluation off the origin".to_string());
    }
    let within = |meas: f64, decl: f64| meas <= decl * (1.0 + 1e-6) + 1e-12;
    for (name, meas, decl) in [
        ("C0", c0, declared.c0),
        ("C1", c1, declared.c1),
        ("A1", a1, declared.a1),
        ("multiplier_sup", msup, declared.multiplier_sup),
    ] {
        if !within(meas, decl) {
            failures.push(format!("{name}: measured {meas} exceeds declared {decl}"));
        }
    }
    KernelValidation {
        c0_meas: c0,
        c1_meas: c1,
        a1_meas: a1,
        multiplier_sup_meas: msup,
        declared,
        valid: failures.is_empty(),
        failures,
    }
}

/// `int_{r1 < |x| < r2} K` in polar coordinates (log-radial Simpson rule,
/// trapezoidal angles).
pub fn ring_integral(k: &dyn FundamentalKernel, r1: f64, r2: f64) -> f64 {
    let d = k.dim();
    let dirs = match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => sphere_cloud(2, 256),
        _ => sphere_cloud(d, 512),
    };
    let w_dir = sphere_area(d) / dirs.len() as f64;
    let n = 256;
    let (t0, t1) = (r1.ln(), r2.ln());
    let dt = (t1 - t0) / n as f64;
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    for s in 0..=n {
        let rho = (t0 + s as f64 * dt).exp();
        let mut ang = 0.0;
        for dir in &dirs {
            x.iter_mut().zip(dir).for_each(|(v, u)| *v = rho * u);
            ang += k.evaluate(&x);
        }
        let f = ang * w_dir * rho.powi(d as i32);
        let c = if s == 0 || s == n { 1.0 } else if s % 2 == 1 { 4.0 } else { 2.0 };
        total += c * f;
    }
    total * dt / 3.0
}

#[derive(Clone, Debug, Serialize)]
pub struct CzReport {
    /// `(p, max ||Su||_p / ||u||_p)` for `p` in `{2, 3/2, 3}`.
    pub strong_p_constants: Vec<(f64, f64)>,
    pub weak_1_constant: f64,
}

/// Empirical Calderon-Zygmund constants over a test family.
pub fn measure_cz_bounds(k: &dyn FundamentalKernel, family: &[GridFunction]) -> Result<CzReport> {
    if family.is_empty() {
        return Err(Error::InvalidArgument("empty test family".into()));
    }
    let ps = [2.0, 1.5, 3.0];
    let mut strong = vec![0.0f64; ps.len()];
    let mut weak: f64 = 0.0;
    for u in family {
        let su = apply(k, u)?;
        for (c, &p) in strong.iter_mut().zip(&ps) {
            let nu = lebesgue_norm(u, p, &Region::Full)?;
            if nu > 0.0 {
                *c = c.max(lebesgue_norm(&su, p, &Region::Full)? / nu);
            }
        }
        let n1 = lebesgue_norm(u, 1.0, &Region::Full)?;
        if n1 > 0.0 {
            weak = weak.max(weak_norm(&su, 1.0, &Region::Full)?.value / n1);
        }
    }
    Ok(CzReport { strong_p_constants: ps.iter().copied().zip(strong).collect(), weak_1_constant: weak })
}
