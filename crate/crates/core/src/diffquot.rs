//! Difference-quotient bounds for functions whose derivatives are sums of
//! `gamma(x2) (R g)(x1)`, with isotropic and anisotropic distances.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::sphere_cloud;
use crate::error::{Error, Result};
use crate::grid::{lebesgue_norm, Grid, GridFunction, Region};
use crate::io::{read_grid_function, sample_expression};
use crate::maximal::{tensor_maximal_product, BumpFamily, BumpRef, Ladder, Upsilon};
use crate::singular::{apply_to_measure, rescale_kernel, Kernel, KernelRegistry, SignedMeasure};
use crate::weak_lebesgue::weak_norm_masked;

/// `Diag(delta1, ..., delta1, delta2, ..., delta2)` stored through the
/// logarithms of its entries, so that entries far below the smallest
/// positive double stay usable in logarithmic expressions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyMatrix {
    pub ln_delta1: f64,
    pub ln_delta2: f64,
    pub n1: usize,
    pub n2: usize,
}

impl AnisotropyMatrix {
    pub fn new(delta1: f64, delta2: f64, n1: usize, n2: usize) -> Result<Self> {
        if !(delta1 > 0.0 && delta2 > 0.0 && delta1.is_finite() && delta2.is_finite()) {
            return Err(Error::InvalidArgument(format!("anisotropy entries must be positive, got ({delta1}, {delta2})")));
        }
        Self::from_ln(delta1.ln(), delta2.ln(), n1, n2)
    }

    pub fn from_ln(ln_delta1: f64, ln_delta2: f64, n1: usize, n2: usize) -> Result<Self> {
        if !(ln_delta1.is_finite() && ln_delta2.is_finite()) || n1 + n2 == 0 {
            return Err(Error::InvalidArgument("anisotropy logarithms must be finite".into()));
        }
        Ok(Self { ln_delta1, ln_delta2, n1, n2 })
    }

    pub fn identity(n1: usize, n2: usize) -> Self {
        Self { ln_delta1: 0.0, ln_delta2: 0.0, n1, n2 }
    }

    pub fn delta1(&self) -> f64 {
        self.ln_delta1.exp()
    }

    pub fn delta2(&self) -> f64 {
        self.ln_delta2.exp()
    }

    pub fn is_ordered(&self) -> bool {
        self.ln_delta1 <= self.ln_delta2
    }

    pub fn is_identity(&self) -> bool {
        self.ln_delta1 == 0.0 && self.ln_delta2 == 0.0
    }

    /// Diagonal entry `A_jj` (0-based `j`).
    pub fn entry(&self, j: usize) -> f64 {
        if j < self.n1 {
            self.delta1()
        } else {
            self.delta2()
        }
    }

    /// `ln |A^-1 d|`, `-inf` for `d = 0`.
    pub fn ln_inv_norm(&self, d: &[f64]) -> f64 {
        let s1: f64 = d[..self.n1].iter().map(|v| v * v).sum();
        let s2: f64 = d[self.n1..].iter().map(|v| v * v).sum();
        let a = if s1 > 0.0 { s1.ln() - 2.0 * self.ln_delta1 } else { f64::NEG_INFINITY };
        let b = if s2 > 0.0 { s2.ln() - 2.0 * self.ln_delta2 } else { f64::NEG_INFINITY };
        let m = a.max(b);
        if m == f64::NEG_INFINITY {
            return m;
        }
        0.5 * (m + ((a - m).exp() + (b - m).exp()).ln())
    }

    /// `|A^-1 d|`, possibly `+inf`.
    pub fn inv_norm(&self, d: &[f64]) -> f64 {
        self.ln_inv_norm(d).exp()
    }

    /// `log(1 + |A^-1 d|)` without overflow.
    pub fn log1p_inv_norm(&self, d: &[f64]) -> f64 {
        let l = self.ln_inv_norm(d);
        if l > 0.0 {
            l + (-l).exp().ln_1p()
        } else {
            l.exp().ln_1p()
        }
    }
}

/// One summand `gamma(x2) (R g)(x1)` of `d_axis b^component`.
#[derive(Clone, Debug)]
pub struct DerivativeTerm {
    /// 0-based component of `b` in `R^N`.
    pub component: usize,
    /// 0-based derivative direction in `R^N`.
    pub axis: usize,
    pub k: usize,
    pub kernel: Kernel,
    pub gamma: GridFunction,
    pub datum: SignedMeasure,
}

impl DerivativeTerm {
    /// `(component block, derivative block)`, each 1 or 2.
    pub fn block(&self, n1: usize) -> (u8, u8) {
        (if self.component < n1 { 1 } else { 2 }, if self.axis < n1 { 1 } else { 2 })
    }

    pub fn label(&self, n1: usize) -> String {
        let (r, c) = self.block(n1);
        format!("block{r}{c}:b{}:d{}:k{}:{}", self.component + 1, self.axis + 1, self.k, self.kernel.name())
    }
}

#[derive(Clone, Debug)]
pub struct DerivativeStructure {
    pub grid: Grid,
    pub terms: Vec<DerivativeTerm>,
}

#[derive(Deserialize)]
struct Manifest {
    #[serde(default)]
    term: Vec<ManifestRow>,
}

#[derive(Deserialize)]
struct ManifestRow {
    block: [u8; 2],
    i: usize,
    j: usize,
    #[serde(default = "one")]
    k: usize,
    kernel: String,
    gamma: String,
    datum: String,
}

fn one() -> usize {
    1
}

impl DerivativeStructure {
    pub fn new(grid: Grid, terms: Vec<DerivativeTerm>) -> Result<Self> {
        let s = Self { grid, terms };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(grid: Grid) -> Self {
        Self { grid, terms: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let (n1, n) = (g.n1(), g.dim());
        if n1 == 0 || n1 == n {
            return Err(Error::InvalidGrid("derivative structures need both coordinate blocks".into()));
        }
        let g1 = g.block1()?;
        let g2 = g.block2()?;
        for t in &self.terms {
            if t.axis >= n || t.component >= n {
                return Err(Error::InvalidArgument(format!("term index out of range: {}", t.label(n1))));
            }
            if t.kernel.dim() != n1 || t.datum.dim != n1 {
                return Err(Error::GridMismatch(format!("{} does not act on the x1 block", t.label(n1))));
            }
            if t.gamma.grid() != &g2 || t.gamma.components() != 1 {
                return Err(Error::GridMismatch(format!("gamma of {} is not a scalar on the x2 block", t.label(n1))));
            }
            if let Some(d) = &t.datum.density {
                if d.grid() != &g1 {
                    return Err(Error::GridMismatch(format!("datum of {} is not on the x1 block", t.label(n1))));
                }
            }
            if t.datum.has_atoms() && t.block(n1) != (2, 1) {
                return Err(Error::InvalidArgument(format!("{} carries atoms outside block (2,1)", t.label(n1))));
            }
        }
        Ok(())
    }

    /// Parse a TOML manifest of `[[term]]` rows with fields `block`, `i`,
    /// `j`, `k`, `kernel`, `gamma` and `datum`. Indices are 1-based within
    /// their blocks. Sources are formulas in the global coordinate names
    /// `x1..xN`, `file:<path>` (relative to `base`), or for data
    /// `atoms:<loc...> <weight>; ...`.
    pub fn from_manifest_str(text: &str, grid: &Grid, kernels: &KernelRegistry, base: &Path) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let n1 = grid.n1();
        let g1 = grid.block1()?;
        let g2 = grid.block2()?;
        let mut terms = Vec::with_capacity(m.term.len());
        for row in m.term {
            let [rb, cb] = row.block;
            if !(1..=2).contains(&rb) || !(1..=2).contains(&cb) || row.i == 0 || row.j == 0 {
                return Err(Error::Parse(format!("bad block or index in row {:?}/{}/{}", row.block, row.i, row.j)));
            }
            let component = if rb == 1 { row.i - 1 } else { n1 + row.i - 1 };
            let axis = if cb == 1 { row.j - 1 } else { n1 + row.j - 1 };
            let kernel = kernels.create(&row.kernel, n1)?;
            let gamma = match row.gamma.strip_prefix("file:") {
                Some(p) => read_grid_function(&base.join(p.trim()))?,
                None => sample_expression(&row.gamma, &g2, n1)?,
            };
            let datum = parse_datum(&row.datum, &g1, base)?;
            terms.push(DerivativeTerm { component, axis, k: row.k, kernel, gamma, datum });
        }
        Self::new(grid.clone(), terms)
    }

    pub fn load(path: &Path, grid: &Grid, kernels: &KernelRegistry) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_manifest_str(&text, grid, kernels, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn concat(&self, other: &DerivativeStructure) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("structures on different grids".into()));
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(Self { grid: self.grid.clone(), terms })
    }

    pub fn filter(&self, keep: impl Fn(&DerivativeTerm) -> bool) -> Self {
        Self { grid: self.grid.clone(), terms: self.terms.iter().filter(|t| keep(t)).cloned().collect() }
    }

    /// Terms of block `(component block, derivative block)`.
    pub fn block(&self, b: (u8, u8)) -> Self {
        let n1 = self.grid.n1();
        self.filter(|t| t.block(n1) == b)
    }

    pub fn scale_data(&self, c: f64) -> Result<Self> {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.datum.atoms.iter_mut().for_each(|a| a.weight *= c);
            if let Some(d) = &t.datum.density {
                t.datum.density = Some(d.scale(c)?);
            }
        }
        Ok(out)
    }

    /// `sum ||gamma||_p ||g||_M` over the terms in each derivative block.
    pub fn structural_norms(&self, p: f64) -> Result<(f64, f64)> {
        let n1 = self.grid.n1();
        let mut s = (0.0, 0.0);
        for t in &self.terms {
            let v = lebesgue_norm(&t.gamma, p, &Region::Full)? * t.datum.total_variation();
            if t.axis < n1 {
                s.0 += v;
            } else {
                s.1 += v;
            }
        }
        Ok(s)
    }

    /// As [`Self::structural_norms`] with `||g||_p` in place of the total
    /// variation; atoms make the value infinite.
    pub fn structural_lp_norms(&self, p: f64) -> Result<(f64, f64)> {
        let n1 = self.grid.n1();
        let mut s = (0.0, 0.0);
        for t in &self.terms {
            let g = if t.datum.has_atoms() {
                f64::INFINITY
            } else {
                t.datum.density.as_ref().map_or(Ok(0.0), |d| lebesgue_norm(d, p, &Region::Full))?
            };
            let gm = lebesgue_norm(&t.gamma, p, &Region::Full)?;
            let v = if gm == 0.0 || g == 0.0 { 0.0 } else { gm * g };
            if t.axis < n1 {
                s.0 += v;
            } else {
                s.1 += v;
            }
        }
        Ok(s)
    }

    /// `sum_k gamma(x2) (R g)(x1)` for derivative direction `axis` of
    /// `component`, with the clamp mask of any atoms.
    pub fn reconstruct(&self, component: usize, axis: usize) -> Result<(GridFunction, Vec<bool>)> {
        let g1 = self.grid.block1()?;
        let len2 = self.grid.len() / g1.len();
        let mut out = vec![0.0; self.grid.len()];
        let mut mask = vec![true; self.grid.len()];
        for t in self.terms.iter().filter(|t| t.component == component && t.axis == axis) {
            let rg = apply_to_measure(t.kernel.as_ref(), &t.datum, &g1)?;
            for (i, v) in out.iter_mut().enumerate() {
                *v += rg.values.value(i / len2) * t.gamma.value(i % len2);
                if !rg.mask[i / len2] {
                    mask[i] = false;
                }
            }
        }
        Ok((GridFunction::scalar(self.grid.clone(), out)?, mask))
    }
}

fn parse_datum(src: &str, g1: &Grid, base: &Path) -> Result<SignedMeasure> {
    if let Some(p) = src.strip_prefix("file:") {
        return SignedMeasure::from_density(read_grid_function(&base.join(p.trim()))?);
    }
    if let Some(list) = src.strip_prefix("atoms:") {
        let d = g1.dim();
        let mut atoms = Vec::new();
        for item in list.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let nums: Vec<f64> = item
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad atom '{item}'"))))
                .collect::<Result<_>>()?;
            if nums.len() != d + 1 {
                return Err(Error::Parse(format!("atom '{item}' needs {d} coordinates and a weight")));
            }
            atoms.push((nums[..d].to_vec(), nums[d]));
        }
        return SignedMeasure::from_atoms(d, atoms);
    }
    SignedMeasure::from_density(sample_expression(src, g1, 0)?)
}

/// Members `h1(xi1/2 - w1) {w1}^j` and `h2(xi2/2 - w2) {w2}^j` paired by the
/// direction `xi`.
#[derive(Clone, Debug)]
pub struct UpsilonFamily {
    pub axis: usize,
    pub directions: Vec<Vec<f64>>,
    pub block1: BumpFamily,
    pub block2: BumpFamily,
}

impl UpsilonFamily {
    pub fn pairs(&self) -> Vec<(BumpRef, BumpRef)> {
        self.block1.members.iter().cloned().zip(self.block2.members.iter().cloned()).collect()
    }
}

/// Upsilon families for 0-based derivative axis `j` over `direction_samples`
/// directions of the unit sphere of `R^(n1+n2)`.
pub fn build_upsilon_family(j: usize, n1: usize, n2: usize, direction_samples: usize) -> Result<UpsilonFamily> {
    let n = n1 + n2;
    if j >= n {
        return Err(Error::InvalidArgument(format!("axis {j} out of range for dimension {n}")));
    }
    if n1 == 0 || n2 == 0 || direction_samples == 0 {
        return Err(Error::InvalidArgument("both blocks and at least one direction are required".into()));
    }
    let directions = sphere_cloud(n, direction_samples);
    upsilon_for_directions(j, n1, directions)
}

pub fn upsilon_for_directions(j: usize, n1: usize, directions: Vec<Vec<f64>>) -> Result<UpsilonFamily> {
    let mut m1: Vec<BumpRef> = Vec::with_capacity(directions.len());
    let mut m2: Vec<BumpRef> = Vec::with_capacity(directions.len());
    for xi in &directions {
        let s1: Vec<f64> = xi[..n1].iter().map(|v| v / 2.0).collect();
        let s2: Vec<f64> = xi[n1..].iter().map(|v| v / 2.0).collect();
        let (w1, w2) = if j < n1 { (Some(j), None) } else { (None, Some(j - n1)) };
        m1.push(Arc::new(Upsilon::new(s1, w1)));
        m2.push(Arc::new(Upsilon::new(s2, w2)));
    }
    Ok(UpsilonFamily { axis: j, directions, block1: BumpFamily::new(m1)?, block2: BumpFamily::new(m2)? })
}

/// Nonnegative bound function with its anisotropy and contributing terms.
#[derive(Clone, Debug)]
pub struct UField {
    pub values: GridFunction,
    pub mask: Vec<bool>,
    pub matrix: AnisotropyMatrix,
    pub provenance: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct UOptions {
    pub direction_samples: usize,
    pub ladder_ratio: f64,
}

impl Default for UOptions {
    fn default() -> Self {
        Self { direction_samples: 64, ladder_ratio: 2.0 }
    }
}

/// Isotropic bound: [`big_u`] with `A = I`.
pub fn big_v(ds: &DerivativeStructure, direction_samples: usize) -> Result<UField> {
    let a = AnisotropyMatrix::identity(ds.grid.n1(), ds.grid.n2());
    big_u(ds, &a, direction_samples)
}

pub fn big_u(ds: &DerivativeStructure, a: &AnisotropyMatrix, direction_samples: usize) -> Result<UField> {
    big_u_with(ds, a, &UOptions { direction_samples, ..UOptions::default() })
}

/// The `z = A^-1 x` grid on which the rescaled structure lives.
pub fn z_grid(grid: &Grid, a: &AnisotropyMatrix) -> Result<Grid> {
    let n1 = grid.n1();
    let factors: Vec<f64> = (0..grid.dim()).map(|ax| 1.0 / a.entry(ax)).collect();
    if factors.iter().any(|f| !f.is_finite()) || (0..grid.dim()).any(|ax| !(grid.half_width()[ax] * factors[ax]).is_finite()) {
        return Err(Error::InvalidArgument(format!("anisotropy too extreme for a grid (n1 = {n1})")));
    }
    grid.scaled(&factors)
}

/// `U(x) = V(A^-1 x)` where `V` is the tensor maximal bound of the rescaled
/// structure `A_jj gamma(delta2 z2) (R^delta1 g(delta1 .))(z1)`. Node `i` of
/// the `x` grid maps to node `i` of the `z` grid.
pub fn big_u_with(ds: &DerivativeStructure, a: &AnisotropyMatrix, opts: &UOptions) -> Result<UField> {
    ds.validate()?;
    let g = &ds.grid;
    if a.n1 != g.n1() || a.n2 != g.n2() {
        return Err(Error::GridMismatch("anisotropy blocks differ from the grid".into()));
    }
    let zg = z_grid(g, a)?;
    let zg1 = zg.block1()?;
    let zg2 = zg.block2()?;
    let max_half = zg.half_width().iter().cloned().fold(0.0, f64::max);
    let ladder = Ladder::geometric(zg.min_spacing(), max_half, opts.ladder_ratio)?;
    let (d1, d2) = (a.delta1(), a.delta2());

    let mut axes: Vec<usize> = ds.terms.iter().map(|t| t.axis).collect();
    axes.sort_unstable();
    axes.dedup();
    let families: Vec<(usize, Vec<(BumpRef, BumpRef)>)> = axes
        .iter()
        .map(|&j| Ok((j, build_upsilon_family(j, g.n1(), g.n2(), opts.direction_samples)?.pairs())))
        .collect::<Result<_>>()?;

    let len2 = zg2.len();
    let parts: Vec<(Vec<f64>, Vec<bool>)> = ds
        .terms
        .par_iter()
        .map(|t| {
            let k = rescale_kernel(&t.kernel, d1)?;
            let datum = t.datum.rescaled(d1, Some(&zg1))?;
            let rg = apply_to_measure(k.as_ref(), &datum, &zg1)?;
            let factor = a.entry(t.axis);
            let left = rg.values.scale(factor)?;
            let gamma = if d2 == 1.0 { t.gamma.clone() } else { t.gamma.on_grid(zg2.clone())? };
            let pairs = &families.iter().find(|f| f.0 == t.axis).expect("family per axis").1;
            let v = tensor_maximal_product(pairs, &left, &gamma, &ladder)?;
            let mask = (0..zg.len()).map(|i| rg.mask[i / len2]).collect();
            Ok((v, mask))
        })
        .collect::<Result<_>>()?;

    let mut values = vec![0.0; g.len()];
    let mut mask = vec![true; g.len()];
    for (v, m) in &parts {
        values.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        mask.iter_mut().zip(m).for_each(|(a, b)| *a &= b);
    }
    Ok(UField {
        values: GridFunction::scalar(g.clone(), values)?,
        mask,
        matrix: *a,
        provenance: ds.terms.iter().map(|t| t.label(g.n1())).collect(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffQuotReport {
    pub pass_rate: f64,
    pub worst_ratio: f64,
    pub pairs: usize,
    pub tolerance: f64,
}

/// Relative slack of the pairwise check.
pub const PAIR_TOLERANCE: f64 = 0.05;

fn sample_pairs(
    grid: &Grid,
    mask: &[bool],
    pair_count: usize,
    min_separation: f64,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let live: Vec<usize> = (0..grid.len()).filter(|&i| mask[i]).collect();
    if live.len() < 2 {
        return Err(Error::AllMasked);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pair_count);
    let mut tries = 0usize;
    let d = grid.dim();
    let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
    while out.len() < pair_count {
        tries += 1;
        if tries > 100 * pair_count + 1000 {
            return Err(Error::InvalidArgument(format!("no pairs at separation {min_separation}")));
        }
        let i = live[rng.gen_range(0..live.len())];
        let j = live[rng.gen_range(0..live.len())];
        grid.node(i, &mut x);
        grid.node(j, &mut y);
        let r: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if r >= min_separation && r > 0.0 {
            out.push((i, j));
        }
    }
    Ok(out)
}

/// Check `|f(x) - f(y)| <= |A^-1 (x - y)| (U(x) + U(y))` on random pairs.
pub fn verify_difference_quotient(
    f: &GridFunction,
    u: &UField,
    pair_count: usize,
    min_separation: f64,
    seed: u64,
) -> Result<DiffQuotReport> {
    let g = f.grid();
    if g != u.values.grid() || f.components() != 1 {
        return Err(Error::GridMismatch("f and U must be scalars on the same grid".into()));
    }
    let pairs = sample_pairs(g, &u.mask, pair_count, min_separation, seed)?;
    let d = g.dim();
    let (mut x, mut y, mut diff) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut pass = 0usize;
    let mut worst: f64 = 0.0;
    for &(i, j) in &pairs {
        g.node(i, &mut x);
        g.node(j, &mut y);
        for k in 0..d {
            diff[k] = x[k] - y[k];
        }
        let lhs = (f.value(i) - f.value(j)).abs();
        let rhs = u.matrix.inv_norm(&diff) * (u.values.value(i) + u.values.value(j));
        if lhs <= rhs * (1.0 + PAIR_TOLERANCE) {
            pass += 1;
        }
        let ratio = if rhs > 0.0 { lhs / rhs } else if lhs > 0.0 { f64::INFINITY } else { 0.0 };
        worst = worst.max(ratio);
    }
    Ok(DiffQuotReport {
        pass_rate: pass as f64 / pairs.len() as f64,
        worst_ratio: worst,
        pairs: pairs.len(),
        tolerance: PAIR_TOLERANCE,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OperatorBoundsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub p: f64,
    pub m1_measured: f64,
    pub m1_bound: f64,
    pub lp_measured: f64,
    pub lp_bound: f64,
}

impl OperatorBoundsReport {
    pub fn m1_ratio(&self) -> Option<f64> {
        (self.m1_bound > 0.0 && self.m1_bound.is_finite()).then(|| self.m1_measured / self.m1_bound)
    }
}

/// Measured norms of `U` next to the structural quantities
/// `delta1 sum_{j<=n1} ||gamma|| ||g|| + delta2 sum_{j>n1} ||gamma|| ||g||`.
pub fn operator_bounds(
    ds: &DerivativeStructure,
    a: &AnisotropyMatrix,
    region: &Region,
    p: f64,
    direction_samples: usize,
) -> Result<OperatorBoundsReport> {
    if !(p > 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    let (d1, d2) = (a.delta1(), a.delta2());
    let (s1, s2) = ds.structural_norms(p)?;
    let (l1, l2) = ds.structural_lp_norms(p)?;
    if ds.terms.is_empty() {
        return Ok(OperatorBoundsReport { delta1: d1, delta2: d2, p, m1_measured: 0.0, m1_bound: 0.0, lp_measured: 0.0, lp_bound: 0.0 });
    }
    let u = big_u(ds, a, direction_samples)?;
    let m1 = weak_norm_masked(&u.values, 1.0, region, Some(&u.mask))?.value;
    let lp = crate::grid::lebesgue_norm_masked(&u.values, p, &Region::Full, Some(&u.mask))?;
    let combine = |x: f64, y: f64| {
        let a = if x == 0.0 { 0.0 } else { d1 * x };
        let b = if y == 0.0 { 0.0 } else { d2 * y };
        a + b
    };
    Ok(OperatorBoundsReport {
        delta1: d1,
        delta2: d2,
        p,
        m1_measured: m1,
        m1_bound: combine(s1, s2),
        lp_measured: lp,
        lp_bound: combine(l1, l2),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OperatorSweep {
    pub points: Vec<OperatorBoundsReport>,
    /// Largest relative deviation of `measured / bound` from its mean.
    pub ratio_spread: f64,
    pub stable: bool,
}

/// Relative band for the measured-to-structural ratio across a sweep.
pub const SWEEP_BAND: f64 = 0.5;

pub fn operator_bound_sweep(
    ds: &DerivativeStructure,
    sweep: &[(f64, f64)],
    region: &Region,
    p: f64,
    direction_samples: usize,
) -> Result<OperatorSweep> {
    let (n1, n2) = (ds.grid.n1(), ds.grid.n2());
    let points: Vec<OperatorBoundsReport> = sweep
        .iter()
        .map(|&(d1, d2)| operator_bounds(ds, &AnisotropyMatrix::new(d1, d2, n1, n2)?, region, p, direction_samples))
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = points.iter().filter_map(OperatorBoundsReport::m1_ratio).collect();
    let spread = relative_spread(&ratios);
    Ok(OperatorSweep { stable: spread <= SWEEP_BAND, ratio_spread: spread, points })
}

/// `max |r - mean| / mean`, 0 for fewer than two values.
pub fn relative_spread(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    values.iter().map(|r| (r - mean).abs() / mean).fold(0.0, f64::max)
}

/// Classical maximal function of a measure on a 1-D grid over a ladder:
/// `sup_eps |mu|([x - eps, x + eps]) / (2 eps)`.
pub fn measure_maximal_1d(mu: &SignedMeasure, grid: &Grid, ladder: &Ladder) -> Result<Vec<f64>> {
    if grid.dim() != 1 || mu.dim != 1 {
        return Err(Error::InvalidArgument("1-D measures only".into()));
    }
    let h = grid.spacing(0);
    let n = grid.len();
    let dens: Vec<f64> = match &mu.density {
        Some(d) if d.grid() == grid => d.values().iter().map(|v| v.abs() * h).collect(),
        Some(_) => return Err(Error::GridMismatch("density on a different grid".into())),
        None => vec![0.0; n],
    };
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + dens[i];
    }
    let mut out = vec![0.0f64; n];
    for (i, o) in out.iter_mut().enumerate() {
        let x = grid.coord(0, i);
        for &eps in &ladder.radii {
            let m = (eps / h + 1e-9).floor() as usize;
            let lo = i.saturating_sub(m);
            let hi = (i + m + 1).min(n);
            let mut mass = prefix[hi] - prefix[lo];
            mass += mu.atoms.iter().filter(|a| (a.location[0] - x).abs() <= eps).map(|a| a.weight.abs()).sum::<f64>();
            *o = o.max(mass / (2.0 * eps));
        }
    }
    Ok(out)
}

/// Cross-check of `|f(x) - f(y)| <= C |x - y| (M Df(x) + M Df(y))` for a
/// 1-D function of bounded variation with derivative measure `df`.
pub fn bv_difference_check(
    f: &GridFunction,
    df: &SignedMeasure,
    constant: f64,
    pair_count: usize,
    min_separation: f64,
    seed: u64,
) -> Result<DiffQuotReport> {
    let g = f.grid();
    let md = measure_maximal_1d(df, g, &Ladder::dyadic(g))?;
    let u = UField {
        values: GridFunction::scalar(g.clone(), md.into_iter().map(|v| constant * v).collect())?,
        mask: vec![true; g.len()],
        matrix: AnisotropyMatrix::identity(1, 0),
        provenance: vec!["bv".into()],
    };
    verify_difference_quotient(f, &u, pair_count, min_separation, seed)
}

/// `f = sin x1 cos x2` on `[-pi, pi)^2` with `d1 f = cos(x2) H(-sin)(x1)` and
/// `d2 f = -sin(x2) H(cos)(x1)`, `H` the Hilbert transform.
pub fn sin_cos_fixture(points: usize) -> Result<(GridFunction, DerivativeStructure)> {
    use std::f64::consts::PI;
    let g = Grid::uniform(1, 1, PI, points)?;
    let g1 = g.block1()?;
    let g2 = g.block2()?;
    let h: Kernel = Arc::new(crate::singular::Hilbert);
    let f = GridFunction::sample(&g, |x| x[0].sin() * x[1].cos())?;
    let t1 = DerivativeTerm {
        component: 0,
        axis: 0,
        k: 1,
        kernel: h.clone(),
        gamma: GridFunction::sample(&g2, |x| x[0].cos())?,
        datum: SignedMeasure::from_density(GridFunction::sample(&g1, |x| -x[0].sin())?)?,
    };
    let t2 = DerivativeTerm {
        component: 0,
        axis: 1,
        k: 1,
        kernel: h,
        gamma: GridFunction::sample(&g2, |x| -x[0].sin())?,
        datum: SignedMeasure::from_density(GridFunction::sample(&g1, |x| x[0].cos())?)?,
    };
    Ok((f, DerivativeStructure::new(g, vec![t1, t2])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::singular::{Hilbert, Identity};

    #[test]
    fn anisotropic_norms() {
        let a = AnisotropyMatrix::new(0.1, 1.0, 1, 1).unwrap();
        assert!((a.inv_norm(&[0.1, 0.0]) - 1.0).abs() < 1e-12);
        assert!((a.inv_norm(&[0.0, 2.0]) - 2.0).abs() < 1e-12);
        let tiny = AnisotropyMatrix::from_ln(-5000.0, -4000.0, 1, 1).unwrap();
        let l = tiny.log1p_inv_norm(&[1.0, 1.0]);
        assert!((l - 5000.0).abs() < 1e-9, "{l}");
        assert_eq!(tiny.log1p_inv_norm(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn upsilon_members() {
        let fam = upsilon_for_directions(0, 1, vec![vec![1.0, 0.0]]).unwrap();
        let (u1, u2) = fam.pairs()[0].clone();
        let h = crate::maximal::StdBump::new(1);
        use crate::maximal::Bump;
        for w in [-0.3, 0.1, 0.7, 1.2] {
            assert!((u1.eval(&[w]) - h.eval(&[0.5 - w]) * w).abs() < 1e-15);
            assert!((u2.eval(&[w]) - h.eval(&[-w])).abs() < 1e-15);
        }
        let fam = build_upsilon_family(1, 1, 1, 64).unwrap();
        assert_eq!(fam.block1.members.len(), 64);
        assert!(fam.block2.l1_bound < 1.0);
    }

    #[test]
    fn zero_structure_gives_zero() {
        let g = Grid::uniform(1, 1, 3.0, 16).unwrap();
        let u = big_v(&DerivativeStructure::empty(g), 8).unwrap();
        assert!(u.values.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_anisotropy_matches_v() {
        let (_, ds) = sin_cos_fixture(32).unwrap();
        let v = big_v(&ds, 16).unwrap();
        let u = big_u(&ds, &AnisotropyMatrix::new(1.0, 1.0, 1, 1).unwrap(), 16).unwrap();
        assert_eq!(v.values.values(), u.values.values());
    }

    #[test]
    fn sin_cos_estimate_holds() {
        let (f, ds) = sin_cos_fixture(64).unwrap();
        let g = f.grid().clone();
        let v = big_v(&ds, 32).unwrap();
        let r = verify_difference_quotient(&f, &v, 4000, 2.0 * g.max_spacing(), 7).unwrap();
        assert!(r.pass_rate >= 0.99, "{r:?}");
    }

    #[test]
    fn linear_function_via_identity() {
        let g = Grid::new(1, vec![4.0, 4.0], vec![64, 32]).unwrap();
        let f = GridFunction::sample(&g, |x| 0.5 * x[0]).unwrap();
        let t = DerivativeTerm {
            component: 0,
            axis: 0,
            k: 1,
            kernel: Arc::new(Identity { dim: 1 }),
            gamma: GridFunction::constant(g.block2().unwrap(), 1.0).unwrap(),
            datum: SignedMeasure::from_density(GridFunction::constant(g.block1().unwrap(), 0.5).unwrap()).unwrap(),
        };
        let ds = DerivativeStructure::new(g.clone(), vec![t]).unwrap();
        let v = big_v(&ds, 32).unwrap();
        // pairs across the periodic seam see the jump of the sawtooth extension
        let inner: Vec<bool> = (0..g.len()).map(|i| g.node_vec(i)[0].abs() < 3.0).collect();
        let v = UField { mask: inner, ..v };
        let r = verify_difference_quotient(&f, &v, 2000, 2.0 * g.max_spacing(), 3).unwrap();
        assert!(r.pass_rate >= 0.99, "{r:?}");
    }

    #[test]
    fn concatenation_is_additive() {
        let (_, ds) = sin_cos_fixture(32).unwrap();
        let a = ds.filter(|t| t.axis == 0);
        let b = ds.filter(|t| t.axis == 1);
        let ab = a.concat(&b).unwrap();
        let m = AnisotropyMatrix::new(0.5, 1.0, 1, 1).unwrap();
        let (uab, ua, ub) = (big_u(&ab, &m, 8).unwrap(), big_u(&a, &m, 8).unwrap(), big_u(&b, &m, 8).unwrap());
        for i in 0..ds.grid.len() {
            assert!((uab.values.value(i) - ua.values.value(i) - ub.values.value(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let g = Grid::uniform(1, 1, 3.0, 16).unwrap();
        let text = r#"
[[term]]
block = [2, 1]
i = 1
j = 1
kernel = "hilbert"
gamma = "exp(-x2^2)"
datum = "atoms: 0.5 1.0; -0.25 -2"

[[term]]
block = [1, 2]
i = 1
j = 1
k = 2
kernel = "hilbert"
gamma = "cos(x2)"
datum = "sin(x1)"
"#;
        let ds = DerivativeStructure::from_manifest_str(text, &g, &KernelRegistry::builtin(), Path::new(".")).unwrap();
        assert_eq!(ds.terms.len(), 2);
        assert_eq!(ds.terms[0].block(1), (2, 1));
        assert_eq!(ds.terms[0].datum.atoms.len(), 2);
        assert_eq!(ds.terms[1].axis, 1);
        let bad = text.replace("[2, 1]", "[1, 1]");
        assert!(DerivativeStructure::from_manifest_str(&bad, &g, &KernelRegistry::builtin(), Path::new(".")).is_err());
        let _ = Hilbert;
    }

    #[test]
    fn bv_step() {
        let g = Grid::uniform(1, 0, 4.0, 512).unwrap();
        let f = GridFunction::sample(&g, |x| if x[0].abs() <= 1.0 { 1.0 } else { 0.0 }).unwrap();
        let h = g.spacing(0);
        let lo = g.coord(0, g.nearest_index(0, -1.0)) - h / 2.0;
        let hi = g.coord(0, g.nearest_index(0, 1.0)) + h / 2.0;
        let df = SignedMeasure::from_atoms(1, vec![(vec![lo], 1.0), (vec![hi], -1.0)]).unwrap();
        let r = bv_difference_check(&f, &df, 4.5, 4000, 2.0 * h, 1).unwrap();
        assert!(r.pass_rate >= 0.99, "{r:?}");
    }
}
