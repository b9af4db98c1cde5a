//! Classical, smooth and tensor-product maximal functions.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::cloud::{ball_volume, sphere_area, sphere_cloud};
use crate::error::{Error, Result};
use crate::grid::{lebesgue_norm, lebesgue_norm_masked, Grid, GridFunction, Region};
use crate::singular::{apply, rescale_kernel, FundamentalKernel, Kernel, SignedMeasure};
use crate::spectral;
use crate::weak_lebesgue::weak_norm_masked;

/// A compactly supported function on `R^d`, vanishing outside the ball of
/// radius `support_radius` around `support_center`.
pub trait Bump: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn eval(&self, w: &[f64]) -> f64;
    fn support_center(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
    fn support_radius(&self) -> f64 {
        1.0
    }
    fn smooth(&self) -> bool;
}

pub type BumpRef = Arc<dyn Bump>;

/// `c_d exp(-1/(1 - |x|^2))` on the unit ball, normalized to unit mass.
#[derive(Clone, Copy, Debug)]
pub struct StdBump {
    dim: usize,
    norm: f64,
}

impl StdBump {
    pub fn new(dim: usize) -> Self {
        // Simpson on the radial profile; the integrand is flat at r = 1
        let n = 20_000;
        let f = |r: f64| if r < 1.0 { (-1.0 / (1.0 - r * r)).exp() * r.powi(dim as i32 - 1) } else { 0.0 };
        let h = 1.0 / n as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let radial = s * h / 3.0;
        Self { dim, norm: 1.0 / (sphere_area(dim) * radial) }
    }

    pub fn profile(&self, r2: f64) -> f64 {
        if r2 < 1.0 {
            self.norm * (-1.0 / (1.0 - r2)).exp()
        } else {
            0.0
        }
    }
}

impl Bump for StdBump {
    fn name(&self) -> String {
        "bump_std".into()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, w: &[f64]) -> f64 {
        self.profile(w.iter().map(|v| v * v).sum())
    }
    fn smooth(&self) -> bool {
        true
    }
}

/// `1_{B_1} / |B_1|`.
#[derive(Clone, Copy, Debug)]
pub struct IndicatorBall {
    pub dim: usize,
}

impl Bump for IndicatorBall {
    fn name(&self) -> String {
        "indicator_ball".into()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, w: &[f64]) -> f64 {
        if w.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            1.0 / ball_volume(self.dim)
        } else {
            0.0
        }
    }
    fn smooth(&self) -> bool {
        false
    }
}

/// Standard bump times the coordinate `w_axis` (odd in that coordinate).
#[derive(Clone, Copy, Debug)]
pub struct OddDirectional {
    base: StdBump,
    axis: usize,
}

impl OddDirectional {
    pub fn new(dim: usize, axis: usize) -> Result<Self> {
        if axis >= dim {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range for dimension {dim}")));
        }
        Ok(Self { base: StdBump::new(dim), axis })
    }
}

impl Bump for OddDirectional {
    fn name(&self) -> String {
        format!("odd_directional_{}", self.axis + 1)
    }
    fn dim(&self) -> usize {
        self.base.dim
    }
    fn eval(&self, w: &[f64]) -> f64 {
        self.base.eval(w) * w[self.axis]
    }
    fn smooth(&self) -> bool {
        true
    }
}

/// `h(shift - w) * {w}`, where the weight is `w[axis]` or 1.
#[derive(Clone, Debug)]
pub struct Upsilon {
    base: StdBump,
    shift: Vec<f64>,
    weight_axis: Option<usize>,
}

impl Upsilon {
    pub fn new(shift: Vec<f64>, weight_axis: Option<usize>) -> Self {
        Self { base: StdBump::new(shift.len()), shift, weight_axis }
    }
}

impl Bump for Upsilon {
    fn name(&self) -> String {
        format!("upsilon{:?}", self.weight_axis)
    }
    fn dim(&self) -> usize {
        self.shift.len()
    }
    fn eval(&self, w: &[f64]) -> f64 {
        let r2: f64 = self.shift.iter().zip(w).map(|(s, v)| (s - v) * (s - v)).sum();
        let v = self.base.profile(r2);
        match self.weight_axis {
            Some(a) if v != 0.0 => v * w[a],
            _ => v,
        }
    }
    fn support_center(&self) -> Vec<f64> {
        self.shift.clone()
    }
    fn smooth(&self) -> bool {
        true
    }
}

type BumpFactory = Box<dyn Fn(usize, &[usize]) -> Result<BumpRef> + Send + Sync>;

/// Named bump constructors; `odd_directional_j` is instantiated as
/// `odd_directional_1`, `odd_directional_2`, ... (1-based axis).
pub struct BumpRegistry {
    entries: BTreeMap<String, (usize, &'static str, BumpFactory)>,
}

impl BumpRegistry {
    pub fn builtin() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register("bump_std", 0, "exp(-1/(1-|x|^2)), unit mass", |d, _| Ok(Arc::new(StdBump::new(d)) as BumpRef));
        r.register("indicator_ball", 0, "normalized indicator of the unit ball", |d, _| {
            Ok(Arc::new(IndicatorBall { dim: d }) as BumpRef)
        });
        r.register("odd_directional_j", 1, "standard bump times w_j", |d, ix| {
            if ix[0] == 0 {
                return Err(Error::InvalidArgument("axis index is 1-based".into()));
            }
            Ok(Arc::new(OddDirectional::new(d, ix[0] - 1)?) as BumpRef)
        });
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        indices: usize,
        summary: &'static str,
        f: impl Fn(usize, &[usize]) -> Result<BumpRef> + Send + Sync + 'static,
    ) {
        self.entries.insert(name.into(), (indices, summary, Box::new(f)));
    }

    pub fn catalog(&self) -> Vec<(String, &'static str)> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.1)).collect()
    }

    pub fn create(&self, name: &str, dim: usize) -> Result<BumpRef> {
        if let Some((0, _, f)) = self.entries.get(name) {
            return f(dim, &[]);
        }
        for (key, (n, _, f)) in &self.entries {
            if *n == 0 {
                continue;
            }
            let prefix = &key[..key.len() - n];
            if let Some(rest) = name.strip_prefix(prefix) {
                if !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()) {
                    let ix: Vec<usize> = vec![rest.parse().map_err(|_| Error::Parse(name.into()))?];
                    return f(dim, &ix);
                }
            }
        }
        Err(Error::Unknown { kind: "bump", name: name.into() })
    }
}

/// Lattice quadrature of `(int |b|, sup |b|)` over the support box.
pub fn bump_norms(b: &dyn Bump) -> (f64, f64) {
    let d = b.dim();
    let n: usize = match d {
        1 => 4096,
        2 => 256,
        3 => 48,
        _ => 20,
    };
    let c = b.support_center();
    let r = b.support_radius();
    let s = 2.0 * r / n as f64;
    let total = n.pow(d as u32);
    let mut w = vec![0.0; d];
    let mut l1 = 0.0;
    let mut sup: f64 = 0.0;
    for idx in 0..total {
        let mut rem = idx;
        for a in 0..d {
            w[a] = c[a] - r + (rem % n) as f64 * s + 0.5 * s;
            rem /= n;
        }
        let v = b.eval(&w).abs();
        l1 += v;
        sup = sup.max(v);
    }
    (l1 * s.powi(d as i32), sup)
}

#[derive(Clone, Debug)]
pub struct BumpFamily {
    pub members: Vec<BumpRef>,
    /// `Q1 >= ||member||_1`.
    pub l1_bound: f64,
    /// `Q3 >= ||member||_inf`.
    pub sup_bound: Option<f64>,
    pub smooth: bool,
    pub dim: usize,
}

impl BumpFamily {
    pub fn new(members: Vec<BumpRef>) -> Result<Self> {
        let dim = members.first().ok_or_else(|| Error::InvalidArgument("empty bump family".into()))?.dim();
        if members.iter().any(|m| m.dim() != dim) {
            return Err(Error::InvalidArgument("bump family mixes dimensions".into()));
        }
        let mut q1: f64 = 0.0;
        let mut q3: f64 = 0.0;
        for m in &members {
            let (l1, sup) = bump_norms(m.as_ref());
            q1 = q1.max(l1);
            q3 = q3.max(sup);
        }
        let smooth = members.iter().all(|m| m.smooth());
        Ok(Self { members, l1_bound: q1, sup_bound: Some(q3), smooth, dim })
    }

    pub fn single(b: BumpRef) -> Result<Self> {
        Self::new(vec![b])
    }

    /// Radius of a centered ball containing every member's support.
    pub fn support_radius(&self) -> f64 {
        self.members
            .iter()
            .map(|m| m.support_center().iter().map(|v| v * v).sum::<f64>().sqrt() + m.support_radius())
            .fold(0.0, f64::max)
    }

    /// Check that members vanish outside their declared supports on a
    /// cloud of `cloud` points per member.
    pub fn validate(&self, cloud: usize) -> Result<()> {
        let dirs = sphere_cloud(self.dim, cloud.max(2));
        for m in &self.members {
            let c = m.support_center();
            let r = m.support_radius();
            for (k, dir) in dirs.iter().enumerate() {
                let rho = r * (1.0 + 1e-9 + (k % 7) as f64 * 0.15);
                let x: Vec<f64> = c.iter().zip(dir).map(|(a, u)| a + rho * u).collect();
                if m.eval(&x) != 0.0 {
                    return Err(Error::InvalidArgument(format!("{} is nonzero outside its support", m.name())));
                }
            }
        }
        Ok(())
    }
}

/// Increasing list of radii.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ladder {
    pub radii: Vec<f64>,
}

impl Ladder {
    pub fn geometric(min: f64, max: f64, ratio: f64) -> Result<Self> {
        if !(min > 0.0 && max >= min && ratio > 1.0) {
            return Err(Error::InvalidArgument(format!("bad ladder ({min}, {max}, {ratio})")));
        }
        let mut radii = Vec::new();
        let mut r = min;
        while r <= max * (1.0 + 1e-12) {
            radii.push(r);
            r *= ratio;
        }
        Ok(Self { radii })
    }

    /// Ratio-2 ladder from the smallest spacing to the largest half-width.
    pub fn dyadic(grid: &Grid) -> Self {
        let max = grid.half_width().iter().cloned().fold(0.0, f64::max);
        Self::geometric(grid.min_spacing(), max, 2.0).expect("grid spacings are positive")
    }
}

/// Cell masses of `b_eps(x) = eps^-d b(x / eps)` placed on the periodic
/// grid as a convolution kernel (index 0 is displacement 0).
///
/// The bump is sampled on a lattice aligned with the cells, `m` samples per
/// cell and axis, and each sample deposits its mass into its cell.
pub fn discretize(b: &dyn Bump, eps: f64, grid: &Grid) -> Vec<f64> {
    discretize_at(b, eps, grid, None)
}

/// As [`discretize`] with the bump translated to `offset`.
pub fn discretize_at(b: &dyn Bump, eps: f64, grid: &Grid, offset: Option<&[f64]>) -> Vec<f64> {
    let d = grid.dim();
    let c: Vec<f64> = b.support_center().iter().map(|v| v * eps).collect();
    let r = b.support_radius() * eps;
    let h = grid.spacings();
    let pts = grid.points();
    let strides = grid.strides();
    let shift: Vec<f64> = offset.map_or(vec![0.0; d], |o| o.to_vec());
    let mut per_axis: Vec<Vec<(usize, f64)>> = Vec::with_capacity(d);
    let mut sample_w = 1.0;
    for a in 0..d {
        let m = ((32.0 * h[a] / r).ceil() as usize).max(2);
        let s = h[a] / m as f64;
        sample_w *= s;
        let lo = shift[a] + c[a] - r;
        let hi = shift[a] + c[a] + r;
        // sample positions (j + 1/2) s - h/2
        let j0 = ((lo + 0.5 * h[a]) / s - 0.5).floor() as i64;
        let j1 = ((hi + 0.5 * h[a]) / s - 0.5).ceil() as i64;
        let mut v = Vec::with_capacity((j1 - j0 + 1) as usize);
        for j in j0..=j1 {
            let p = (j as f64 + 0.5) * s - 0.5 * h[a];
            let cell = ((p / h[a]).round() as i64).rem_euclid(pts[a] as i64) as usize;
            v.push((cell, p));
        }
        per_axis.push(v);
    }
    let scale = eps.powi(-(d as i32)) * sample_w;
    let mut out = vec![0.0; grid.len()];
    let mut w = vec![0.0; d];
    let counts: Vec<usize> = per_axis.iter().map(Vec::len).collect();
    let total: usize = counts.iter().product();
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let mut node = 0;
        let mut r2 = 0.0;
        for a in 0..d {
            let (cell, p) = per_axis[a][idx[a]];
            node += cell * strides[a];
            w[a] = (p - shift[a]) / eps;
            let q = (p - shift[a] - c[a]) / r;
            r2 += q * q;
        }
        if r2 <= 1.0 {
            let v = b.eval(&w);
            if v != 0.0 {
                out[node] += v * scale;
            }
        }
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] < counts[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

/// Normalized discrete ball `{|m h| <= eps}` as a convolution kernel.
fn ball_weights(grid: &Grid, eps: f64) -> Vec<f64> {
    let d = grid.dim();
    let h = grid.spacings();
    let pts = grid.points();
    let strides = grid.strides();
    let ext: Vec<i64> = (0..d).map(|a| (eps / h[a] + 1e-9).floor() as i64).collect();
    let mut out = vec![0.0; grid.len()];
    let mut count = 0usize;
    let mut m: Vec<i64> = ext.iter().map(|e| -e).collect();
    'outer: loop {
        let r2: f64 = (0..d).map(|a| (m[a] as f64 * h[a]).powi(2)).sum();
        if r2 <= eps * eps * (1.0 + 1e-12) {
            let node: usize = (0..d).map(|a| m[a].rem_euclid(pts[a] as i64) as usize * strides[a]).sum();
            out[node] += 1.0;
            count += 1;
        }
        for a in (0..d).rev() {
            m[a] += 1;
            if m[a] <= ext[a] {
                continue 'outer;
            }
            m[a] = -ext[a];
        }
        break;
    }
    out.iter_mut().for_each(|v| *v /= count as f64);
    out
}

/// Hardy-Littlewood maximal function over the dyadic ladder.
pub fn maximal_function(u: &GridFunction) -> Result<GridFunction> {
    maximal_function_with(u, &Ladder::dyadic(u.grid()))
}

/// Hardy-Littlewood maximal function over a given ladder.
pub fn maximal_function_with(u: &GridFunction, ladder: &Ladder) -> Result<GridFunction> {
    if u.components() != 1 {
        return Err(Error::InvalidArgument("maximal function needs a scalar".into()));
    }
    let g = u.grid();
    let abs: Vec<f64> = u.values().iter().map(|v| v.abs()).collect();
    let uh = spectral::forward(&abs, g.points());
    let mut best = abs.clone();
    for &eps in &ladder.radii {
        let kh = spectral::forward(&ball_weights(g, eps), g.points());
        let prod = uh.iter().zip(&kh).map(|(a, b)| a * b).collect();
        let (avg, _) = spectral::inverse_real(prod, g.points());
        best.iter_mut().zip(&avg).for_each(|(b, &a)| *b = b.max(a));
    }
    GridFunction::scalar(g.clone(), best)
}

/// Input of the smooth maximal function.
#[derive(Clone, Debug)]
pub enum SmoothInput<'a> {
    Function(&'a GridFunction),
    Measure(&'a SignedMeasure, &'a Grid),
}

/// Output that may be undefined at nodes next to atoms.
#[derive(Clone, Debug)]
pub struct MaskedField {
    pub values: GridFunction,
    pub mask: Vec<bool>,
}

/// `sup_nu sup_eps |rho^nu_eps * u|` over the dyadic ladder.
pub fn smooth_maximal(family: &BumpFamily, input: SmoothInput<'_>) -> Result<MaskedField> {
    let grid = match &input {
        SmoothInput::Function(u) => u.grid(),
        SmoothInput::Measure(_, g) => *g,
    };
    smooth_maximal_with(family, input, &Ladder::dyadic(grid))
}

pub fn smooth_maximal_with(family: &BumpFamily, input: SmoothInput<'_>, ladder: &Ladder) -> Result<MaskedField> {
    if let SmoothInput::Measure(..) = input {
        if !family.smooth {
            return Err(Error::InvalidArgument("measure input needs a smooth bump family".into()));
        }
    }
    smooth_maximal_unchecked(family, input, ladder)
}

/// Smooth maximal function without the smoothness gate for measures. Atoms
/// are paired pointwise with the bumps, which is meaningful for any bounded
/// member.
pub fn smooth_maximal_unchecked(family: &BumpFamily, input: SmoothInput<'_>, ladder: &Ladder) -> Result<MaskedField> {
    let (grid, density, atoms) = match input {
        SmoothInput::Function(u) => {
            if u.components() != 1 {
                return Err(Error::InvalidArgument("smooth maximal function needs a scalar".into()));
            }
            (u.grid().clone(), Some(u), &[][..])
        }
        SmoothInput::Measure(mu, g) => {
            if mu.dim != g.dim() {
                return Err(Error::GridMismatch("measure dimension differs from grid".into()));
            }
            if let Some(d) = &mu.density {
                if d.grid() != g {
                    return Err(Error::GridMismatch("density lives on a different grid".into()));
                }
            }
            (g.clone(), mu.density.as_ref(), &mu.atoms[..])
        }
    };
    if family.dim != grid.dim() {
        return Err(Error::GridMismatch("bump family dimension differs from grid".into()));
    }
    let d = grid.dim();
    let uh = density.map(|u| spectral::forward(u.values(), grid.points()));
    let mut best = vec![0.0f64; grid.len()];
    let mut mask = vec![true; grid.len()];
    let h = grid.min_spacing();
    let nodes: Vec<Vec<f64>> = if atoms.is_empty() { Vec::new() } else { (0..grid.len()).map(|i| grid.node_vec(i)).collect() };
    for (i, x) in nodes.iter().enumerate() {
        for a in atoms {
            let r2: f64 = x.iter().zip(&a.location).map(|(p, q)| (p - q) * (p - q)).sum();
            if r2 < h * h {
                mask[i] = false;
            }
        }
    }
    let mut conv = vec![0.0; grid.len()];
    let mut w = vec![0.0; d];
    for m in &family.members {
        for &eps in &ladder.radii {
            match &uh {
                Some(uh) => {
                    let kh = spectral::forward(&discretize(m.as_ref(), eps, &grid), grid.points());
                    let prod = uh.iter().zip(&kh).map(|(a, b)| a * b).collect();
                    conv = spectral::inverse_real(prod, grid.points()).0;
                }
                None => conv.iter_mut().for_each(|v| *v = 0.0),
            }
            let scale = eps.powi(-(d as i32));
            for (i, x) in nodes.iter().enumerate() {
                for a in atoms {
                    for k in 0..d {
                        w[k] = (x[k] - a.location[k]) / eps;
                    }
                    conv[i] += a.weight * scale * m.eval(&w);
                }
            }
            best.iter_mut().zip(&conv).for_each(|(b, c)| *b = b.max(c.abs()));
        }
    }
    Ok(MaskedField { values: GridFunction::scalar(grid, best)?, mask })
}

fn block_transform(b: &dyn Bump, eps: f64, grid: &Grid) -> Vec<Complex64> {
    spectral::forward(&discretize(b, eps, grid), grid.points())
}

/// `sup_eps sup_pairs |(p1 (x) p2)_eps * u|` with one shared `eps`.
pub fn tensor_maximal_pairs(pairs: &[(BumpRef, BumpRef)], u: &GridFunction, ladder: &Ladder) -> Result<GridFunction> {
    let g = u.grid();
    let (g1, g2) = (g.block1()?, g.block2()?);
    if u.components() != 1 {
        return Err(Error::InvalidArgument("tensor maximal function needs a scalar".into()));
    }
    if pairs.iter().any(|(a, b)| a.dim() != g1.dim() || b.dim() != g2.dim()) {
        return Err(Error::GridMismatch("bump dimensions differ from the blocks".into()));
    }
    let uh = spectral::forward(u.values(), g.points());
    let len2 = g2.len();
    let mut best = vec![0.0f64; g.len()];
    for &eps in &ladder.radii {
        for (a, b) in pairs {
            let k1 = block_transform(a.as_ref(), eps, &g1);
            let k2 = block_transform(b.as_ref(), eps, &g2);
            let prod = uh.iter().enumerate().map(|(i, z)| z * k1[i / len2] * k2[i % len2]).collect();
            let (conv, _) = spectral::inverse_real(prod, g.points());
            best.iter_mut().zip(&conv).for_each(|(m, c)| *m = m.max(c.abs()));
        }
    }
    GridFunction::scalar(g.clone(), best)
}

/// Tensor maximal function over all pairs of the two families.
pub fn tensor_maximal(f1: &BumpFamily, f2: &BumpFamily, u: &GridFunction, ladder: &Ladder) -> Result<GridFunction> {
    let pairs: Vec<(BumpRef, BumpRef)> = f1
        .members
        .iter()
        .flat_map(|a| f2.members.iter().map(move |b| (a.clone(), b.clone())))
        .collect();
    tensor_maximal_pairs(&pairs, u, ladder)
}

/// Tensor maximal function of a product `a(x1) b(x2)`:
/// `sup_eps sup_pairs |p1_eps * a|(x1) |p2_eps * b|(x2)`.
pub fn tensor_maximal_product(
    pairs: &[(BumpRef, BumpRef)],
    a: &GridFunction,
    b: &GridFunction,
    ladder: &Ladder,
) -> Result<Vec<f64>> {
    let (g1, g2) = (a.grid(), b.grid());
    if pairs.iter().any(|(p, q)| p.dim() != g1.dim() || q.dim() != g2.dim()) {
        return Err(Error::GridMismatch("bump dimensions differ from the factor grids".into()));
    }
    let ah = spectral::forward(a.values(), g1.points());
    let bh = spectral::forward(b.values(), g2.points());
    let len2 = g2.len();
    let size = g1.len() * len2;
    let best = ladder
        .radii
        .par_iter()
        .fold(
            || vec![0.0f64; size],
            |mut best, &eps| {
                for (p, q) in pairs {
                    let k1 = block_transform(p.as_ref(), eps, g1);
                    let k2 = block_transform(q.as_ref(), eps, g2);
                    let c1 = spectral::inverse_real(ah.iter().zip(&k1).map(|(x, y)| x * y).collect(), g1.points()).0;
                    let c2: Vec<f64> = spectral::inverse_real(bh.iter().zip(&k2).map(|(x, y)| x * y).collect(), g2.points())
                        .0
                        .into_iter()
                        .map(f64::abs)
                        .collect();
                    for (i1, v1) in c1.iter().enumerate() {
                        let v1 = v1.abs();
                        let row = &mut best[i1 * len2..(i1 + 1) * len2];
                        for (m, v2) in row.iter_mut().zip(&c2) {
                            *m = m.max(v1 * v2);
                        }
                    }
                }
                best
            },
        )
        .reduce(|| vec![0.0f64; size], |mut x, y| {
            x.iter_mut().zip(&y).for_each(|(a, b)| *a = a.max(*b));
            x
        });
    Ok(best)
}

#[derive(Clone, Debug, Serialize)]
pub struct CancellationReport {
    pub q1: f64,
    pub q2: f64,
    pub q3: Option<f64>,
    pub m1_constant: f64,
    pub l2_constant: f64,
    /// `(eps, ||(eps^d K(eps .)) * rho||_inf)` maximized over members.
    pub q2_by_scale: Vec<(f64, f64)>,
    pub cancellation_failure: bool,
}

/// Empirical constants of the composition `M_rho(S u)`.
///
/// `grid` should resolve the unit-scale members and extend well beyond
/// them; `test_family` holds functions on `grid`. A unit Dirac mass at the
/// origin is always added to the `M^1` test set and handled through the
/// pairing `rho_eps * S delta = S rho_eps`.
pub fn cancellation_bounds(
    k: &Kernel,
    family: &BumpFamily,
    grid: &Grid,
    test_family: &[GridFunction],
) -> Result<CancellationReport> {
    if family.dim != k.dim() || grid.dim() != k.dim() {
        return Err(Error::GridMismatch("kernel, family and grid dimensions differ".into()));
    }
    let mut q2_by_scale = Vec::new();
    let mut failure = false;
    let mut prev: Option<f64> = None;
    for e in -3..=3 {
        let eps = 2f64.powi(e);
        let ke = rescale_kernel(k, eps)?;
        let mut sup: f64 = 0.0;
        for m in &family.members {
            let rho = GridFunction::scalar(grid.clone(), discretize(m.as_ref(), 1.0, grid))?
                .scale(1.0 / grid.cell_measure())?;
            let v = apply(ke.as_ref(), &rho)?;
            sup = sup.max(lebesgue_norm(&v, f64::INFINITY, &Region::Full)?);
        }
        if let Some(p) = prev {
            if p > 0.0 && sup > 10.0 * p {
                failure = true;
            }
        }
        prev = Some(sup);
        q2_by_scale.push((eps, sup));
    }
    let q2 = q2_by_scale.iter().map(|p| p.1).fold(0.0, f64::max);
    if !q2.is_finite() {
        failure = true;
    }

    let ladder = Ladder::dyadic(grid);
    let mut m1: f64 = 0.0;
    let mut l2: f64 = 0.0;
    for u in test_family {
        let su = apply(k.as_ref(), u)?;
        let mf = smooth_maximal_with(family, SmoothInput::Function(&su), &ladder)?;
        let n1 = lebesgue_norm(u, 1.0, &Region::Full)?;
        if n1 > 0.0 {
            m1 = m1.max(weak_norm_masked(&mf.values, 1.0, &Region::Full, None)?.value / n1);
        }
        let n2 = lebesgue_norm(u, 2.0, &Region::Full)?;
        if n2 > 0.0 {
            l2 = l2.max(lebesgue_norm(&mf.values, 2.0, &Region::Full)? / n2);
        }
    }
    let dirac = maximal_of_transformed_dirac(k.as_ref(), family, grid, &ladder)?;
    m1 = m1.max(weak_norm_masked(&dirac.values, 1.0, &Region::Full, Some(&dirac.mask))?.value);

    Ok(CancellationReport {
        q1: family.l1_bound,
        q2,
        q3: family.sup_bound,
        m1_constant: m1,
        l2_constant: l2,
        q2_by_scale,
        cancellation_failure: failure,
    })
}

/// `sup_nu sup_eps |S rho^nu_eps|`, the smooth maximal function of
/// `S^D delta_0`, with the origin node masked.
pub fn maximal_of_transformed_dirac(
    k: &dyn FundamentalKernel,
    family: &BumpFamily,
    grid: &Grid,
    ladder: &Ladder,
) -> Result<MaskedField> {
    let cell = grid.cell_measure();
    let mut best = vec![0.0f64; grid.len()];
    for m in &family.members {
        for &eps in &ladder.radii {
            let rho = GridFunction::scalar(grid.clone(), discretize(m.as_ref(), eps, grid))?.scale(1.0 / cell)?;
            let v = apply(k, &rho)?;
            best.iter_mut().zip(v.values()).for_each(|(b, c)| *b = b.max(c.abs()));
        }
    }
    let h = grid.min_spacing();
    let mask = (0..grid.len())
        .map(|i| grid.node_vec(i).iter().map(|v| v * v).sum::<f64>() >= h * h)
        .collect();
    Ok(MaskedField { values: GridFunction::scalar(grid.clone(), best)?, mask })
}

/// `||M u||_p` over `region`, skipping masked nodes.
pub fn masked_norm(f: &MaskedField, p: f64, region: &Region) -> Result<f64> {
    lebesgue_norm_masked(&f.values, p, region, Some(&f.mask))
}

/// Constant in `|rho_eps * u| <= C M u` for a family with sup bound `Q3`:
/// `Q3 |B_R| R^d`-type volume factor times `2^d` for the ladder step that
/// covers the cells straddling the support boundary.
pub fn pointwise_domination_constant(family: &BumpFamily) -> f64 {
    let d = family.dim as i32;
    let r = family.support_radius();
    family.sup_bound.unwrap_or(f64::INFINITY) * ball_volume(family.dim) * r.powi(d) * 2f64.powi(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn line(w: f64, n: usize) -> Grid {
        Grid::uniform(1, 0, w, n).unwrap()
    }

    #[test]
    fn std_bump_has_unit_mass() {
        for d in 1..=3 {
            let (l1, _) = bump_norms(&StdBump::new(d));
            assert!((l1 - 1.0).abs() < 2e-3, "d = {d}: {l1}");
        }
    }

    #[test]
    fn discretized_mass_is_one() {
        let g = Grid::uniform(2, 0, 4.0, 64).unwrap();
        let b = StdBump::new(2);
        for eps in [0.01, 0.125, 0.5, 3.0, 8.0] {
            let s: f64 = discretize(&b, eps, &g).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "eps {eps}: {s}");
        }
    }

    #[test]
    fn maximal_of_constant() {
        let g = line(2.0, 64);
        let u = GridFunction::constant(g, -3.0).unwrap();
        let m = maximal_function(&u).unwrap();
        assert!(m.values().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn maximal_of_indicator() {
        let g = line(8.0, 1024);
        let u = GridFunction::sample(&g, |x| if x[0].abs() <= 1.0 { 1.0 } else { 0.0 }).unwrap();
        let dy = maximal_function(&u).unwrap();
        let at2 = g.nearest_index(0, 2.0);
        let at0 = g.nearest_index(0, 0.0);
        assert!((dy.value(at0) - 1.0).abs() < 1e-12);
        let v = dy.value(at2);
        assert!(v >= 0.25 - 1e-3 && v <= 1.0 / 3.0 + 1e-3, "{v}");
        let fine = Ladder::geometric(g.spacing(0), 8.0, 1.01).unwrap();
        let v = maximal_function_with(&u, &fine).unwrap().value(at2);
        assert!((v - 1.0 / 3.0).abs() < 5e-3, "{v}");
    }

    #[test]
    fn smooth_maximal_of_constant() {
        let g = line(4.0, 256);
        let u = GridFunction::constant(g, 0.7).unwrap();
        let fam = BumpFamily::single(Arc::new(StdBump::new(1))).unwrap();
        let m = smooth_maximal(&fam, SmoothInput::Function(&u)).unwrap();
        assert!(m.values.values().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn smooth_maximal_of_dirac() {
        let g = line(16.0, 2048);
        let fam = BumpFamily::single(Arc::new(IndicatorBall { dim: 1 })).unwrap();
        let mu = SignedMeasure::dirac(vec![0.0], 1.0);
        assert!(smooth_maximal(&fam, SmoothInput::Measure(&mu, &g)).is_err());
        let m = smooth_maximal_unchecked(&fam, SmoothInput::Measure(&mu, &g), &Ladder::dyadic(&g)).unwrap();
        for i in 0..g.len() {
            let x = g.coord(0, i).abs();
            if m.mask[i] && x < 8.0 {
                let v = m.values.value(i);
                assert!(v <= 0.5 / x * (1.0 + 1e-12) && v >= 0.25 / x * (1.0 - 1e-12), "x = {x}: {v}");
            }
        }
        let w = weak_norm_masked(&m.values, 1.0, &Region::Full, Some(&m.mask)).unwrap().value;
        assert_relative_eq!(w, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn odd_member_below_maximal_of_sine() {
        let g = line(PI, 256);
        let u = GridFunction::sample(&g, |x| x[0].sin()).unwrap();
        let fam = BumpFamily::single(Arc::new(OddDirectional::new(1, 0).unwrap())).unwrap();
        let s = smooth_maximal(&fam, SmoothInput::Function(&u)).unwrap();
        let m = maximal_function(&u).unwrap();
        for i in 0..g.len() {
            assert!(s.values.value(i) <= m.value(i) + 1e-12);
        }
    }

    #[test]
    fn tensor_of_x1_function() {
        let g = Grid::new(1, vec![PI, PI], vec![64, 32]).unwrap();
        let a = |x: f64| (x.sin() + 0.3 * (2.0 * x).cos()).powi(3);
        let u = GridFunction::sample(&g, |x| a(x[0])).unwrap();
        let f1 = BumpFamily::single(Arc::new(StdBump::new(1))).unwrap();
        let f2 = BumpFamily::single(Arc::new(StdBump::new(1))).unwrap();
        let ladder = Ladder::dyadic(&g);
        let t = tensor_maximal(&f1, &f2, &u, &ladder).unwrap();
        let g1 = g.block1().unwrap();
        let a1 = GridFunction::sample(&g1, |x| a(x[0])).unwrap();
        let s = smooth_maximal_with(&f1, SmoothInput::Function(&a1), &ladder).unwrap();
        for i in 0..g.len() {
            assert!((t.value(i) - s.values.value(i / 32)).abs() < 1e-6);
        }
    }

    #[test]
    fn registry_names() {
        let r = BumpRegistry::builtin();
        assert_eq!(r.create("odd_directional_2", 3).unwrap().name(), "odd_directional_2");
        assert!(r.create("odd_directional_4", 3).is_err());
        assert!(r.create("bump_std", 2).unwrap().smooth());
        assert!(!r.create("indicator_ball", 2).unwrap().smooth());
    }

    #[test]
    fn family_support_check() {
        let fam = BumpFamily::new(vec![
            Arc::new(StdBump::new(2)) as BumpRef,
            Arc::new(Upsilon::new(vec![0.5, 0.0], Some(0))),
        ])
        .unwrap();
        fam.validate(64).unwrap();
        assert!((fam.support_radius() - 1.5).abs() < 1e-12);
    }
}
