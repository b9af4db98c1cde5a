//! Uniform periodic grids, sampled functions and quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid on the periodic box `[-w, w)` per axis, split into an
/// `x1` block (the first `n1` axes) and an `x2` block (the rest).
///
/// Nodes sit at `-w + i * h` with `h = 2w / points`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n1: usize,
    half_width: Vec<f64>,
    points: Vec<usize>,
}

impl Grid {
    pub fn new(n1: usize, half_width: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        if half_width.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one axis".into()));
        }
        if half_width.len() != points.len() {
            return Err(Error::InvalidGrid(format!(
                "{} half-widths but {} point counts",
                half_width.len(),
                points.len()
            )));
        }
        if n1 > half_width.len() {
            return Err(Error::InvalidGrid(format!(
                "n1 = {n1} exceeds dimension {}",
                half_width.len()
            )));
        }
        for (a, (&w, &n)) in half_width.iter().zip(&points).enumerate() {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidGrid(format!("axis {a}: half-width {w} must be positive")));
            }
            if n < 2 || n % 2 != 0 {
                return Err(Error::InvalidGrid(format!(
                    "axis {a}: {n} points; need an even count >= 2"
                )));
            }
        }
        Ok(Self { n1, half_width, points })
    }

    /// Same half-width and point count on every axis.
    pub fn uniform(n1: usize, n2: usize, half_width: f64, points: usize) -> Result<Self> {
        let d = n1 + n2;
        Self::new(n1, vec![half_width; d], vec![points; d])
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.dim() - self.n1
    }

    pub fn half_width(&self) -> &[f64] {
        &self.half_width
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        2.0 * self.half_width[axis] / self.points[axis] as f64
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..self.dim()).map(|a| self.spacing(a)).collect()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacings().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacings().into_iter().fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_measure(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn volume(&self) -> f64 {
        self.half_width.iter().map(|w| 2.0 * w).product()
    }

    /// Row-major strides (last axis fastest).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for a in (0..self.dim().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.points[a + 1];
        }
        s
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -self.half_width[axis] + i as f64 * self.spacing(axis)
    }

    pub fn unravel(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.dim()).rev() {
            out[a] = idx % self.points[a];
            idx /= self.points[a];
        }
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.points)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn node(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for a in (0..self.dim()).rev() {
            let i = rem % self.points[a];
            rem /= self.points[a];
            out[a] = self.coord(a, i);
        }
    }

    pub fn node_vec(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.node(idx, &mut x);
        x
    }

    /// Grid of the first `n1` axes.
    pub fn block1(&self) -> Result<Grid> {
        if self.n1 == 0 {
            return Err(Error::InvalidGrid("x1 block is empty".into()));
        }
        Grid::new(self.n1, self.half_width[..self.n1].to_vec(), self.points[..self.n1].to_vec())
    }

    /// Grid of the trailing `n2` axes.
    pub fn block2(&self) -> Result<Grid> {
        if self.n2() == 0 {
            return Err(Error::InvalidGrid("x2 block is empty".into()));
        }
        Grid::new(0, self.half_width[self.n1..].to_vec(), self.points[self.n1..].to_vec())
    }

    /// Same point counts with every half-width multiplied by `factors[a]`.
    pub fn scaled(&self, factors: &[f64]) -> Result<Grid> {
        let hw = self.half_width.iter().zip(factors).map(|(w, f)| w * f).collect();
        Grid::new(self.n1, hw, self.points.clone())
    }

    /// Whether `x` lies in the box `[-w, w)`.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.half_width)
            .all(|(&xi, &w)| xi >= -w && xi < w)
    }

    /// Whether `x` lies in the node hull `[-w, w - h]` where multilinear
    /// interpolation needs no wrap-around.
    pub fn in_node_hull(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|a| x[a] >= -self.half_width[a] && x[a] <= self.half_width[a] - self.spacing(a))
    }

    /// Index of the node nearest to `x` along `axis`, wrapped periodically.
    pub fn nearest_index(&self, axis: usize, x: f64) -> usize {
        let n = self.points[axis] as i64;
        let k = ((x + self.half_width[axis]) / self.spacing(axis)).round() as i64;
        k.rem_euclid(n) as usize
    }
}

/// Grid values, node-major with `components` interleaved values per node.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    components: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, components: usize, values: Vec<f64>) -> Result<Self> {
        if components == 0 {
            return Err(Error::InvalidArgument("component count must be positive".into()));
        }
        if values.len() != grid.len() * components {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes x {} components",
                values.len(),
                grid.len(),
                components
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i / components,
                position: grid.node_vec(i / components),
                value: values[i],
            });
        }
        Ok(Self { grid, components, values })
    }

    pub fn scalar(grid: Grid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, 1, values)
    }

    pub fn zeros(grid: Grid, components: usize) -> Self {
        let n = grid.len() * components;
        Self { grid, components, values: vec![0.0; n] }
    }

    pub fn constant(grid: Grid, c: f64) -> Result<Self> {
        let n = grid.len();
        Self::scalar(grid, vec![c; n])
    }

    /// Evaluate `expr` exactly at every node.
    pub fn sample(grid: &Grid, mut expr: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            grid.node(i, &mut x);
            let v = expr(&x);
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i, position: x, value: v });
            }
            values.push(v);
        }
        Ok(Self { grid: grid.clone(), components: 1, values })
    }

    /// Vector-valued sampling; `expr` writes `components` values.
    pub fn sample_vector(
        grid: &Grid,
        components: usize,
        mut expr: impl FnMut(&[f64], &mut [f64]),
    ) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let mut out = vec![0.0; components];
        let mut values = Vec::with_capacity(grid.len() * components);
        for i in 0..grid.len() {
            grid.node(i, &mut x);
            expr(&x, &mut out);
            if let Some(v) = out.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: i, position: x, value: *v });
            }
            values.extend_from_slice(&out);
        }
        Self::new(grid.clone(), components, values)
    }

    /// Sample with node clamping around a point singularity: nodes closer
    /// than `spacing / 2` to `singularity` are evaluated at distance
    /// `spacing / 2` from it (along the ray through the node, or along the
    /// first axis for the singular node itself).
    pub fn sample_clamped(
        grid: &Grid,
        singularity: &[f64],
        expr: impl Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        let r_clamp = 0.5 * grid.min_spacing();
        let mut y = vec![0.0; grid.dim()];
        Self::sample(grid, |x| {
            let d: Vec<f64> = x.iter().zip(singularity).map(|(a, b)| a - b).collect();
            let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r >= r_clamp {
                return expr(x);
            }
            if r == 0.0 {
                y.copy_from_slice(singularity);
                y[0] += r_clamp;
            } else {
                for a in 0..d.len() {
                    y[a] = singularity[a] + d[a] * r_clamp / r;
                }
            }
            expr(&y)
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value(&self, node: usize) -> f64 {
        self.values[node * self.components]
    }

    pub fn node_values(&self, node: usize) -> &[f64] {
        &self.values[node * self.components..(node + 1) * self.components]
    }

    /// Pointwise Euclidean magnitude at a node.
    pub fn magnitude(&self, node: usize) -> f64 {
        if self.components == 1 {
            self.values[node].abs()
        } else {
            self.node_values(node).iter().map(|v| v * v).sum::<f64>().sqrt()
        }
    }

    pub fn component(&self, c: usize) -> Result<GridFunction> {
        if c >= self.components {
            return Err(Error::InvalidArgument(format!(
                "component {c} of {}",
                self.components
            )));
        }
        let values = self.values.iter().skip(c).step_by(self.components).copied().collect();
        Ok(Self { grid: self.grid.clone(), components: 1, values })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<GridFunction> {
        Self::new(self.grid.clone(), self.components, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Result<GridFunction> {
        self.map(|v| c * v)
    }

    pub fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        self.check_same(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.grid.clone(), self.components, values)
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Same values relabelled onto another grid with identical point counts.
    pub fn on_grid(&self, grid: Grid) -> Result<GridFunction> {
        if grid.points() != self.grid.points() {
            return Err(Error::GridMismatch("point counts differ".into()));
        }
        Self::new(grid, self.components, self.values.clone())
    }

    fn check_same(&self, other: &GridFunction) -> Result<()> {
        if self.grid != other.grid || self.components != other.components {
            return Err(Error::GridMismatch("operands live on different grids".into()));
        }
        Ok(())
    }

    /// Multilinear interpolation of every component at `x`. Returns `false`
    /// when `x` is outside the node hull (or the grid has more than 8 axes).
    pub fn interpolate(&self, x: &[f64], out: &mut [f64]) -> bool {
        let g = &self.grid;
        let d = g.dim();
        if d > 8 || !g.in_node_hull(x) {
            return false;
        }
        let strides = g.strides();
        let mut base = 0usize;
        let mut frac = [0.0f64; 8];
        let mut step = [0usize; 8];
        for a in 0..d {
            let h = g.spacing(a);
            let s = (x[a] + g.half_width[a]) / h;
            let i = (s.floor() as usize).min(g.points[a] - 1);
            frac[a] = s - i as f64;
            base += i * strides[a];
            step[a] = if i + 1 < g.points[a] { strides[a] } else { 0 };
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        let c = self.components;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = base;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx += step[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            for (k, o) in out.iter_mut().enumerate() {
                *o += w * self.values[idx * c + k];
            }
        }
        true
    }

    /// Scalar convenience wrapper around [`interpolate`](Self::interpolate).
    pub fn interpolate_scalar(&self, x: &[f64]) -> Option<f64> {
        let mut out = [0.0];
        self.interpolate(x, &mut out).then_some(out[0])
    }
}

/// Integration region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Full,
    /// Closed ball.
    Ball { center: Vec<f64>, radius: f64 },
    /// Open box `lo < x < hi`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Centered `B_r^1 x B_r^2` with the split after axis `n1`.
    ProductBalls { n1: usize, radius: f64 },
}

impl Region {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidRegion(format!("radius {radius} must be positive")));
        }
        Ok(Region::Ball { center, radius })
    }

    pub fn centered_ball(dim: usize, radius: f64) -> Result<Self> {
        Self::ball(vec![0.0; dim], radius)
    }

    pub fn open_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidRegion("box needs lo < hi on every axis".into()));
        }
        Ok(Region::Box { lo, hi })
    }

    pub fn product_balls(n1: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidRegion(format!("radius {radius} must be positive")));
        }
        Ok(Region::ProductBalls { n1, radius })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Full => true,
            Region::Ball { center, radius } => {
                x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= radius * radius
            }
            Region::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| v > l && v < h),
            Region::ProductBalls { n1, radius } => {
                let r2 = radius * radius;
                let (a, b) = x.split_at((*n1).min(x.len()));
                a.iter().map(|v| v * v).sum::<f64>() <= r2 && b.iter().map(|v| v * v).sum::<f64>() <= r2
            }
        }
    }

    /// Check the region's dimension and that it fits inside the box.
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let hw = grid.half_width();
        let fits = |lo: f64, hi: f64, a: usize| lo >= -hw[a] - 1e-12 && hi <= hw[a] + 1e-12;
        match self {
            Region::Full => Ok(()),
            Region::Ball { center, radius } => {
                if center.len() != grid.dim() {
                    return Err(Error::InvalidRegion("ball dimension mismatch".into()));
                }
                if (0..grid.dim()).all(|a| fits(center[a] - radius, center[a] + radius, a)) {
                    Ok(())
                } else {
                    Err(Error::InvalidRegion(format!("ball of radius {radius} leaves the box")))
                }
            }
            Region::Box { lo, hi } => {
                if lo.len() != grid.dim() {
                    return Err(Error::InvalidRegion("box dimension mismatch".into()));
                }
                if (0..grid.dim()).all(|a| fits(lo[a], hi[a], a)) {
                    Ok(())
                } else {
                    Err(Error::InvalidRegion("box leaves the grid box".into()))
                }
            }
            Region::ProductBalls { n1, radius } => {
                if *n1 > grid.dim() {
                    return Err(Error::InvalidRegion("split exceeds dimension".into()));
                }
                if (0..grid.dim()).all(|a| fits(-radius, *radius, a)) {
                    Ok(())
                } else {
                    Err(Error::InvalidRegion(format!("product ball of radius {radius} leaves the box")))
                }
            }
        }
    }

    /// Membership of every node.
    pub fn mask(&self, grid: &Grid) -> Vec<bool> {
        let mut x = vec![0.0; grid.dim()];
        (0..grid.len())
            .map(|i| {
                grid.node(i, &mut x);
                self.contains(&x)
            })
            .collect()
    }

    /// Cell measure of the nodes inside the region.
    pub fn discrete_measure(&self, grid: &Grid) -> f64 {
        self.mask(grid).iter().filter(|&&m| m).count() as f64 * grid.cell_measure()
    }
}

pub(crate) fn check_exponent(p: f64) -> Result<()> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidExponent(p));
    }
    Ok(())
}

/// Midpoint-rule `L^p` norm over `region`; `p = inf` is the node maximum.
pub fn lebesgue_norm(u: &GridFunction, p: f64, region: &Region) -> Result<f64> {
    lebesgue_norm_masked(u, p, region, None)
}

/// As [`lebesgue_norm`], skipping nodes whose `mask` entry is `false`.
pub fn lebesgue_norm_masked(u: &GridFunction, p: f64, region: &Region, mask: Option<&[bool]>) -> Result<f64> {
    check_exponent(p)?;
    let g = u.grid();
    let inside = region.mask(g);
    let nodes = (0..g.len()).filter(|&i| inside[i] && mask.map_or(true, |m| m[i]));
    if p.is_infinite() {
        return Ok(nodes.map(|i| u.magnitude(i)).fold(0.0, f64::max));
    }
    let sum: f64 = nodes.map(|i| u.magnitude(i).powf(p)).sum();
    Ok((sum * g.cell_measure()).powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_odd_points() {
        assert!(Grid::new(1, vec![1.0], vec![7]).is_err());
        assert!(Grid::new(1, vec![0.0], vec![8]).is_err());
        assert!(Grid::new(2, vec![1.0], vec![8]).is_err());
    }

    #[test]
    fn sample_sine_hits_peak() {
        let g = Grid::uniform(1, 0, std::f64::consts::PI, 8).unwrap();
        let u = GridFunction::sample(&g, |x| x[0].sin()).unwrap();
        // nodes -pi + k pi/4; k = 6 is pi/2
        assert_relative_eq!(u.value(6), 1.0, epsilon = 1e-15);
        assert_relative_eq!(u.value(0), (-std::f64::consts::PI).sin());
    }

    #[test]
    fn sample_reports_offending_node() {
        let g = Grid::uniform(1, 0, 1.0, 4).unwrap();
        match GridFunction::sample(&g, |x| 1.0 / x[0]) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clamped_inverse_sqrt_peak() {
        let g = Grid::uniform(1, 0, 1.0, 64).unwrap();
        let h = g.spacing(0);
        let u = GridFunction::sample_clamped(&g, &[0.0], |x| x[0].abs().powf(-0.5)).unwrap();
        let max = u.values().iter().cloned().fold(0.0, f64::max);
        assert_relative_eq!(max, (h / 2.0).powf(-0.5), max_relative = 1e-14);
    }

    #[test]
    fn constant_norms() {
        let g = Grid::uniform(1, 2, 1.0, 8).unwrap();
        let one = GridFunction::constant(g.clone(), 1.0).unwrap();
        assert_relative_eq!(lebesgue_norm(&one, 1.0, &Region::Full).unwrap(), 8.0, epsilon = 1e-12);
        let c = GridFunction::constant(g, -2.5).unwrap();
        assert_eq!(lebesgue_norm(&c, f64::INFINITY, &Region::Full).unwrap(), 2.5);
        assert!(lebesgue_norm(&c, 0.5, &Region::Full).is_err());
    }

    #[test]
    fn indicator_l2_norm() {
        let g = Grid::uniform(1, 0, 2.0, 1024).unwrap();
        let u = GridFunction::sample(&g, |x| if (0.0..=1.0).contains(&x[0]) { 1.0 } else { 0.0 }).unwrap();
        let n = lebesgue_norm(&u, 2.0, &Region::Full).unwrap();
        assert!((n - 1.0).abs() <= g.spacing(0));
    }

    #[test]
    fn interpolation_is_exact_on_linear() {
        let g = Grid::new(2, vec![1.0, 2.0], vec![8, 16]).unwrap();
        let u = GridFunction::sample(&g, |x| 3.0 * x[0] - x[1] + 0.5).unwrap();
        let v = u.interpolate_scalar(&[0.123, -1.7]).unwrap();
        assert_relative_eq!(v, 3.0 * 0.123 + 1.7 + 0.5, epsilon = 1e-12);
        assert!(u.interpolate_scalar(&[0.99, 0.0]).is_none());
    }

    #[test]
    fn product_ball_membership() {
        let r = Region::product_balls(1, 1.0).unwrap();
        assert!(r.contains(&[0.9, -0.2, 0.5]));
        assert!(!r.contains(&[0.0, 0.9, 0.9]));
    }
}
