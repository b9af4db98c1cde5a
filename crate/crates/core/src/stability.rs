//! The anisotropic functional, its budget and the stability certificate.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffquot::{big_u, AnisotropyMatrix, DerivativeStructure, UField};
use crate::error::{Error, Result};
use crate::flow::{compressibility, integrate_flow, l1_difference, sublevel, superlevel_decay, DecayCurve, FlowMap, SplitVectorField};
use crate::grid::{lebesgue_norm, GridFunction, Region};
use crate::weak_lebesgue::{equi_split, interpolation_bound, weak_norm_weighted};

/// `ln(1 + e^x)` without overflow.
fn ln1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 + gamma / delta2)`.
pub fn log_ratio(gamma: f64, ln_delta2: f64) -> f64 {
    ln1p_exp(gamma.ln() - ln_delta2)
}

fn clamp_log(v: f64) -> f64 {
    v.max(0.0)
}

/// `alpha m [1 + log(1 / (delta1 alpha m))]`.
pub fn term2_raw(alpha: f64, m: f64, ln_delta1: f64) -> f64 {
    if m == 0.0 {
        return 0.0;
    }
    alpha * m * (1.0 + clamp_log(-ln_delta1 - alpha.ln() - m.ln()))
}

/// `eps [1 + log(1 / (delta1 eps))]`.
pub fn term3_raw(eps: f64, ln_delta1: f64) -> f64 {
    eps * (1.0 + clamp_log(-ln_delta1 - eps.ln()))
}

/// `(eps / alpha) [1 + log(1 / (delta2 eps))]`.
pub fn term4_raw(eps: f64, alpha: f64, ln_delta2: f64) -> f64 {
    eps / alpha * (1.0 + clamp_log(-ln_delta2 - eps.ln()))
}

/// Fractions of `eta` given to terms 7+8, 2, 3+4 and 5+6.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub tails: f64,
    pub measure: f64,
    pub equi: f64,
    pub data: f64,
}

impl Default for BudgetSplit {
    fn default() -> Self {
        Self { tails: 2.0 / 7.0, measure: 1.0 / 7.0, equi: 2.0 / 7.0, data: 2.0 / 7.0 }
    }
}

impl BudgetSplit {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.tails, self.measure, self.equi, self.data];
        if parts.iter().any(|p| !(*p > 0.0)) || parts.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument("budget fractions must be positive and sum to at most 1".into()));
        }
        Ok(())
    }
}

/// Parameters of the estimate. The scales are kept as logarithms since the
/// selection routinely drives `delta2` far below the smallest double.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityParams {
    pub gamma: f64,
    pub r: f64,
    pub eta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub c_epsilon: f64,
    pub ln_delta1: f64,
    pub ln_delta2: f64,
}

impl StabilityParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.gamma, self.r, self.eta, self.lambda, self.alpha, self.epsilon];
        if pos.iter().any(|v| !(*v > 0.0)) || self.alpha > 1.0 || self.c_epsilon < 0.0 {
            return Err(Error::InvalidArgument("stability parameters must be positive with alpha <= 1".into()));
        }
        if self.ln_delta1 != self.alpha.ln() + self.ln_delta2 {
            return Err(Error::InvalidArgument("delta1 must equal alpha * delta2".into()));
        }
        Ok(())
    }

    /// May underflow to 0.
    pub fn delta1(&self) -> f64 {
        self.ln_delta1.exp()
    }

    pub fn delta2(&self) -> f64 {
        self.ln_delta2.exp()
    }

    pub fn matrix(&self, n1: usize, n2: usize) -> Result<AnisotropyMatrix> {
        AnisotropyMatrix::from_ln(self.ln_delta1, self.ln_delta2, n1, n2)
    }
}

/// Terms 2 to 8 of the final estimate.
pub fn budget_terms(params: &StabilityParams, m_norm: f64, c_lambda: f64, tails: (f64, f64)) -> [f64; 7] {
    let p = params;
    let c = c_lambda / log_ratio(p.gamma, p.ln_delta2);
    [
        c * term2_raw(p.alpha, m_norm, p.ln_delta1),
        c * term3_raw(p.epsilon, p.ln_delta1),
        c * term4_raw(p.epsilon, p.alpha, p.ln_delta2),
        c * p.c_epsilon / p.alpha,
        c * p.c_epsilon,
        tails.0,
        tails.1,
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certificate {
    pub params: StabilityParams,
    pub c_lambda: f64,
    /// `ln C = ln C_lambda - ln delta1 - ln log(1 + gamma / delta2)`.
    pub ln_c_gamma_r_eta: f64,
    /// Terms 2 to 8.
    pub budget_terms: Vec<f64>,
    pub split: BudgetSplit,
    pub m_norm: f64,
    /// `L1 + L_inf` norms of the growth splits of `b` and `bbar`.
    pub growth_norms: Vec<f64>,
    /// Compressibility estimates `L`, `Lbar`.
    pub compressibility: Vec<f64>,
}

impl Certificate {
    pub fn reevaluate(&self) -> [f64; 7] {
        budget_terms(&self.params, self.m_norm, self.c_lambda, (self.budget_terms[5], self.budget_terms[6]))
    }

    pub fn budget_sum(&self) -> f64 {
        self.budget_terms.iter().sum()
    }

    pub fn c_gamma_r_eta(&self) -> f64 {
        self.ln_c_gamma_r_eta.exp()
    }

    /// `C ||b - bbar|| + eta`, infinite when it overflows.
    pub fn rhs(&self, l1: f64) -> f64 {
        if l1 == 0.0 {
            return self.params.eta;
        }
        (self.ln_c_gamma_r_eta + l1.ln()).exp() + self.params.eta
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.params.validate()?;
        if c.budget_terms.len() != 7 {
            return Err(Error::Parse("a certificate carries seven budget terms".into()));
        }
        Ok(c)
    }
}

/// `eps -> C_eps` for the integrable data of a structure: the largest
/// `L^p((0,T) x R^n1)` norm of the bounded parts of the equi-integrable
/// splits at level `eps`.
#[derive(Clone, Debug)]
pub struct EquiData {
    pub data: Vec<GridFunction>,
    pub p: f64,
    pub time_span: f64,
}

impl EquiData {
    /// Densities of the blocks (1,1), (1,2) and (2,2).
    pub fn from_structure(ds: &DerivativeStructure, p: f64, time_span: f64) -> Self {
        let n1 = ds.grid.n1();
        let data = ds
            .terms
            .iter()
            .filter(|t| t.block(n1) != (2, 1))
            .filter_map(|t| t.datum.density.clone())
            .collect();
        Self { data, p, time_span }
    }

    pub fn c_epsilon(&self, eps: f64) -> Result<f64> {
        let t = self.time_span;
        let mut c: f64 = 0.0;
        for g in &self.data {
            c = c.max(equi_split(g, eps / t, self.p)?.c_epsilon);
        }
        Ok(c * t.powf(1.0 / self.p))
    }
}

/// `T ||m||` summed over the block (2,1) data.
pub fn measure_norm(ds: &DerivativeStructure, time_span: f64) -> f64 {
    time_span * ds.block((2, 1)).terms.iter().map(|t| t.datum.total_variation()).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct SelectionInputs<'a> {
    pub eta: f64,
    pub gamma: f64,
    pub r: f64,
    pub m_norm: f64,
    pub equi: &'a EquiData,
    pub decay: (&'a DecayCurve, &'a DecayCurve),
    pub c_lambda: f64,
    pub split: BudgetSplit,
    pub delta2_max: f64,
}

/// `-ln delta2 - (-ln delta2_max)` offsets probed for suprema over `delta2`.
fn delta2_offsets() -> impl Iterator<Item = f64> {
    std::iter::once(0.0).chain((-60..=200).map(|k| 10f64.powf(k as f64 / 20.0)))
}

fn sup_over_delta2(ln_cap: f64, f: impl Fn(f64) -> f64) -> f64 {
    delta2_offsets().map(|t| f(ln_cap - t)).fold(0.0, f64::max)
}

/// Largest `x` in `[lo, hi]` with `ok(x)`, assuming `ok` holds below some
/// threshold.
fn bisect_largest(lo: f64, hi: f64, ok: impl Fn(f64) -> bool, iterations: usize) -> Option<f64> {
    if ok(hi) {
        return Some(hi);
    }
    if !ok(lo) {
        return None;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..iterations {
        let m = 0.5 * (a + b);
        if ok(m) {
            a = m;
        } else {
            b = m;
        }
    }
    Some(a)
}

/// Choose `lambda`, `alpha`, `eps < alpha^2` and `delta2` in this order so
/// that terms 7+8, 2, 3+4 and 5+6 meet their shares of `eta`.
pub fn select_parameters(inp: &SelectionInputs) -> Result<Certificate> {
    inp.split.validate()?;
    if !(inp.eta > 0.0 && inp.gamma > 0.0 && inp.r > 0.0 && inp.c_lambda > 0.0 && inp.delta2_max > 0.0) || inp.m_norm < 0.0 {
        return Err(Error::InvalidArgument("eta, gamma, r, C_lambda and the delta2 cap must be positive".into()));
    }
    let eta = inp.eta;
    let cl = inp.c_lambda;
    let gamma = inp.gamma;
    let ln_cap = inp.delta2_max.ln();
    let fail = |stage, reason: String| Error::Infeasible { stage, reason };

    let (cx, cb) = inp.decay;
    if cx.points.len() != cb.points.len() || cx.points.iter().zip(&cb.points).any(|(a, b)| a.0 != b.0) {
        return Err(Error::InvalidArgument("decay curves must share their lambda ladder".into()));
    }
    let tail_budget = inp.split.tails * eta;
    let (lambda, t7, t8) = cx
        .points
        .iter()
        .zip(&cb.points)
        .find(|(a, b)| a.1 + b.1 <= tail_budget)
        .map(|(a, b)| (a.0, a.1, b.1))
        .ok_or_else(|| fail("lambda", format!("tails never drop below {tail_budget:e} on the ladder")))?;

    let m = inp.m_norm;
    let term2_sup = |ln_alpha: f64| {
        let alpha = ln_alpha.exp();
        sup_over_delta2(ln_cap, |ld2| cl * term2_raw(alpha, m, ln_alpha + ld2) / log_ratio(gamma, ld2))
    };
    let measure_budget = inp.split.measure * eta;
    let ln_alpha = bisect_largest(-700.0, 0.0, |la| term2_sup(la) <= measure_budget, 200)
        .ok_or_else(|| fail("alpha", format!("term 2 exceeds {measure_budget:e} for every alpha")))?;
    let alpha = ln_alpha.exp();

    let equi_sup = |ln_eps: f64| {
        let eps = ln_eps.exp();
        sup_over_delta2(ln_cap, |ld2| {
            cl * (term3_raw(eps, ln_alpha + ld2) + term4_raw(eps, alpha, ld2)) / log_ratio(gamma, ld2)
        })
    };
    let equi_budget = inp.split.equi * eta;
    let ln_eps_max = 2.0 * ln_alpha - 1e-9;
    let ln_eps = bisect_largest(-700.0, ln_eps_max, |le| equi_sup(le) <= equi_budget, 200)
        .ok_or_else(|| fail("epsilon", format!("terms 3+4 exceed {equi_budget:e} for every epsilon < alpha^2")))?;
    let epsilon = ln_eps.exp();
    let c_epsilon = inp.equi.c_epsilon(epsilon)?;

    let data_budget = inp.split.data * eta;
    let params_at = |ld2: f64| StabilityParams {
        gamma,
        r: inp.r,
        eta,
        lambda,
        alpha,
        epsilon,
        c_epsilon,
        ln_delta1: alpha.ln() + ld2,
        ln_delta2: ld2,
    };
    let fits = |ld2: f64| {
        let t = budget_terms(&params_at(ld2), m, cl, (t7, t8));
        t[0] <= measure_budget && t[1] + t[2] <= equi_budget && t[3] + t[4] <= data_budget && t.iter().sum::<f64>() <= eta
    };
    // fits holds for all small enough delta2; search on -ln delta2.
    let mut lo = -ln_cap;
    let mut hi = lo.abs().max(1.0);
    while !fits(-hi) {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(fail("delta2", "terms 5+6 never fit their budget".into()));
        }
    }
    if fits(-lo) {
        hi = lo;
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if fits(-mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let params = params_at(-hi);
    let terms = budget_terms(&params, m, cl, (t7, t8));
    let ln_c = cl.ln() - params.ln_delta1 - log_ratio(gamma, params.ln_delta2).ln();
    Ok(Certificate {
        params,
        c_lambda: cl,
        ln_c_gamma_r_eta: ln_c,
        budget_terms: terms.to_vec(),
        split: inp.split,
        m_norm: m,
        growth_norms: Vec::new(),
        compressibility: Vec::new(),
    })
}

fn check_pair(x: &FlowMap, xbar: &FlowMap) -> Result<()> {
    if !x.same_seeds(xbar) {
        return Err(Error::InvalidArgument("flows must share seeds and recorded times".into()));
    }
    Ok(())
}

fn in_ball(p: &[f64], r: f64) -> bool {
    p.iter().map(|v| v * v).sum::<f64>() <= r * r
}

/// Seeds in `B_r` whose trajectories under both flows stay in `B_lambda`.
pub fn functional_mask(x: &FlowMap, xbar: &FlowMap, r: f64, lambda: f64) -> Result<Vec<bool>> {
    check_pair(x, xbar)?;
    let g = sublevel(x, lambda);
    let gb = sublevel(xbar, lambda);
    Ok((0..x.len()).map(|s| g[s] && gb[s] && in_ball(&x.seeds[s], r)).collect())
}

/// `Phi(s) = int_{B_r cap G_lambda cap Gbar_lambda} log(1 + |A^-1 (X - Xbar)|)`
/// at every recorded time.
pub fn phi_functional(x: &FlowMap, xbar: &FlowMap, a: &AnisotropyMatrix, r: f64, lambda: f64) -> Result<Vec<f64>> {
    let mask = functional_mask(x, xbar, r, lambda)?;
    let d = x.dim;
    Ok((0..x.times.len())
        .map(|k| {
            let mut diff = vec![0.0; d];
            let mut sum = 0.0;
            for s in (0..x.len()).filter(|&s| mask[s]) {
                let (p, q) = (x.position(s, k), xbar.position(s, k));
                diff.iter_mut().enumerate().for_each(|(i, v)| *v = p[i] - q[i]);
                sum += a.log1p_inv_norm(&diff);
            }
            sum * x.cell_measure
        })
        .collect())
}

/// `phi / log(1 + gamma / delta2)` plus the two tails.
pub fn superlevel_bound(phi: f64, gamma: f64, ln_delta2: f64, tail: f64, tail_bar: f64) -> f64 {
    phi / log_ratio(gamma, ln_delta2) + tail + tail_bar
}

fn distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `|B_r cap {|X - Xbar| > gamma}|` at every recorded time; particles that
/// left the domain count as separated.
pub fn superlevel_measure(x: &FlowMap, xbar: &FlowMap, gamma: f64, r: f64) -> Result<Vec<f64>> {
    check_pair(x, xbar)?;
    Ok((0..x.times.len())
        .map(|k| {
            let n = (0..x.len())
                .filter(|&s| in_ball(&x.seeds[s], r))
                .filter(|&s| {
                    let gone = |f: &FlowMap| f.escaped[s].is_some_and(|e| e <= k);
                    gone(x) || gone(xbar) || distance(x.position(s, k), xbar.position(s, k)) > gamma
                })
                .count();
            n as f64 * x.cell_measure
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct LowerBoundCheck {
    pub phi: Vec<f64>,
    pub bound: Vec<f64>,
    pub holds: bool,
}

/// `Phi >= |mask cap {|X - Xbar| > gamma}| log(1 + gamma / delta2)` at every
/// recorded time, to a relative `1e-12`.
pub fn phi_lower_bound(x: &FlowMap, xbar: &FlowMap, a: &AnisotropyMatrix, r: f64, lambda: f64, gamma: f64) -> Result<LowerBoundCheck> {
    let phi = phi_functional(x, xbar, a, r, lambda)?;
    let mask = functional_mask(x, xbar, r, lambda)?;
    let lr = log_ratio(gamma, a.ln_delta2);
    let bound: Vec<f64> = (0..x.times.len())
        .map(|k| {
            let n = (0..x.len()).filter(|&s| mask[s] && distance(x.position(s, k), xbar.position(s, k)) > gamma).count();
            n as f64 * x.cell_measure * lr
        })
        .collect();
    let holds = phi.iter().zip(&bound).all(|(p, b)| *p >= b - 1e-12 * b.abs().max(1.0));
    Ok(LowerBoundCheck { phi, bound, holds })
}

/// Trapezoidal running integral over the recorded times.
fn cumulative(times: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for k in 1..v.len() {
        out[k] = out[k - 1] + 0.5 * (times[k] - times[k - 1]) * (v[k] + v[k - 1]);
    }
    out
}

/// Split every density datum of `ds` at level `eps`; returns the small and
/// bounded parts and the largest bounded `L^p` norm.
pub fn split_structure(ds: &DerivativeStructure, eps: f64, p: f64) -> Result<(DerivativeStructure, DerivativeStructure, f64)> {
    let mut small = ds.clone();
    let mut bounded = ds.clone();
    let mut c: f64 = 0.0;
    for (ts, tb) in small.terms.iter_mut().zip(bounded.terms.iter_mut()) {
        tb.datum.atoms.clear();
        if let Some(d) = &ts.datum.density {
            let sp = equi_split(d, eps, p)?;
            c = c.max(sp.c_epsilon);
            ts.datum.density = Some(sp.u1);
            tb.datum.density = Some(sp.u2);
        }
    }
    Ok((small, bounded, c))
}

fn u_or_zero(ds: &DerivativeStructure, a: &AnisotropyMatrix, dirs: usize) -> Result<Option<UField>> {
    if ds.terms.is_empty() {
        Ok(None)
    } else {
        big_u(ds, a, dirs).map(Some)
    }
}

/// The U-functions of one structure slice: `U_m`, `U_r^1`, `U_r^2`,
/// `U_p^1 + U_q^1`, `U_p^2 + U_q^2`.
#[derive(Clone, Debug)]
pub struct UFunctions {
    pub fields: [Option<UField>; 5],
    pub c_epsilon: f64,
}

impl UFunctions {
    pub fn build(ds: &DerivativeStructure, a: &AnisotropyMatrix, eps: f64, p: f64, dirs: usize) -> Result<Self> {
        let m = ds.block((2, 1));
        let (r1, r2, cr) = split_structure(&ds.block((2, 2)), eps, p)?;
        let pq = ds.block((1, 1)).concat(&ds.block((1, 2)))?;
        let (pq1, pq2, cpq) = split_structure(&pq, eps, p)?;
        Ok(Self {
            fields: [
                u_or_zero(&m, a, dirs)?,
                u_or_zero(&r1, a, dirs)?,
                u_or_zero(&r2, a, dirs)?,
                u_or_zero(&pq1, a, dirs)?,
                u_or_zero(&pq2, a, dirs)?,
            ],
            c_epsilon: cr.max(cpq),
        })
    }

    /// `U_i(x)`, infinite off the grid.
    fn at(&self, i: usize, x: &[f64]) -> f64 {
        match &self.fields[i] {
            None => 0.0,
            Some(u) => u.values.interpolate_scalar(x).unwrap_or(f64::INFINITY),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecompositionOptions {
    pub r: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub p: f64,
    pub direction_samples: usize,
}

pub const QUADRATURE_SLACK: f64 = 0.05;

#[derive(Clone, Debug, Serialize)]
pub struct DecompositionReport {
    pub times: Vec<f64>,
    pub phi: Vec<f64>,
    /// Running integral of `|A^-1 (b - bbar)(Xbar)|`.
    pub drift: Vec<f64>,
    /// Running integrals of `phi_1 .. phi_5`.
    pub terms: Vec<[f64; 5]>,
    /// Values of the five interpolated bounds at the chosen scales.
    pub formulas: [f64; 5],
    pub c_epsilon: f64,
    pub m_norm: f64,
    /// Largest `(Phi(tau) - Phi(t)) / (drift + sum phi_i)`.
    pub worst_ratio: f64,
    pub holds: bool,
    /// `||phi_2||_1` next to the interpolation bound from its `M^1` and
    /// `L^p` norms.
    pub phi2_l1: f64,
    pub phi2_interpolation: f64,
}

impl DecompositionReport {
    pub fn totals(&self) -> [f64; 5] {
        *self.terms.last().expect("recorded times")
    }

    /// Largest measured-to-formula ratio over the five terms.
    pub fn calibration_ratio(&self) -> f64 {
        self.totals().iter().zip(&self.formulas).filter(|(_, f)| **f > 0.0).map(|(t, f)| t / f).fold(0.0, f64::max)
    }
}

/// Bounds of the five terms after interpolation, without constants.
pub fn decomposition_formulas(a: &AnisotropyMatrix, m: f64, eps: f64, c_eps: f64) -> [f64; 5] {
    let (l1, l2) = (a.ln_delta1, a.ln_delta2);
    let ratio = (l2 - l1).exp();
    let f1 = if m == 0.0 { 0.0 } else { m / ratio * (1.0 + clamp_log(l2 - 2.0 * l1 - m.ln())) };
    [f1, term3_raw(eps, l1), c_eps, ratio * eps * (1.0 + clamp_log(-l2 - eps.ln())), ratio * c_eps]
}

/// Evaluate the five minima of the splitting along both trajectories and
/// integrate them over seeds and time, next to `Phi`.
pub fn functional_derivative_decomposition(
    b: &SplitVectorField,
    bbar: &SplitVectorField,
    x: &FlowMap,
    xbar: &FlowMap,
    a: &AnisotropyMatrix,
    opts: &DecompositionOptions,
) -> Result<DecompositionReport> {
    check_pair(x, xbar)?;
    if b.structure.is_empty() {
        return Err(Error::MissingUField(format!("{} has no derivative structure", b.name)));
    }
    let us: Vec<UFunctions> = b
        .structure
        .iter()
        .map(|(_, ds)| UFunctions::build(ds, a, opts.epsilon, opts.p, opts.direction_samples))
        .collect::<Result<_>>()?;
    let slice = |t: f64| b.structure.partition_point(|s| s.0 <= t).max(1) - 1;
    let mask = functional_mask(x, xbar, opts.r, opts.lambda)?;
    let phi = phi_functional(x, xbar, a, opts.r, opts.lambda)?;
    let d = x.dim;
    let (d1, d2) = (a.delta1(), a.delta2());
    let nt = x.times.len();
    let live: Vec<usize> = (0..x.len()).filter(|&s| mask[s]).collect();

    // (drift, phi_1..phi_5) per seed and time
    let samples: Vec<Vec<[f64; 6]>> = live
        .par_iter()
        .map(|&s| {
            let mut bx = vec![0.0; d];
            let mut bxb = vec![0.0; d];
            let mut bbxb = vec![0.0; d];
            let mut diff = vec![0.0; d];
            (0..nt)
                .map(|k| {
                    let t = x.times[k];
                    let (p, q) = (x.position(s, k), xbar.position(s, k));
                    if !b.eval(t, p, &mut bx) || !b.eval(t, q, &mut bxb) || !bbar.eval(t, q, &mut bbxb) {
                        return [0.0; 6];
                    }
                    diff.iter_mut().enumerate().for_each(|(i, v)| *v = bxb[i] - bbxb[i]);
                    let drift = a.inv_norm(&diff);
                    diff.iter_mut().enumerate().for_each(|(i, v)| *v = bx[i] - bxb[i]);
                    let dd = a.inv_norm(&diff);
                    let u = &us[slice(t)];
                    let pair = |i: usize| u.at(i, p) + u.at(i, q);
                    [
                        drift,
                        dd.min(pair(0) / d2),
                        dd.min(pair(1) / d2),
                        dd.min(pair(2) / d2),
                        dd.min(pair(3) / d1),
                        dd.min(pair(4) / d1),
                    ]
                })
                .collect()
        })
        .collect();

    let w = x.cell_measure;
    let column = |c: usize| -> Vec<f64> { (0..nt).map(|k| samples.iter().map(|v| v[k][c]).sum::<f64>() * w).collect() };
    let drift = cumulative(&x.times, &column(0));
    let cols: Vec<Vec<f64>> = (1..6).map(|c| cumulative(&x.times, &column(c))).collect();
    let terms: Vec<[f64; 5]> = (0..nt).map(|k| [cols[0][k], cols[1][k], cols[2][k], cols[3][k], cols[4][k]]).collect();

    let mut worst: f64 = 0.0;
    for k in 1..nt {
        let lhs = phi[k] - phi[0];
        let rhs = drift[k] + terms[k].iter().sum::<f64>();
        if rhs > 0.0 {
            worst = worst.max(lhs / rhs);
        } else if lhs > 0.0 {
            worst = f64::INFINITY;
        }
    }

    // phi_2 on the space-time sample, with trapezoid weights in time
    let mut tw = vec![0.0; nt];
    for k in 1..nt {
        let h = 0.5 * (x.times[k] - x.times[k - 1]);
        tw[k - 1] += h;
        tw[k] += h;
    }
    let mut vals = Vec::new();
    let mut wts = Vec::new();
    for v in &samples {
        for k in 0..nt {
            if tw[k] > 0.0 {
                vals.push(v[k][2]);
                wts.push(w * tw[k]);
            }
        }
    }
    let phi2_l1: f64 = vals.iter().zip(&wts).map(|(v, w)| v * w).sum();
    let phi2_interpolation = if vals.is_empty() || phi2_l1 == 0.0 {
        0.0
    } else {
        let m1 = weak_norm_weighted(&vals, &wts, 1.0)?.value;
        let lp = vals.iter().zip(&wts).map(|(v, w)| v.powf(opts.p) * w).sum::<f64>().powf(1.0 / opts.p);
        interpolation_bound(m1, lp, opts.p, wts.iter().sum())?.value
    };

    let span = x.times[nt - 1] - x.times[0];
    let m_norm = b.structure.iter().map(|(_, ds)| measure_norm(ds, span)).fold(0.0, f64::max);
    let c_epsilon = us.iter().map(|u| u.c_epsilon).fold(0.0, f64::max) * span.powf(1.0 / opts.p);
    Ok(DecompositionReport {
        times: x.times.clone(),
        phi,
        drift,
        terms,
        formulas: decomposition_formulas(a, m_norm, opts.epsilon, c_epsilon),
        c_epsilon,
        m_norm,
        worst_ratio: worst,
        holds: worst <= 1.0 + QUADRATURE_SLACK,
        phi2_l1,
        phi2_interpolation,
    })
}

/// `C_lambda` as the largest measured-to-formula ratio over a calibration
/// suite, at least 1.
pub fn calibrate_c_lambda(reports: &[DecompositionReport]) -> f64 {
    reports.iter().map(DecompositionReport::calibration_ratio).fold(1.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct FlowConfig {
    pub seed_density: usize,
    pub times: Vec<f64>,
    pub dt: f64,
    pub l1_samples: usize,
}

#[derive(Clone, Debug)]
pub struct CertifyOptions {
    pub eta: f64,
    pub gamma: f64,
    pub r: f64,
    pub c_lambda: f64,
    pub lambda_ladder: Vec<f64>,
    pub p: f64,
    pub split: BudgetSplit,
    pub delta2_max: f64,
    /// Cap separating the bounded part in the growth split.
    pub growth_cap: f64,
}

/// Gather the norms of `b` and the tails of both flows and run the
/// selection.
pub fn certify_pair(b: &SplitVectorField, bbar: &SplitVectorField, x: &FlowMap, xbar: &FlowMap, o: &CertifyOptions) -> Result<Certificate> {
    check_pair(x, xbar)?;
    let t0 = x.times[0];
    let span = x.times[x.times.len() - 1] - t0;
    let ds = b.structure_at(t0).ok_or_else(|| Error::MissingUField(format!("{} has no derivative structure", b.name)))?;
    let equi = EquiData::from_structure(ds, o.p, span);
    let cx = superlevel_decay(x, o.r, &o.lambda_ladder)?;
    let cb = superlevel_decay(xbar, o.r, &o.lambda_ladder)?;
    let mut cert = select_parameters(&SelectionInputs {
        eta: o.eta,
        gamma: o.gamma,
        r: o.r,
        m_norm: measure_norm(ds, span),
        equi: &equi,
        decay: (&cx, &cb),
        c_lambda: o.c_lambda,
        split: o.split,
        delta2_max: o.delta2_max,
    })?;
    for f in [b, bbar] {
        let g = f.growth_split(t0, o.growth_cap)?;
        cert.growth_norms.extend([g.l1_b1, g.linf_b2]);
    }
    let ball = Region::centered_ball(x.dim, o.r)?;
    cert.compressibility = vec![compressibility(x, &ball)?, compressibility(xbar, &ball)?];
    Ok(cert)
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub times: Vec<f64>,
    pub phi: Vec<f64>,
    pub superlevel: Vec<f64>,
    pub l1_difference: f64,
    pub ln_c_gamma_r_eta: f64,
    pub rhs: f64,
    pub holds: bool,
    pub lower_bound_holds: bool,
}

impl StabilityReport {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "time,phi,superlevel_measure,rhs")?;
        for k in 0..self.times.len() {
            writeln!(w, "{},{:.12e},{:.12e},{:.12e}", self.times[k], self.phi[k], self.superlevel[k], self.rhs)?;
        }
        Ok(())
    }
}

/// Compare measured separation of two computed flows against the
/// certified right-hand side.
pub fn stability_report(
    b: &SplitVectorField,
    bbar: &SplitVectorField,
    x: &FlowMap,
    xbar: &FlowMap,
    cert: &Certificate,
    l1_samples: usize,
) -> Result<StabilityReport> {
    let p = &cert.params;
    let a = p.matrix(b.grid.n1(), b.grid.n2())?;
    let lb = phi_lower_bound(x, xbar, &a, p.r, p.lambda, p.gamma)?;
    let superlevel = superlevel_measure(x, xbar, p.gamma, p.r)?;
    let (t0, t1) = (x.times[0], x.times[x.times.len() - 1]);
    let l1 = l1_difference(b, bbar, p.lambda, t0, t1, l1_samples)?;
    let rhs = cert.rhs(l1);
    Ok(StabilityReport {
        times: x.times.clone(),
        holds: superlevel.iter().all(|s| *s <= rhs),
        phi: lb.phi,
        superlevel,
        l1_difference: l1,
        ln_c_gamma_r_eta: cert.ln_c_gamma_r_eta,
        rhs,
        lower_bound_holds: lb.holds,
    })
}

/// Integrate both flows from the seeds in `B_r` and report.
pub fn stability_experiment(b: &SplitVectorField, bbar: &SplitVectorField, cert: &Certificate, cfg: &FlowConfig) -> Result<StabilityReport> {
    let ball = Region::centered_ball(b.dim(), cert.params.r)?;
    let x = integrate_flow(b, &ball, cfg.seed_density, &cfg.times, cfg.dt)?;
    let xbar = integrate_flow(bbar, &ball, cfg.seed_density, &cfg.times, cfg.dt)?;
    stability_report(b, bbar, &x, &xbar, cert, cfg.l1_samples)
}

/// `||g||_p` of every datum density, for reporting.
pub fn datum_norms(ds: &DerivativeStructure, p: f64) -> Result<Vec<f64>> {
    ds.terms
        .iter()
        .map(|t| t.datum.density.as_ref().map_or(Ok(0.0), |d| lebesgue_norm(d, p, &Region::Full)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate_seeds, uniform_times, FieldRegistry};
    use crate::grid::Grid;
    use std::f64::consts::{LN_2, PI};

    fn shifted_pair(shift: Vec<f64>) -> (FlowMap, FlowMap) {
        let g = Grid::uniform(1, 1, 4.0, 32).unwrap();
        let b = FieldRegistry::builtin().create("zero", &g, &toml::Table::new()).unwrap();
        let seeds: Vec<Vec<f64>> = (0..10).map(|i| vec![-0.9 + 0.2 * i as f64, 0.1]).collect();
        let x = integrate_seeds(&b, seeds.clone(), vec![0.5, 0.5], &[0.0, 1.0], 0.5).unwrap();
        let mut xb = x.clone();
        for s in 0..xb.len() {
            for k in 0..2 {
                let o = (s * 2 + k) * 2;
                xb.positions[o] += shift[0];
                xb.positions[o + 1] += shift[1];
            }
        }
        (x, xb)
    }

    #[test]
    fn phi_examples() {
        let (x, xb) = shifted_pair(vec![0.0, 0.0]);
        let a = AnisotropyMatrix::new(0.01, 0.1, 1, 1).unwrap();
        assert_eq!(phi_functional(&x, &xb, &a, 2.0, 3.0).unwrap(), vec![0.0, 0.0]);
        let (x, xb) = shifted_pair(vec![0.01, 0.0]);
        let measure = x.len() as f64 * x.cell_measure;
        let phi = phi_functional(&x, &xb, &a, 2.0, 3.0).unwrap();
        assert!((phi[1] - measure * LN_2).abs() < 1e-12);
        let (x, xb) = shifted_pair(vec![0.0, 0.3]);
        let phi = phi_functional(&x, &xb, &a, 2.0, 3.0).unwrap();
        assert!((phi[1] - measure * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn superlevel_bound_examples() {
        assert_eq!(superlevel_bound(0.0, 0.5, 0.1f64.ln(), 0.0, 0.0), 0.0);
        let br = PI;
        let v = superlevel_bound(LN_2 * br, 0.25, 0.25f64.ln(), 0.1, 0.2);
        assert!((v - (br + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn term2_example() {
        let v = term2_raw(0.1, 1.0, 1e-4f64.ln());
        assert!((v - 0.1 * (1.0 + 1e5f64.ln())).abs() < 1e-12);
        assert!((v - 1.2513).abs() < 1e-4);
    }

    fn flat_curve(ladder: &[f64]) -> DecayCurve {
        DecayCurve { r: 1.0, points: ladder.iter().map(|&l| (l, if l < 2.0 { 1.0 } else { 0.0 })).collect(), monotone: true }
    }

    fn equi() -> EquiData {
        let g = Grid::uniform(1, 0, 4.0, 64).unwrap();
        EquiData { data: vec![GridFunction::sample(&g, |x| (-x[0] * x[0]).exp()).unwrap()], p: 2.0, time_span: 1.0 }
    }

    #[test]
    fn selection_meets_budget() {
        let curve = flat_curve(&[1.0, 2.0, 4.0]);
        let e = equi();
        let inp = SelectionInputs {
            eta: 0.7,
            gamma: 0.5,
            r: 1.0,
            m_norm: 3.0,
            equi: &e,
            decay: (&curve, &curve),
            c_lambda: 1.0,
            split: BudgetSplit::default(),
            delta2_max: 1.0,
        };
        let c = select_parameters(&inp).unwrap();
        c.params.validate().unwrap();
        assert_eq!(c.params.lambda, 2.0);
        assert!(c.params.epsilon < c.params.alpha * c.params.alpha);
        assert!(c.budget_sum() <= 0.7 * (1.0 + 1e-12), "{:?}", c.budget_terms);
        let again = c.reevaluate();
        for (a, b) in again.iter().zip(&c.budget_terms) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
        assert!(c.budget_terms[0] <= 0.1 + 1e-15);
        let back = Certificate::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.budget_terms, c.budget_terms);
    }

    #[test]
    fn zero_measure_keeps_alpha_one() {
        let curve = flat_curve(&[1.0, 2.0]);
        let e = equi();
        let inp = SelectionInputs {
            eta: 0.7,
            gamma: 0.5,
            r: 1.0,
            m_norm: 0.0,
            equi: &e,
            decay: (&curve, &curve),
            c_lambda: 1.0,
            split: BudgetSplit::default(),
            delta2_max: 1.0,
        };
        assert_eq!(select_parameters(&inp).unwrap().params.alpha, 1.0);
    }

    #[test]
    fn infeasible_tails_name_the_stage() {
        let curve = DecayCurve { r: 1.0, points: vec![(1.0, 1.0), (2.0, 0.5)], monotone: true };
        let e = equi();
        let inp = SelectionInputs {
            eta: 0.7,
            gamma: 0.5,
            r: 1.0,
            m_norm: 0.0,
            equi: &e,
            decay: (&curve, &curve),
            c_lambda: 1.0,
            split: BudgetSplit::default(),
            delta2_max: 1.0,
        };
        assert!(matches!(select_parameters(&inp), Err(Error::Infeasible { stage: "lambda", .. })));
    }

    #[test]
    fn budget_allocation() {
        let s = BudgetSplit::default();
        assert!((s.tails * 0.7 - 0.2).abs() < 1e-15 && (s.measure * 0.7 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn identical_fields_are_stable() {
        let g = Grid::uniform(1, 1, 4.0, 64).unwrap();
        let b = FieldRegistry::builtin().create("rotation", &g, &toml::Table::new()).unwrap();
        let ball = Region::centered_ball(2, 1.0).unwrap();
        let times = uniform_times(0.0, 1.0, 5);
        let x = integrate_flow(&b, &ball, 16, &times, 0.01).unwrap();
        let opts = CertifyOptions {
            eta: 0.5,
            gamma: 0.1,
            r: 1.0,
            c_lambda: 1.0,
            lambda_ladder: vec![0.5, 1.0, 2.0],
            p: 2.0,
            split: BudgetSplit::default(),
            delta2_max: 1.0,
            growth_cap: 1.0,
        };
        let cert = certify_pair(&b, &b, &x, &x, &opts).unwrap();
        let rep = stability_report(&b, &b, &x, &x, &cert, 1024).unwrap();
        assert!(rep.holds && rep.lower_bound_holds);
        assert_eq!(rep.l1_difference, 0.0);
        assert_eq!(rep.rhs, 0.5);
        assert!(rep.superlevel.iter().all(|v| *v == 0.0));
    }
}
