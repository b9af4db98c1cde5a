//! Axis-wise FFTs on row-major arrays and discrete frequency grids.

use std::cell::RefCell;
use std::ops::Range;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::Grid;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place FFT along each axis in `axes` of a row-major array with
/// `shape`. The inverse transform is normalized by `1/n` per axis.
pub fn fft_axes(data: &mut [Complex64], shape: &[usize], axes: Range<usize>, inverse: bool) {
    debug_assert_eq!(data.len(), shape.iter().product::<usize>());
    for a in axes {
        let n = shape[a];
        if n == 1 {
            continue;
        }
        let fft = PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            if inverse {
                p.plan_fft_inverse(n)
            } else {
                p.plan_fft_forward(n)
            }
        });
        let stride: usize = shape[a + 1..].iter().product();
        if stride == 1 {
            fft.process(data);
        } else {
            let block = n * stride;
            let mut buf = vec![Complex64::new(0.0, 0.0); block];
            for chunk in data.chunks_mut(block) {
                for k in 0..n {
                    for j in 0..stride {
                        buf[j * n + k] = chunk[k * stride + j];
                    }
                }
                fft.process(&mut buf);
                for k in 0..n {
                    for j in 0..stride {
                        chunk[k * stride + j] = buf[j * n + k];
                    }
                }
            }
        }
        if inverse {
            let s = 1.0 / n as f64;
            data.iter_mut().for_each(|z| *z *= s);
        }
    }
}

pub fn to_complex(u: &[f64]) -> Vec<Complex64> {
    u.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Forward transform over all axes of a real array.
pub fn forward(u: &[f64], shape: &[usize]) -> Vec<Complex64> {
    let mut z = to_complex(u);
    fft_axes(&mut z, shape, 0..shape.len(), false);
    z
}

/// Inverse transform over all axes; returns the real part and the largest
/// imaginary residue.
pub fn inverse_real(mut z: Vec<Complex64>, shape: &[usize]) -> (Vec<f64>, f64) {
    fft_axes(&mut z, shape, 0..shape.len(), true);
    let residue = z.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    (z.into_iter().map(|c| c.re).collect(), residue)
}

/// Signed mode number of FFT index `k` for length `n`; the Nyquist index
/// `n/2` maps to `-n/2`.
pub fn signed_mode(k: usize, n: usize) -> i64 {
    if k < n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Angular frequency of FFT index `k` on axis `a`: `pi * m / w`.
pub fn frequency(grid: &Grid, a: usize, k: usize) -> f64 {
    std::f64::consts::PI * signed_mode(k, grid.points()[a]) as f64 / grid.half_width()[a]
}

/// Evaluate a multiplier on every discrete frequency of `grid`.
///
/// At modes with Nyquist components the value is averaged over the sign
/// flips of those components so that real inputs map to real outputs. The
/// zero mode takes `at_zero`.
pub fn multiplier_grid(
    grid: &Grid,
    multiplier: &dyn Fn(&[f64]) -> Complex64,
    at_zero: Complex64,
) -> Result<Vec<Complex64>> {
    let d = grid.dim();
    let pts = grid.points();
    let mut idx = vec![0usize; d];
    let mut xi = vec![0.0; d];
    let mut flipped = vec![0.0; d];
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        grid.unravel(i, &mut idx);
        let mut nyq = Vec::new();
        for a in 0..d {
            xi[a] = frequency(grid, a, idx[a]);
            if 2 * idx[a] == pts[a] {
                nyq.push(a);
            }
        }
        let m = if xi.iter().all(|&v| v == 0.0) {
            at_zero
        } else if nyq.is_empty() {
            multiplier(&xi)
        } else {
            let mut acc = Complex64::new(0.0, 0.0);
            for mask in 0..(1usize << nyq.len()) {
                flipped.copy_from_slice(&xi);
                for (b, &a) in nyq.iter().enumerate() {
                    if mask >> b & 1 == 1 {
                        flipped[a] = -flipped[a];
                    }
                }
                acc += multiplier(&flipped);
            }
            acc / (1usize << nyq.len()) as f64
        };
        if !(m.re.is_finite() && m.im.is_finite()) {
            return Err(Error::NonFiniteMultiplier(xi.clone()));
        }
        out.push(m);
    }
    Ok(out)
}

/// Periodic circular convolution of two real arrays of the same shape.
pub fn convolve(u: &[f64], weights: &[f64], shape: &[usize]) -> Vec<f64> {
    let a = forward(u, shape);
    let b = forward(weights, shape);
    let prod = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    inverse_real(prod, shape).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_2d() {
        let shape = [4, 6];
        let u: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let (back, res) = inverse_real(forward(&u, &shape), &shape);
        assert!(res < 1e-14);
        for (a, b) in u.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn convolution_with_delta_shifts() {
        let shape = [8];
        let u: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let mut w = vec![0.0; 8];
        w[1] = 1.0;
        let c = convolve(&u, &w, &shape);
        for i in 0..8 {
            assert!((c[i] - u[(i + 7) % 8]).abs() < 1e-12);
        }
    }

    #[test]
    fn nyquist_mode_of_sign_multiplier_vanishes() {
        let g = Grid::uniform(1, 0, 1.0, 8).unwrap();
        let m = multiplier_grid(&g, &|xi| Complex64::new(0.0, -xi[0].signum()), Complex64::new(0.0, 0.0)).unwrap();
        assert_eq!(m[4], Complex64::new(0.0, 0.0));
        assert_eq!(m[1], Complex64::new(0.0, -1.0));
        assert_eq!(m[7], Complex64::new(0.0, 1.0));
    }
}
