//! Deterministic point clouds on spheres.

use std::f64::consts::PI;

pub fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

pub const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Point `i` of the Halton sequence in `[0,1)^d`, `d <= 8`.
pub fn halton(i: usize, d: usize, out: &mut [f64]) {
    for (a, o) in out.iter_mut().enumerate().take(d) {
        *o = radical_inverse(i, PRIMES[a]);
    }
}

/// `count` unit vectors in `R^d`, closed under `x -> -x` when `count` is
/// even. Uniform angles for `d = 2`, a Fibonacci spiral for `d = 3` and
/// normalized Halton-Gaussian points above.
pub fn sphere_cloud(d: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(d >= 1 && d <= PRIMES.len() / 2 * 2, "sphere cloud supports 1 <= d <= 8");
    if count == 0 {
        return Vec::new();
    }
    if d == 1 {
        return (0..count).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
    }
    if d == 2 {
        return (0..count)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
    }
    let half = count / 2;
    let mut pts: Vec<Vec<f64>> = (0..half.max(1))
        .map(|i| if d == 3 { fibonacci(i, half.max(1)) } else { halton_direction(d, i + 1) })
        .collect();
    if count % 2 == 0 {
        let neg: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| -v).collect()).collect();
        pts.extend(neg);
    } else if count > 1 {
        let neg: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| -v).collect()).collect();
        pts.extend(neg);
        pts.push(if d == 3 { vec![0.0, 0.0, 1.0] } else { unit(d, d - 1) });
    }
    pts.truncate(count);
    pts
}

fn unit(d: usize, a: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[a] = 1.0;
    e
}

fn fibonacci(i: usize, n: usize) -> Vec<f64> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let z = 1.0 - (2.0 * i as f64 + 1.0) / (2.0 * n as f64);
    let r = (1.0 - z * z).max(0.0).sqrt();
    let t = golden * i as f64;
    vec![r * t.cos(), r * t.sin(), z]
}

fn halton_direction(d: usize, i: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(d);
    let mut k = 0;
    while g.len() < d {
        let u1 = radical_inverse(i, PRIMES[k]).max(1e-12);
        let u2 = radical_inverse(i, PRIMES[k + 1]);
        let r = (-2.0 * u1.ln()).sqrt();
        g.push(r * (2.0 * PI * u2).cos());
        if g.len() < d {
            g.push(r * (2.0 * PI * u2).sin());
        }
        k += 2;
    }
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    g.into_iter().map(|v| v / n).collect()
}

/// Surface measure of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 2.0 * PI / (d as f64 - 2.0) * sphere_area(d - 2),
    }
}

/// Lebesgue measure of the unit ball in `R^d`.
pub fn ball_volume(d: usize) -> f64 {
    sphere_area(d) / d as f64
}
