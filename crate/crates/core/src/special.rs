//! Integer-order Bessel and Hankel functions.
//!
//! `J_n` comes from Miller's backward recurrence normalized with
//! `J_0 + 2 sum J_2k = 1`, which is accurate for any real argument and for
//! complex arguments with moderate imaginary part. `Y_0` and `Y_1` use the
//! Neumann series in those `J_n` below [`ASYMPTOTIC_THRESHOLD`] and the Hankel
//! asymptotic expansion above it; higher `Y_n` follow by forward recurrence.

use std::f64::consts::{FRAC_2_PI, PI};

use num_complex::Complex64;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Arguments at or above this use the Hankel asymptotic expansion for order 0/1.
pub const ASYMPTOTIC_THRESHOLD: f64 = 25.0;

const RESCALE_ABOVE: f64 = 1e200;
const RESCALE_BY: f64 = 1e-200;

fn miller_start(nmax: usize, modulus: f64) -> usize {
    let top = (nmax as f64).max(modulus);
    let start = top + 30.0 + (40.0 * top).sqrt();
    let start = start.ceil() as usize;
    start + (start & 1)
}

/// `J_0(z) ..= J_nmax(z)` for complex `z`.
pub fn bessel_j_seq(z: Complex64, nmax: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); nmax + 1];
    if z.norm() == 0.0 {
        out[0] = Complex64::new(1.0, 0.0);
        return out;
    }
    let start = miller_start(nmax, z.norm() + 2.0 * z.im.abs());
    let mut vals = vec![Complex64::new(0.0, 0.0); start + 2];
    vals[start] = Complex64::new(1e-30, 0.0);
    let two_over_z = Complex64::new(2.0, 0.0) / z;
    let mut norm = Complex64::new(0.0, 0.0);
    for k in (1..=start).rev() {
        let prev = two_over_z * (k as f64) * vals[k] - vals[k + 1];
        vals[k - 1] = prev;
        if prev.norm() > RESCALE_ABOVE {
            for v in vals[k - 1..].iter_mut() {
                *v *= RESCALE_BY;
            }
            norm *= RESCALE_BY;
        }
        if k % 2 == 0 {
            norm += vals[k] * 2.0;
        }
    }
    norm += vals[0];
    // divide in two steps: complex division squares the modulus and would overflow
    let s = norm.norm();
    let unit = norm / s;
    for (o, v) in out.iter_mut().zip(vals.iter()) {
        *o = (v / s) / unit;
    }
    out
}

/// `J_0(x) ..= J_nmax(x)` for real `x`.
pub fn bessel_j_seq_real(x: f64, nmax: usize) -> Vec<f64> {
    let mut out = vec![0.0; nmax + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let start = miller_start(nmax, x.abs());
    let mut vals = vec![0.0; start + 2];
    vals[start] = 1e-30;
    let two_over_x = 2.0 / x;
    let mut norm = 0.0;
    for k in (1..=start).rev() {
        let prev = two_over_x * k as f64 * vals[k] - vals[k + 1];
        vals[k - 1] = prev;
        if prev.abs() > RESCALE_ABOVE {
            for v in vals[k - 1..].iter_mut() {
                *v *= RESCALE_BY;
            }
            norm *= RESCALE_BY;
        }
        if k % 2 == 0 {
            norm += 2.0 * vals[k];
        }
    }
    norm += vals[0];
    for (o, v) in out.iter_mut().zip(vals.iter()) {
        *o = v / norm;
    }
    out
}

/// Hankel asymptotic factors `(P, Q)` for order `nu` at large `x`.
fn hankel_pq(nu: f64, x: f64) -> (f64, f64) {
    let mu = 4.0 * nu * nu;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut term = 1.0;
    let mut last = f64::INFINITY;
    for k in 1..200 {
        let odd = (2 * k - 1) as f64;
        term *= (mu - odd * odd) / (k as f64 * 8.0 * x);
        let mag = term.abs();
        if mag > last || mag == 0.0 {
            break;
        }
        // a_k contributes to Q for odd k and P for even k, with alternating sign
        match k % 4 {
            1 => q += term,
            2 => p -= term,
            3 => q -= term,
            _ => p += term,
        }
        if mag < 1e-17 * p.abs().max(1e-300) {
            break;
        }
        last = mag;
    }
    (p, q)
}

/// `(J_nu(x), Y_nu(x))` for `nu` in {0, 1} and large `x`.
fn asymptotic_jy(nu: f64, x: f64) -> (f64, f64) {
    let (p, q) = hankel_pq(nu, x);
    let chi = x - (0.5 * nu + 0.25) * PI;
    let amp = (FRAC_2_PI / x).sqrt();
    let (s, c) = chi.sin_cos();
    (amp * (p * c - q * s), amp * (p * s + q * c))
}

/// `(J_0, J_1, Y_0, Y_1)` at `x > 0`.
pub fn bessel_jy01(x: f64) -> (f64, f64, f64, f64) {
    debug_assert!(x > 0.0);
    if x >= ASYMPTOTIC_THRESHOLD {
        let (j0, y0) = asymptotic_jy(0.0, x);
        let (j1, y1) = asymptotic_jy(1.0, x);
        return (j0, j1, y0, y1);
    }
    let nmax = miller_start(0, x);
    let j = bessel_j_seq_real(x, nmax);
    let lead = (x / 2.0).ln() + EULER_GAMMA;
    let mut sum0 = 0.0;
    let mut sum1 = 0.0;
    let mut k = 1;
    while 2 * k + 1 <= nmax {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum0 += sign * j[2 * k] / k as f64;
        sum1 += sign * (j[2 * k - 1] - j[2 * k + 1]) / k as f64;
        k += 1;
    }
    let y0 = FRAC_2_PI * lead * j[0] - 2.0 * FRAC_2_PI * sum0;
    let y1 = FRAC_2_PI * lead * j[1] - FRAC_2_PI * j[0] / x + FRAC_2_PI * sum1;
    (j[0], j[1], y0, y1)
}

/// `H_0^(1)(x)` at `x > 0`.
pub fn hankel1_0(x: f64) -> Complex64 {
    if x >= ASYMPTOTIC_THRESHOLD {
        let (j0, y0) = asymptotic_jy(0.0, x);
        return Complex64::new(j0, y0);
    }
    let (j0, _, y0, _) = bessel_jy01(x);
    Complex64::new(j0, y0)
}

/// `H_1^(1)(x)` at `x > 0`.
pub fn hankel1_1(x: f64) -> Complex64 {
    let (_, j1, _, y1) = bessel_jy01(x);
    Complex64::new(j1, y1)
}

/// `Y_0(x) ..= Y_nmax(x)` at `x > 0` by forward recurrence.
pub fn bessel_y_seq(x: f64, nmax: usize) -> Vec<f64> {
    let (_, _, y0, y1) = bessel_jy01(x);
    let mut y = Vec::with_capacity(nmax + 1);
    y.push(y0);
    if nmax >= 1 {
        y.push(y1);
    }
    for n in 1..nmax {
        let next = 2.0 * n as f64 / x * y[n] - y[n - 1];
        y.push(next);
    }
    y
}

/// `H_0^(1)(x) ..= H_nmax^(1)(x)` at `x > 0`.
pub fn hankel1_seq(x: f64, nmax: usize) -> Vec<Complex64> {
    let j = bessel_j_seq_real(x, nmax);
    let y = bessel_y_seq(x, nmax);
    j.into_iter()
        .zip(y)
        .map(|(j, y)| Complex64::new(j, y))
        .collect()
}

/// Derivatives from a sequence of `Z_0 ..= Z_{N}` for any cylinder function
/// `Z`: `Z_n' = (Z_{n-1} - Z_{n+1}) / 2`, `Z_0' = -Z_1`. Returns orders `0..N`.
pub fn cylinder_derivatives(seq: &[Complex64]) -> Vec<Complex64> {
    let n = seq.len().saturating_sub(1);
    (0..n)
        .map(|k| {
            if k == 0 {
                -seq[1]
            } else {
                (seq[k - 1] - seq[k + 1]) * 0.5
            }
        })
        .collect()
}
