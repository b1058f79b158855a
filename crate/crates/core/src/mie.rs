//! Analytic scattering by a homogeneous circular cylinder under line-source
//! illumination. Independent of the moment-method path and used to check it.

use crate::forward::{FieldKind, FieldSet};
use crate::scene::{Grid, ImagingSetup};
use crate::special::{bessel_j_seq, bessel_j_seq_real, cylinder_derivatives, hankel1_0, hankel1_seq};
use crate::{Complex64, Error, Result};

/// Agreement required between order `N` and order `2N` truncations.
const DOUBLING_TOL: f64 = 1e-10;

struct Coefficients {
    /// Exterior scattering coefficients `a_n`.
    a: Vec<Complex64>,
    /// Interior coefficients `b_n`.
    b: Vec<Complex64>,
    k1: Complex64,
}

fn coefficients(k0: f64, radius: f64, eps_r: Complex64, nmax: usize) -> Coefficients {
    let k1 = k0 * eps_r.sqrt();
    let x0 = k0 * radius;
    let x1 = k1 * radius;
    let j0: Vec<Complex64> = bessel_j_seq_real(x0, nmax + 1).into_iter().map(Complex64::from).collect();
    let j0d = cylinder_derivatives(&j0);
    let j1 = bessel_j_seq(x1, nmax + 1);
    let j1d = cylinder_derivatives(&j1);
    let h = hankel1_seq(x0, nmax + 1);
    let hd = cylinder_derivatives(&h);
    let mut a = Vec::with_capacity(nmax + 1);
    let mut b = Vec::with_capacity(nmax + 1);
    for n in 0..=nmax {
        let den = k0 * j1[n] * hd[n] - k1 * j1d[n] * h[n];
        a.push((k1 * j1d[n] * j0[n] - k0 * j1[n] * j0d[n]) / den);
        b.push(k0 * (j0[n] * hd[n] - j0d[n] * h[n]) / den);
    }
    Coefficients { a, b, k1 }
}

fn validate(radius: f64, eps_r: Complex64, setup: &ImagingSetup) -> Result<()> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Geometry(format!("disc radius must be positive, got {radius}")));
    }
    if !(eps_r.re.is_finite() && eps_r.im.is_finite()) {
        return Err(Error::NonFinite("disc permittivity".into()));
    }
    for (label, pts) in [("transmitter", &setup.tx_positions), ("receiver", &setup.rx_positions)] {
        for (k, &(x, y)) in pts.iter().enumerate() {
            if x.hypot(y) <= radius {
                return Err(Error::Geometry(format!("{label} {k} lies inside the cylinder")));
            }
        }
    }
    Ok(())
}

fn rel_change(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn scattered_at(setup: &ImagingSetup, coef: &[Complex64], nmax: usize) -> Vec<Complex64> {
    let k0 = setup.k0;
    let tx_h: Vec<Vec<Complex64>> = setup
        .tx_positions
        .iter()
        .map(|&(x, y)| hankel1_seq(k0 * x.hypot(y), nmax))
        .collect();
    let rx_h: Vec<Vec<Complex64>> = setup
        .rx_positions
        .iter()
        .map(|&(x, y)| hankel1_seq(k0 * x.hypot(y), nmax))
        .collect();
    let quarter_i = Complex64::new(0.0, 0.25);
    let mut out = Vec::with_capacity(setup.n_tx * setup.n_rx);
    for (t, &(tx, ty)) in setup.tx_positions.iter().enumerate() {
        let phi_t = ty.atan2(tx);
        for (r, &(rx, ry)) in setup.rx_positions.iter().enumerate() {
            let dphi = ry.atan2(rx) - phi_t;
            let mut s = coef[0] * tx_h[t][0] * rx_h[r][0];
            for n in 1..=nmax {
                s += 2.0 * coef[n] * tx_h[t][n] * rx_h[r][n] * (n as f64 * dphi).cos();
            }
            out.push(quarter_i * s);
        }
    }
    out
}

/// Scattered field at every receiver for every line-source transmitter, for a
/// homogeneous disc centred at the origin.
///
/// The series is truncated at `N = ceil(max(k0 a, |k1| a)) + 10` and accepted
/// only when the order-`2N` sum agrees to `1e-10` relative.
pub fn mie_reference(radius: f64, eps_r: Complex64, setup: &ImagingSetup) -> Result<FieldSet<f64>> {
    validate(radius, eps_r, setup)?;
    let k0 = setup.k0;
    let k1 = k0 * eps_r.sqrt();
    let n = ((k0 * radius).max(k1.norm() * radius)).ceil() as usize + 10;
    let coef = coefficients(k0, radius, eps_r, 2 * n);
    let low = scattered_at(setup, &coef.a, n);
    let high = scattered_at(setup, &coef.a, 2 * n);
    let change = rel_change(&low, &high);
    if !(change < DOUBLING_TOL) {
        return Err(Error::SeriesNonConvergence(format!(
            "cylinder series changed by {change:.3e} when doubling order {n}"
        )));
    }
    FieldSet::new(FieldKind::ScatteredReceiver, setup.n_tx, setup.n_rx, high)
}

fn total_on_grid(
    setup: &ImagingSetup,
    grid: &Grid,
    radius: f64,
    coef: &Coefficients,
    nmax: usize,
) -> Vec<Complex64> {
    let k0 = setup.k0;
    let quarter_i = Complex64::new(0.0, 0.25);
    let centers = grid.centers();
    // per-cell radial functions do not depend on the transmitter
    let radial: Vec<Vec<Complex64>> = centers
        .iter()
        .map(|&(x, y)| {
            let rho = x.hypot(y);
            if rho < radius {
                bessel_j_seq(coef.k1 * rho, nmax)
            } else {
                hankel1_seq(k0 * rho, nmax)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(setup.n_tx * centers.len());
    for &(tx, ty) in &setup.tx_positions {
        let rho_t = tx.hypot(ty);
        let phi_t = ty.atan2(tx);
        let ht = hankel1_seq(k0 * rho_t, nmax);
        for (q, &(x, y)) in centers.iter().enumerate() {
            let rho = x.hypot(y);
            let inside = rho < radius;
            let c = if inside { &coef.b } else { &coef.a };
            let f = &radial[q];
            let dphi = y.atan2(x) - phi_t;
            let mut s = c[0] * ht[0] * f[0];
            for n in 1..=nmax {
                s += 2.0 * c[n] * ht[n] * f[n] * (n as f64 * dphi).cos();
            }
            let mut e = quarter_i * s;
            if !inside {
                let d = (tx - x).hypot(ty - y);
                e += quarter_i * hankel1_0(k0 * d);
            }
            out.push(e);
        }
    }
    out
}

/// Total field on the grid cell centres for a homogeneous disc at the origin.
/// Inside the disc the interior expansion is used, outside it the incident
/// field plus the exterior scattered expansion.
pub fn mie_interior_field(
    radius: f64,
    eps_r: Complex64,
    setup: &ImagingSetup,
    grid: &Grid,
) -> Result<FieldSet<f64>> {
    validate(radius, eps_r, setup)?;
    setup.check_outside(grid)?;
    let k0 = setup.k0;
    let k1 = k0 * eps_r.sqrt();
    let rho_max = grid.half_side() * std::f64::consts::SQRT_2;
    let n = ((k0 * rho_max).max(k1.norm() * radius)).ceil() as usize + 15;
    let coef = coefficients(k0, radius, eps_r, 2 * n);
    let low = total_on_grid(setup, grid, radius, &coef, n);
    let high = total_on_grid(setup, grid, radius, &coef, 2 * n);
    let change = rel_change(&low, &high);
    if !(change < DOUBLING_TOL) {
        return Err(Error::SeriesNonConvergence(format!(
            "interior series changed by {change:.3e} when doubling order {n}"
        )));
    }
    FieldSet::new(FieldKind::TotalDomain, setup.n_tx, grid.n_cells(), high)
}
