//! State-equation solver and synthetic measurement generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::linalg::{cast_complex, czero, dotc, norm};
use crate::operators::GreenOperators;
use crate::scene::{rasterize_scene, ContrastMap, Grid, ImagingSetup, ShapeSpec};
use crate::special::hankel1_0;
use crate::{Complex, Complex64, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    IncidentDomain,
    TotalDomain,
    ScatteredReceiver,
}

/// Per-illumination complex fields, `n_illum x len`, row-major.
///
/// Receiver data may carry a mask marking which `(illumination, receiver)`
/// samples were measured; unmeasured samples are stored as zero and excluded
/// from norms.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet<T: Real = f64> {
    pub kind: FieldKind,
    pub n_illum: usize,
    pub len: usize,
    pub values: Vec<Complex<T>>,
    pub mask: Option<Vec<bool>>,
}

impl<T: Real> FieldSet<T> {
    pub fn new(kind: FieldKind, n_illum: usize, len: usize, values: Vec<Complex<T>>) -> Result<Self> {
        if values.len() != n_illum * len {
            return Err(Error::ShapeMismatch(format!(
                "field set of {} values for {n_illum} x {len}",
                values.len()
            )));
        }
        Ok(Self { kind, n_illum, len, values, mask: None })
    }

    pub fn zeros(kind: FieldKind, n_illum: usize, len: usize) -> Self {
        Self { kind, n_illum, len, values: vec![czero(); n_illum * len], mask: None }
    }

    /// Attaches a sample mask and zeroes unmeasured entries.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(Error::ShapeMismatch("mask length differs from field length".into()));
        }
        for (v, &keep) in self.values.iter_mut().zip(&mask) {
            if !keep {
                *v = czero();
            }
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn illum(&self, p: usize) -> &[Complex<T>] {
        &self.values[p * self.len..(p + 1) * self.len]
    }

    pub fn illum_mut(&mut self, p: usize) -> &mut [Complex<T>] {
        &mut self.values[p * self.len..(p + 1) * self.len]
    }

    pub fn is_measured(&self, idx: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[idx])
    }

    /// Number of measured samples.
    pub fn sample_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.values.len(),
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr().to_f64_lossy()).sum()
    }

    pub fn cast<U: Real>(&self) -> FieldSet<U> {
        FieldSet {
            kind: self.kind,
            n_illum: self.n_illum,
            len: self.len,
            values: cast_complex(&self.values),
            mask: self.mask.clone(),
        }
    }

    /// Multiplies every value by `c`.
    pub fn scaled(&self, c: Complex<T>) -> Self {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v = *v * c;
        }
        out
    }
}

/// Induced currents `J = chi * E_tot`, `n_illum x m^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentSet<T: Real = f64> {
    pub n_illum: usize,
    pub m: usize,
    pub values: Vec<Complex<T>>,
}

impl<T: Real> CurrentSet<T> {
    pub fn new(n_illum: usize, m: usize, values: Vec<Complex<T>>) -> Result<Self> {
        if values.len() != n_illum * m * m {
            return Err(Error::ShapeMismatch(format!(
                "current set of {} values for {n_illum} x {m}^2",
                values.len()
            )));
        }
        Ok(Self { n_illum, m, values })
    }

    pub fn zeros(n_illum: usize, m: usize) -> Self {
        Self { n_illum, m, values: vec![czero(); n_illum * m * m] }
    }

    pub fn illum(&self, p: usize) -> &[Complex<T>] {
        let n = self.m * self.m;
        &self.values[p * n..(p + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> CurrentSet<U> {
        CurrentSet { n_illum: self.n_illum, m: self.m, values: cast_complex(&self.values) }
    }

    pub fn scaled(&self, c: Complex<T>) -> Self {
        Self {
            n_illum: self.n_illum,
            m: self.m,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Unit-amplitude line-source incident field `(i/4) H0(k0 |r - r_t|)` on the grid.
pub fn incident_fields<T: Real>(setup: &ImagingSetup, grid: &Grid) -> Result<FieldSet<T>> {
    setup.check_outside(grid)?;
    let centers = grid.centers();
    let mut values = Vec::with_capacity(setup.n_tx * centers.len());
    for &(tx, ty) in &setup.tx_positions {
        for &(cx, cy) in &centers {
            let d = ((tx - cx).powi(2) + (ty - cy).powi(2)).sqrt();
            let v = Complex64::new(0.0, 0.25) * hankel1_0(setup.k0 * d);
            values.push(Complex::new(T::of(v.re), T::of(v.im)));
        }
    }
    FieldSet::new(FieldKind::IncidentDomain, setup.n_tx, centers.len(), values)
}

/// Line-source incident field evaluated at the receivers, `n_tx x n_rx`.
/// Receivers that coincide with their transmitter get zero.
pub fn incident_at_receivers(setup: &ImagingSetup) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(setup.n_tx * setup.n_rx);
    for &(tx, ty) in &setup.tx_positions {
        for &(rx, ry) in &setup.rx_positions {
            let d = ((tx - rx).powi(2) + (ty - ry).powi(2)).sqrt();
            if setup.k0 * d < 1e-9 {
                out.push(Complex64::new(0.0, 0.0));
                continue;
            }
            out.push(Complex64::new(0.0, 0.25) * hankel1_0(setup.k0 * d));
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative residual target `||b - A x|| / ||b||`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 2000 }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardSolution<T: Real = f64> {
    pub total: FieldSet<T>,
    pub currents: CurrentSet<T>,
    /// BiCGSTAB iterations used per illumination.
    pub iterations: Vec<usize>,
    /// Final verified relative residual per illumination.
    pub residuals: Vec<f64>,
}

struct StateOperator<'a, T: Real> {
    ops: &'a GreenOperators<T>,
    chi: &'a [Complex<T>],
}

impl<T: Real> StateOperator<'_, T> {
    /// `y = x - G_D (chi * x)`.
    fn apply(&self, x: &[Complex<T>], y: &mut [Complex<T>], ws: &mut crate::operators::GdWorkspace<T>) -> Result<()> {
        let cx: Vec<Complex<T>> = x.iter().zip(self.chi).map(|(a, c)| a * c).collect();
        self.ops.apply_gd_with(&cx, y, ws)?;
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = *xi - *yi;
        }
        Ok(())
    }
}

fn bicgstab<T: Real>(
    op: &StateOperator<'_, T>,
    b: &[Complex<T>],
    opts: &SolverOptions,
    illumination: usize,
) -> Result<(Vec<Complex<T>>, usize, f64)> {
    let n = b.len();
    let mut ws = op.ops.workspace();
    let bnorm = norm(b).to_f64_lossy();
    let mut x = b.to_vec();
    if bnorm == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let mut ax = vec![czero(); n];
    let residual = |x: &[Complex<T>], ax: &mut [Complex<T>], ws: &mut _| -> Result<Vec<Complex<T>>> {
        op.apply(x, ax, ws)?;
        Ok(b.iter().zip(ax.iter()).map(|(bi, ai)| bi - ai).collect())
    };
    let mut r = residual(&x, &mut ax, &mut ws)?;
    let mut history = vec![norm(&r).to_f64_lossy() / bnorm];
    let tol = opts.tol;
    let mut iters = 0;
    let mut v = vec![czero::<T>(); n];
    let mut t = vec![czero::<T>(); n];
    'restart: loop {
        if *history.last().unwrap() <= tol {
            return Ok((x, iters, *history.last().unwrap()));
        }
        let r_hat = r.clone();
        let mut p = vec![czero::<T>(); n];
        for vi in v.iter_mut() {
            *vi = czero();
        }
        let one = Complex::new(T::one(), T::zero());
        let (mut rho, mut alpha, mut omega) = (one, one, one);
        while iters < opts.max_iter {
            iters += 1;
            let rho_new = dotc(&r_hat, &r);
            if rho_new.norm() == T::zero() {
                r = residual(&x, &mut ax, &mut ws)?;
                history.push(norm(&r).to_f64_lossy() / bnorm);
                continue 'restart;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            for ((pi, ri), vi) in p.iter_mut().zip(&r).zip(&v) {
                *pi = ri + beta * (*pi - omega * vi);
            }
            op.apply(&p, &mut v, &mut ws)?;
            let denom = dotc(&r_hat, &v);
            if denom.norm() == T::zero() {
                r = residual(&x, &mut ax, &mut ws)?;
                history.push(norm(&r).to_f64_lossy() / bnorm);
                continue 'restart;
            }
            alpha = rho_new / denom;
            let s: Vec<Complex<T>> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
            if norm(&s).to_f64_lossy() / bnorm <= tol {
                for (xi, pi) in x.iter_mut().zip(&p) {
                    *xi += alpha * pi;
                }
                r = residual(&x, &mut ax, &mut ws)?;
                history.push(norm(&r).to_f64_lossy() / bnorm);
                continue 'restart;
            }
            op.apply(&s, &mut t, &mut ws)?;
            let tt = dotc(&t, &t);
            omega = if tt.norm() == T::zero() { czero() } else { dotc(&t, &s) / tt };
            for ((xi, pi), si) in x.iter_mut().zip(&p).zip(&s) {
                *xi += alpha * pi + omega * si;
            }
            for ((ri, si), ti) in r.iter_mut().zip(&s).zip(&t) {
                *ri = si - omega * ti;
            }
            rho = rho_new;
            let rel = norm(&r).to_f64_lossy() / bnorm;
            history.push(rel);
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!("BiCGSTAB residual, illumination {illumination}")));
            }
            if rel <= tol {
                // confirm with the true residual before accepting
                r = residual(&x, &mut ax, &mut ws)?;
                history.push(norm(&r).to_f64_lossy() / bnorm);
                continue 'restart;
            }
            if omega.norm() == T::zero() {
                continue 'restart;
            }
        }
        return Err(Error::NonConvergence {
            illumination,
            iterations: iters,
            residual_history: history,
        });
    }
}

/// Solves `(I - G_D diag(chi)) E_tot = E_inc` per illumination with BiCGSTAB.
pub fn solve_total_field<T: Real>(
    chi: &ContrastMap<T>,
    e_inc: &FieldSet<T>,
    ops: &GreenOperators<T>,
    opts: &SolverOptions,
) -> Result<ForwardSolution<T>> {
    if !(opts.tol > 0.0) {
        return Err(Error::Config(format!("solver tolerance must be positive, got {}", opts.tol)));
    }
    if e_inc.kind != FieldKind::IncidentDomain || e_inc.len != ops.n_cells() || chi.chi.len() != ops.n_cells() {
        return Err(Error::ShapeMismatch("incident field, contrast and operator disagree".into()));
    }
    if chi.chi.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err(Error::NonFinite("contrast map".into()));
    }
    let op = StateOperator { ops, chi: &chi.chi };
    let solved: Vec<(Vec<Complex<T>>, usize, f64)> = (0..e_inc.n_illum)
        .into_par_iter()
        .map(|p| bicgstab(&op, e_inc.illum(p), opts, p))
        .collect::<Result<_>>()?;
    let n = ops.n_cells();
    let mut total = Vec::with_capacity(e_inc.n_illum * n);
    let mut currents = Vec::with_capacity(e_inc.n_illum * n);
    let mut iterations = Vec::new();
    let mut residuals = Vec::new();
    for (e, it, res) in solved {
        currents.extend(e.iter().zip(&chi.chi).map(|(a, c)| a * c));
        total.extend(e);
        iterations.push(it);
        residuals.push(res);
    }
    Ok(ForwardSolution {
        total: FieldSet::new(FieldKind::TotalDomain, e_inc.n_illum, n, total)?,
        currents: CurrentSet::new(e_inc.n_illum, chi.m, currents)?,
        iterations,
        residuals,
    })
}

/// `E_sca = G_S J` per illumination.
pub fn scattered_fields<T: Real>(j: &CurrentSet<T>, ops: &GreenOperators<T>) -> Result<FieldSet<T>> {
    if j.m * j.m != ops.n_cells() {
        return Err(Error::ShapeMismatch(format!(
            "currents on a {}^2 grid, operator on {} cells",
            j.m,
            ops.n_cells()
        )));
    }
    let values = ops.apply_gs_batch(&j.values, j.n_illum)?;
    FieldSet::new(FieldKind::ScatteredReceiver, j.n_illum, ops.n_rx(), values)
}

/// Noiseless receiver data for `shapes`, generated on `data_grid` (which may
/// be finer than the inversion grid to avoid the inverse crime).
pub fn synthesize(shapes: &[ShapeSpec], data_grid: &Grid, setup: &ImagingSetup, opts: &SolverOptions) -> Result<FieldSet<f64>> {
    setup.check_outside(data_grid)?;
    let chi = rasterize_scene(shapes, data_grid)?;
    let ops = GreenOperators::<f64>::build(data_grid, setup)?;
    let e_inc = incident_fields::<f64>(setup, data_grid)?;
    let sol = solve_total_field(&chi, &e_inc, &ops, opts)?;
    scattered_fields(&sol.currents, &ops)
}

/// Adds circular complex Gaussian noise at the requested SNR. The variance is
/// `||E||^2 / (K 10^(snr/10))` over the `K` measured samples.
pub fn add_awgn<T: Real>(e_sca: &FieldSet<T>, snr_db: f64, seed: u64) -> Result<FieldSet<T>> {
    if e_sca.kind != FieldKind::ScatteredReceiver {
        return Err(Error::Config("noise is added to receiver data only".into()));
    }
    let k = e_sca.sample_count().max(1) as f64;
    let sigma2 = e_sca.norm_sqr() / (k * 10f64.powf(snr_db / 10.0));
    let std = (0.5 * sigma2).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = e_sca.clone();
    for (idx, v) in out.values.iter_mut().enumerate() {
        let nr: f64 = StandardNormal.sample(&mut rng);
        let ni: f64 = StandardNormal.sample(&mut rng);
        if e_sca.is_measured(idx) {
            *v += Complex::new(T::of(std * nr), T::of(std * ni));
        }
    }
    Ok(out)
}
