//! Physics losses on predicted currents and their adjoints.
//!
//! Complex gradients follow the convention `g = dL/dRe + i dL/dIm`, so a
//! linear map `z = A w` pulls back as `g_w = A^H g_z`.

use serde::{Deserialize, Serialize};

use crate::bp::{contrast_ratio, total_from_currents, DEGENERATE_DENOM};
use crate::forward::{FieldKind, FieldSet};
use crate::linalg::czero;
use crate::operators::GreenOperators;
use crate::{Complex, Error, Real, Result};

/// Smoothing inside the TV square root, used for the gradient only.
pub const TV_GRAD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub state: f64,
    pub data: f64,
    pub bound: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(state: f64, data: f64, bound: f64, tv: f64) -> Self {
        Self { state, data, bound, tv, total: state + data + bound + tv }
    }
}

/// Per-pixel contrast and the total field it was derived from.
#[derive(Debug, Clone)]
pub struct Contrast<T: Real> {
    pub chi: Vec<Complex<T>>,
    pub e_tot: Vec<Complex<T>>,
    /// Per-pixel `sum_p |E_p|^2`.
    pub denom: Vec<T>,
    pub degenerate: usize,
}

/// `E_tot = E_inc + G_D J`, then the per-pixel least-squares contrast.
pub fn compute_contrast<T: Real>(j: &[Complex<T>], e_inc: &FieldSet<T>, ops: &GreenOperators<T>) -> Result<Contrast<T>> {
    let e_tot = total_from_currents(j, e_inc, ops)?;
    let (chi, denom, degenerate) = contrast_ratio(j, &e_tot, ops.n_cells());
    Ok(Contrast { chi, e_tot, denom, degenerate })
}

/// `sum ||J - chi E||^2 / sum ||E_inc||^2`.
pub fn loss_state<T: Real>(j: &[Complex<T>], chi: &[Complex<T>], e_tot: &[Complex<T>], e_inc: &FieldSet<T>) -> Result<f64> {
    let inc = e_inc.norm_sqr();
    if inc == 0.0 {
        return Err(Error::ZeroNormalization("incident field is zero".into()));
    }
    let n = chi.len();
    let mut s = 0.0;
    for (jp, ep) in j.chunks_exact(n).zip(e_tot.chunks_exact(n)) {
        for q in 0..n {
            s += (jp[q] - chi[q] * ep[q]).norm_sqr().to_f64_lossy();
        }
    }
    Ok(s / inc)
}

/// `||G_S J - E_mea||^2 / ||E_mea||^2` over measured samples.
pub fn loss_data<T: Real>(j: &[Complex<T>], ops: &GreenOperators<T>, e_mea: &FieldSet<T>) -> Result<f64> {
    Ok(data_residual(j, ops, e_mea)?.1)
}

fn data_residual<T: Real>(j: &[Complex<T>], ops: &GreenOperators<T>, e_mea: &FieldSet<T>) -> Result<(Vec<Complex<T>>, f64, f64)> {
    if e_mea.kind != FieldKind::ScatteredReceiver || e_mea.len != ops.n_rx() {
        return Err(Error::ShapeMismatch("measured field does not match the receiver set".into()));
    }
    let m2 = e_mea.norm_sqr();
    if m2 == 0.0 {
        return Err(Error::ZeroNormalization("measured scattered field is zero".into()));
    }
    let mut r = ops.apply_gs_batch(j, e_mea.n_illum)?;
    let mut s = 0.0;
    for (idx, (ri, mi)) in r.iter_mut().zip(&e_mea.values).enumerate() {
        if e_mea.is_measured(idx) {
            *ri -= *mi;
            s += ri.norm_sqr().to_f64_lossy();
        } else {
            *ri = czero();
        }
    }
    Ok((r, s / m2, m2))
}

/// `alpha * sum max(0, 1 - Re eps_r)` with `eps_r = 1 + chi`.
pub fn loss_bound<T: Real>(chi: &[Complex<T>], alpha: f64) -> f64 {
    alpha * chi.iter().map(|c| (-c.re.to_f64_lossy()).max(0.0)).sum::<f64>()
}

/// Isotropic total variation over forward differences on the
/// `(m-1) x (m-1)` interior index range.
pub fn tv(u: &[f64], m: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..m - 1 {
        for j in 0..m - 1 {
            let c = u[i * m + j];
            let dx = u[i * m + j + 1] - c;
            let dy = u[(i + 1) * m + j] - c;
            s += (dx * dx + dy * dy).sqrt();
        }
    }
    s
}

fn tv_grad(u: &[f64], m: usize, scale: f64, out: &mut [f64]) {
    for i in 0..m - 1 {
        for j in 0..m - 1 {
            let c = u[i * m + j];
            let dx = u[i * m + j + 1] - c;
            let dy = u[(i + 1) * m + j] - c;
            let w = scale / (dx * dx + dy * dy + TV_GRAD_EPS).sqrt();
            out[i * m + j + 1] += dx * w;
            out[(i + 1) * m + j] += dy * w;
            out[i * m + j] -= (dx + dy) * w;
        }
    }
}

/// Adaptive weight `beta0 / mean |u|`; zero for an all-zero map, whose
/// variation is zero anyway.
pub fn tv_weight(u: &[f64], beta0: f64) -> f64 {
    let mean = u.iter().map(|v| v.abs()).sum::<f64>() / u.len() as f64;
    if mean > 0.0 {
        beta0 / mean
    } else {
        0.0
    }
}

/// TV weights for the real and imaginary parts of `chi`.
pub fn tv_weights<T: Real>(chi: &[Complex<T>], beta0: f64) -> (f64, f64) {
    let re: Vec<f64> = chi.iter().map(|c| c.re.to_f64_lossy()).collect();
    let im: Vec<f64> = chi.iter().map(|c| c.im.to_f64_lossy()).collect();
    (tv_weight(&re, beta0), tv_weight(&im, beta0))
}

/// `beta(Re chi) f(Re chi) + beta(Im chi) f(Im chi)`.
pub fn loss_tv<T: Real>(chi: &[Complex<T>], m: usize, beta0: f64) -> f64 {
    let (br, bi) = tv_weights(chi, beta0);
    loss_tv_with(chi, m, br, bi)
}

fn loss_tv_with<T: Real>(chi: &[Complex<T>], m: usize, br: f64, bi: f64) -> f64 {
    let re: Vec<f64> = chi.iter().map(|c| c.re.to_f64_lossy()).collect();
    let im: Vec<f64> = chi.iter().map(|c| c.im.to_f64_lossy()).collect();
    br * tv(&re, m) + bi * tv(&im, m)
}

/// Everything fixed during one reconstruction.
pub struct Problem<'a, T: Real> {
    pub ops: &'a GreenOperators<T>,
    pub e_inc: &'a FieldSet<T>,
    pub e_mea: &'a FieldSet<T>,
    pub alpha: f64,
    pub beta0: f64,
}

/// Loss value, its gradient with respect to `J`, and the contrast.
pub struct Evaluation<T: Real> {
    pub loss: LossBreakdown,
    pub grad_j: Vec<Complex<T>>,
    pub contrast: Contrast<T>,
    pub tv_weights: (f64, f64),
}

impl<T: Real> Problem<'_, T> {
    pub fn check(&self) -> Result<()> {
        let n = self.ops.n_cells();
        if self.e_inc.kind != FieldKind::IncidentDomain || self.e_inc.len != n {
            return Err(Error::ShapeMismatch("incident field does not match the grid".into()));
        }
        if self.e_mea.n_illum != self.e_inc.n_illum {
            return Err(Error::ShapeMismatch(format!(
                "{} illuminations measured, {} modelled",
                self.e_mea.n_illum, self.e_inc.n_illum
            )));
        }
        if self.alpha < 0.0 || self.beta0 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Losses without gradient.
    pub fn losses(&self, j: &[Complex<T>]) -> Result<(LossBreakdown, Contrast<T>)> {
        let c = compute_contrast(j, self.e_inc, self.ops)?;
        let m = self.ops.grid().m;
        let state = loss_state(j, &c.chi, &c.e_tot, self.e_inc)?;
        let data = loss_data(j, self.ops, self.e_mea)?;
        let bound = loss_bound(&c.chi, self.alpha);
        let tv = loss_tv(&c.chi, m, self.beta0);
        Ok((LossBreakdown::new(state, data, bound, tv), c))
    }

    /// Total loss and its reverse-mode gradient with respect to `J`.
    ///
    /// The TV weights are treated as constants. `frozen_tv` overrides them,
    /// which makes the returned value the exact function being differentiated.
    pub fn evaluate(&self, j: &[Complex<T>], frozen_tv: Option<(f64, f64)>) -> Result<Evaluation<T>> {
        let ops = self.ops;
        let n = ops.n_cells();
        let m = ops.grid().m;
        let n_illum = self.e_inc.n_illum;
        if j.len() != n_illum * n {
            return Err(Error::ShapeMismatch("current batch size".into()));
        }
        let c = compute_contrast(j, self.e_inc, ops)?;
        let inc2 = self.e_inc.norm_sqr();
        if inc2 == 0.0 {
            return Err(Error::ZeroNormalization("incident field is zero".into()));
        }

        // state
        let inv_inc = T::of(1.0 / inc2);
        let two = T::of(2.0);
        let mut state = 0.0;
        let mut g_j = vec![czero::<T>(); j.len()];
        let mut g_e = vec![czero::<T>(); j.len()];
        let mut g_chi = vec![czero::<T>(); n];
        for p in 0..n_illum {
            let jp = &j[p * n..(p + 1) * n];
            let ep = &c.e_tot[p * n..(p + 1) * n];
            for q in 0..n {
                let r = jp[q] - c.chi[q] * ep[q];
                state += r.norm_sqr().to_f64_lossy();
                let gr = r * two * inv_inc;
                g_j[p * n + q] += gr;
                g_chi[q] -= ep[q].conj() * gr;
                g_e[p * n + q] -= c.chi[q].conj() * gr;
            }
        }
        state /= inc2;

        // data
        let (resid, data, m2) = data_residual(j, ops, self.e_mea)?;
        let scale = T::of(2.0 / m2);
        let g_r: Vec<Complex<T>> = resid.iter().map(|r| r * scale).collect();
        let back = ops.apply_gs_adjoint_batch(&g_r, n_illum)?;
        for (a, b) in g_j.iter_mut().zip(&back) {
            *a += *b;
        }

        // bound
        let bound = loss_bound(&c.chi, self.alpha);
        let alpha = T::of(self.alpha);
        for (g, ch) in g_chi.iter_mut().zip(&c.chi) {
            if ch.re < T::zero() {
                g.re -= alpha;
            }
        }

        // tv
        let (br, bi) = frozen_tv.unwrap_or_else(|| tv_weights(&c.chi, self.beta0));
        let tv_val = loss_tv_with(&c.chi, m, br, bi);
        let re: Vec<f64> = c.chi.iter().map(|v| v.re.to_f64_lossy()).collect();
        let im: Vec<f64> = c.chi.iter().map(|v| v.im.to_f64_lossy()).collect();
        let mut gre = vec![0.0; n];
        let mut gim = vec![0.0; n];
        if br != 0.0 {
            tv_grad(&re, m, br, &mut gre);
        }
        if bi != 0.0 {
            tv_grad(&im, m, bi, &mut gim);
        }
        for q in 0..n {
            g_chi[q] += Complex::new(T::of(gre[q]), T::of(gim[q]));
        }

        // chi = N / D with N = sum conj(E) J, D = sum |E|^2
        let floor = T::of(DEGENERATE_DENOM);
        for q in 0..n {
            let d = c.denom[q];
            if d < floor {
                continue;
            }
            let gc = g_chi[q];
            let inv_d = T::one() / d;
            let s = -two * (gc.conj() * c.chi[q]).re * inv_d;
            for p in 0..n_illum {
                let k = p * n + q;
                let e = c.e_tot[k];
                g_j[k] += e * gc * inv_d;
                g_e[k] += gc.conj() * j[k] * inv_d + e * s;
            }
        }

        // E = E_inc + G_D J
        let mut tmp = vec![czero::<T>(); n];
        let mut ws = ops.workspace();
        for p in 0..n_illum {
            ops.apply_gd_adjoint_with(&g_e[p * n..(p + 1) * n], &mut tmp, &mut ws)?;
            for (a, b) in g_j[p * n..(p + 1) * n].iter_mut().zip(&tmp) {
                *a += *b;
            }
        }
        if g_j.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFinite("gradient with respect to the currents".into()));
        }
        Ok(Evaluation {
            loss: LossBreakdown::new(state, data, bound, tv_val),
            grad_j: g_j,
            contrast: c,
            tv_weights: (br, bi),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{incident_fields, scattered_fields, solve_total_field, SolverOptions};
    use crate::scene::{rasterize_scene, ContrastMap, Grid, ImagingSetup};
    use crate::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_c(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    struct Fixture {
        ops: GreenOperators<f64>,
        e_inc: FieldSet<f64>,
        e_mea: FieldSet<f64>,
    }

    fn fixture(m: usize, n_illum: usize) -> Fixture {
        let grid = Grid::new(m, 0.15).unwrap();
        let setup = ImagingSetup::new(4e9, n_illum, 8, 1.0).unwrap();
        let ops = GreenOperators::build(&grid, &setup).unwrap();
        let e_inc = incident_fields(&setup, &grid).unwrap();
        let chi = rasterize_scene(&crate::scene::reference_disc(), &grid).unwrap();
        let sol = solve_total_field(&chi, &e_inc, &ops, &SolverOptions { tol: 1e-12, max_iter: 2000 }).unwrap();
        let e_mea = scattered_fields(&sol.currents, &ops).unwrap();
        Fixture { ops, e_inc, e_mea }
    }

    #[test]
    fn state_loss_formula() {
        let f = fixture(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = rand_c(&mut rng, 3 * 36);
        let chi = vec![Complex64::new(0.0, 0.0); 36];
        let e = rand_c(&mut rng, 3 * 36);
        let want = j.iter().map(|v| v.norm_sqr()).sum::<f64>() / f.e_inc.norm_sqr();
        assert!((loss_state(&j, &chi, &e, &f.e_inc).unwrap() - want).abs() <= 1e-14 * want);
        // explicit summation with non-zero chi
        let chi = rand_c(&mut rng, 36);
        let mut s = 0.0;
        for p in 0..3 {
            for q in 0..36 {
                let r = j[p * 36 + q] - chi[q] * e[p * 36 + q];
                s += r.re * r.re + r.im * r.im;
            }
        }
        let got = loss_state(&j, &chi, &e, &f.e_inc).unwrap();
        assert!((got - s / f.e_inc.norm_sqr()).abs() <= 1e-13 * got);
    }

    #[test]
    fn data_loss_identities() {
        let f = fixture(6, 3);
        let zero = vec![Complex64::new(0.0, 0.0); 3 * 36];
        assert_eq!(loss_data(&zero, &f.ops, &f.e_mea).unwrap(), 1.0);
        let empty = FieldSet::<f64>::zeros(FieldKind::ScatteredReceiver, 3, 8);
        assert!(matches!(loss_data(&zero, &f.ops, &empty), Err(Error::ZeroNormalization(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = rand_c(&mut rng, 3 * 36);
        let pred = f.ops.apply_gs_batch(&j, 3).unwrap();
        let num: f64 = pred.iter().zip(&f.e_mea.values).map(|(a, b)| (a - b).norm_sqr()).sum();
        let got = loss_data(&j, &f.ops, &f.e_mea).unwrap();
        assert!((got - num / f.e_mea.norm_sqr()).abs() <= 1e-12 * got);
        // joint complex scaling of currents and data
        let c = Complex64::new(0.3, -1.7);
        let js: Vec<Complex64> = j.iter().map(|v| v * c).collect();
        let scaled = loss_data(&js, &f.ops, &f.e_mea.scaled(c)).unwrap();
        assert!((scaled - got).abs() <= 1e-12 * got);
    }

    #[test]
    fn ground_truth_is_near_minimizer() {
        let grid = Grid::new(16, 0.15).unwrap();
        let setup = ImagingSetup::new(4e9, 8, 12, 1.5).unwrap();
        let ops = GreenOperators::build(&grid, &setup).unwrap();
        let e_inc = incident_fields(&setup, &grid).unwrap();
        let chi = rasterize_scene(&crate::scene::reference_disc(), &grid).unwrap();
        let sol = solve_total_field(&chi, &e_inc, &ops, &SolverOptions { tol: 1e-10, max_iter: 2000 }).unwrap();
        let e_mea = scattered_fields(&sol.currents, &ops).unwrap();
        let prob = Problem { ops: &ops, e_inc: &e_inc, e_mea: &e_mea, alpha: 1e-4, beta0: 1e-5 };
        let (loss, c) = prob.losses(&sol.currents.values).unwrap();
        assert!(loss.state + loss.data < 1e-8, "{loss:?}");
        assert_eq!(loss.bound, 0.0);
        let rec = ContrastMap::from_chi(16, c.chi).unwrap();
        assert!(crate::linalg::rel_l2(&rec.chi, &chi.chi) < 1e-6);
    }

    #[test]
    fn bound_loss() {
        let mut chi = vec![Complex64::new(0.0, 0.0); 9];
        assert_eq!(loss_bound(&chi, 1e-4), 0.0);
        chi[4] = Complex64::new(-0.5, 0.1);
        assert!((loss_bound(&chi, 1e-4) - 5e-5).abs() < 1e-18);
        chi[4] = Complex64::new(0.7, -3.0);
        assert_eq!(loss_bound(&chi, 1e-4), 0.0);
    }

    #[test]
    fn tv_identities() {
        let m = 7;
        let constant = vec![Complex64::new(0.8, -0.2); m * m];
        assert_eq!(loss_tv(&constant, m, 1e-5), 0.0);
        // vertical step edge of height h
        let h = 0.37;
        let step: Vec<f64> = (0..m * m).map(|k| if k % m >= 3 { h } else { 0.0 }).collect();
        assert!((tv(&step, m) - (m - 1) as f64 * h).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base: Vec<Complex64> = (0..m * m).map(|_| Complex64::new(rng.random_range(0.0..2.0), 0.0)).collect();
        let l0 = loss_tv(&base, m, 1e-5);
        for c in [0.01, 0.5, 3.0, 1e3] {
            let s: Vec<Complex64> = base.iter().map(|v| v * c).collect();
            assert!((loss_tv(&s, m, 1e-5) - l0).abs() <= 1e-12 * l0, "scale {c}");
        }
    }

    #[test]
    fn contrast_matches_brute_force_least_squares() {
        let f = fixture(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let j = rand_c(&mut rng, 3 * 36);
        let c = compute_contrast(&j, &f.e_inc, &f.ops).unwrap();
        let obj = |q: usize, x: Complex64| -> f64 {
            (0..3).map(|p| (j[p * 36 + q] - x * c.e_tot[p * 36 + q]).norm_sqr()).sum()
        };
        for q in 0..36 {
            // the objective is isotropic in x, so its stationarity condition
            // splits into one scalar root per component; bisect each
            let grad = |x: Complex64| -> Complex64 {
                (0..3)
                    .map(|p| c.e_tot[p * 36 + q].conj() * (x * c.e_tot[p * 36 + q] - j[p * 36 + q]))
                    .sum()
            };
            let bisect = |f: &dyn Fn(f64) -> f64| -> f64 {
                let (mut lo, mut hi) = (-1e6, 1e6);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            let re = bisect(&|t| grad(Complex64::new(t, 0.0)).re);
            let im = bisect(&|t| grad(Complex64::new(re, t)).im);
            let x = Complex64::new(re, im);
            assert!((x - c.chi[q]).norm() <= 1e-10 * (1.0 + x.norm()), "pixel {q}");
            for d in [1e-3, -1e-3] {
                assert!(obj(q, c.chi[q] + d) > obj(q, c.chi[q]));
                assert!(obj(q, c.chi[q] + Complex64::new(0.0, d)) > obj(q, c.chi[q]));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_in_j() {
        let f = fixture(5, 3);
        let prob = Problem { ops: &f.ops, e_inc: &f.e_inc, e_mea: &f.e_mea, alpha: 1e-2, beta0: 1e-3 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scale = f.e_inc.values[0].norm();
        let j: Vec<Complex64> = rand_c(&mut rng, 3 * 25).into_iter().map(|v| v * scale).collect();
        let ev = prob.evaluate(&j, None).unwrap();
        let frozen = Some(ev.tv_weights);
        for k in 0..j.len() {
            for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                let h = 1e-6 * scale;
                let mut a = j.clone();
                a[k] += dir * h;
                let mut b = j.clone();
                b[k] -= dir * h;
                let fd = (prob.evaluate(&a, frozen).unwrap().loss.total - prob.evaluate(&b, frozen).unwrap().loss.total) / (2.0 * h);
                let an = if dir.re == 1.0 { ev.grad_j[k].re } else { ev.grad_j[k].im };
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8 / scale);
                assert!(err < 1e-4, "entry {k}: fd {fd} vs {an}");
            }
        }
    }
}
