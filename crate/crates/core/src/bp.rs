//! Backpropagation initial guess for the induced currents and permittivity.

use crate::forward::{CurrentSet, FieldKind, FieldSet};
use crate::linalg::czero;
use crate::operators::GreenOperators;
use crate::scene::ContrastMap;
use crate::{Complex, Error, Real, Result};

/// Pixels whose accumulated `sum_p |E_p|^2` falls below this get zero contrast.
pub const DEGENERATE_DENOM: f64 = 1e-30;

#[derive(Debug, Clone)]
pub struct BpCurrent<T: Real = f64> {
    pub currents: CurrentSet<T>,
    /// Per-illumination step length along the adjoint direction.
    pub gamma: Vec<Complex<T>>,
    /// Illuminations with no measured energy, whose current was set to zero.
    pub degenerate: Vec<bool>,
}

/// `J_p = gamma_p G_S^H E_p`, with `gamma_p` the scalar least-squares fit of
/// `G_S G_S^H E_p` to `E_p` over the measured samples.
pub fn bp_current<T: Real>(e_mea: &FieldSet<T>, ops: &GreenOperators<T>) -> Result<BpCurrent<T>> {
    if e_mea.kind != FieldKind::ScatteredReceiver {
        return Err(Error::Config("backpropagation needs receiver data".into()));
    }
    if e_mea.len != ops.n_rx() {
        return Err(Error::ShapeMismatch(format!(
            "{} receivers in data, {} in operator",
            e_mea.len,
            ops.n_rx()
        )));
    }
    let n_illum = e_mea.n_illum;
    let n = ops.n_cells();
    let mut back = ops.apply_gs_adjoint_batch(&e_mea.values, n_illum)?;
    let fwd = ops.apply_gs_batch(&back, n_illum)?;
    let mut gamma = Vec::with_capacity(n_illum);
    let mut degenerate = Vec::with_capacity(n_illum);
    for p in 0..n_illum {
        let mut num = czero::<T>();
        let mut den = T::zero();
        for r in 0..e_mea.len {
            let idx = p * e_mea.len + r;
            if e_mea.is_measured(idx) {
                num += fwd[idx].conj() * e_mea.values[idx];
                den += fwd[idx].norm_sqr();
            }
        }
        let g = if den > T::zero() && den.is_finite() {
            degenerate.push(false);
            num / den
        } else {
            log::warn!("illumination {p}: no measured energy, backpropagated current set to zero");
            degenerate.push(true);
            czero()
        };
        for v in back[p * n..(p + 1) * n].iter_mut() {
            *v = *v * g;
        }
        gamma.push(g);
    }
    Ok(BpCurrent {
        currents: CurrentSet::new(n_illum, ops.grid().m, back)?,
        gamma,
        degenerate,
    })
}

/// Per-pixel least-squares contrast `sum_p conj(E_p) J_p / sum_p |E_p|^2`.
///
/// `j` and `e_tot` are `n_illum x n` row-major. Returns the contrast and the
/// number of pixels whose denominator was below [`DEGENERATE_DENOM`].
pub fn contrast_ratio<T: Real>(j: &[Complex<T>], e_tot: &[Complex<T>], n: usize) -> (Vec<Complex<T>>, Vec<T>, usize) {
    let mut num = vec![czero::<T>(); n];
    let mut den = vec![T::zero(); n];
    for (jp, ep) in j.chunks_exact(n).zip(e_tot.chunks_exact(n)) {
        for q in 0..n {
            num[q] += ep[q].conj() * jp[q];
            den[q] += ep[q].norm_sqr();
        }
    }
    let floor = T::of(DEGENERATE_DENOM);
    let mut degenerate = 0;
    let chi = num
        .iter()
        .zip(&den)
        .map(|(a, &d)| {
            if d < floor {
                degenerate += 1;
                czero()
            } else {
                a / d
            }
        })
        .collect();
    (chi, den, degenerate)
}

/// `E_tot_p = E_inc_p + G_D J_p` for every illumination.
pub fn total_from_currents<T: Real>(
    j: &[Complex<T>],
    e_inc: &FieldSet<T>,
    ops: &GreenOperators<T>,
) -> Result<Vec<Complex<T>>> {
    use rayon::prelude::*;
    let n = ops.n_cells();
    if j.len() != e_inc.values.len() || e_inc.len != n {
        return Err(Error::ShapeMismatch("currents and incident field disagree".into()));
    }
    let mut out = vec![czero(); j.len()];
    out.par_chunks_mut(n)
        .zip(j.par_chunks(n))
        .zip(e_inc.values.par_chunks(n))
        .try_for_each_init(
            || ops.workspace(),
            |ws, ((o, jp), ep)| -> Result<()> {
                ops.apply_gd_with(jp, o, ws)?;
                for (a, b) in o.iter_mut().zip(ep) {
                    *a += *b;
                }
                Ok(())
            },
        )?;
    Ok(out)
}

/// Contrast implied by a set of currents: `E_tot = E_inc + G_D J`, then the
/// per-pixel least-squares ratio.
pub fn bp_permittivity<T: Real>(
    j0: &CurrentSet<T>,
    e_inc: &FieldSet<T>,
    ops: &GreenOperators<T>,
) -> Result<ContrastMap<T>> {
    if e_inc.kind != FieldKind::IncidentDomain || e_inc.n_illum != j0.n_illum || j0.m * j0.m != ops.n_cells() {
        return Err(Error::ShapeMismatch("currents, incident field and operator disagree".into()));
    }
    let e_tot = total_from_currents(&j0.values, e_inc, ops)?;
    let (chi, _, degenerate) = contrast_ratio(&j0.values, &e_tot, ops.n_cells());
    if degenerate > 0 {
        log::warn!("{degenerate} pixels had vanishing field energy; contrast set to zero there");
    }
    ContrastMap::from_chi(j0.m, chi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{incident_fields, scattered_fields, solve_total_field, SolverOptions};
    use crate::linalg::{dotc, norm, rel_l2};
    use crate::scene::{Grid, ImagingSetup};
    use crate::{Complex64, GreenOperators};

    fn small() -> (Grid, ImagingSetup, GreenOperators<f64>) {
        let grid = Grid::new(12, 0.15).unwrap();
        let setup = ImagingSetup::new(4e9, 6, 10, 1.5).unwrap();
        let ops = GreenOperators::build(&grid, &setup).unwrap();
        (grid, setup, ops)
    }

    fn data(n_illum: usize, n_rx: usize) -> FieldSet<f64> {
        let v = (0..n_illum * n_rx)
            .map(|k| Complex64::new((0.37 * k as f64).sin(), (0.11 * k as f64).cos()))
            .collect();
        FieldSet::new(FieldKind::ScatteredReceiver, n_illum, n_rx, v).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_current() {
        let (_, _, ops) = small();
        let e = FieldSet::<f64>::zeros(FieldKind::ScatteredReceiver, 6, 10);
        let bp = bp_current(&e, &ops).unwrap();
        assert!(bp.currents.values.iter().all(|v| v.norm() == 0.0));
        assert!(bp.degenerate.iter().all(|&d| d));
    }

    #[test]
    fn scales_with_data() {
        let (_, _, ops) = small();
        let e = data(6, 10);
        let c = Complex64::new(-0.7, 2.1);
        let j1 = bp_current(&e, &ops).unwrap().currents;
        let j2 = bp_current(&e.scaled(c), &ops).unwrap().currents;
        assert!(rel_l2(&j2.values, &j1.scaled(c).values) < 1e-12);
    }

    #[test]
    fn gamma_is_least_squares_step() {
        let (_, _, ops) = small();
        let e = data(6, 10);
        let bp = bp_current(&e, &ops).unwrap();
        for p in 0..6 {
            let ep = e.illum(p);
            let resid = |scale: f64| {
                let j: Vec<Complex64> = bp.currents.illum(p).iter().map(|v| v * scale).collect();
                let f = ops.apply_gs(&j).unwrap();
                f.iter().zip(ep).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>()
            };
            let r0 = resid(1.0);
            assert!(resid(1.01) > r0 && resid(0.99) > r0);
            let rot = |phi: f64| {
                let j: Vec<Complex64> =
                    bp.currents.illum(p).iter().map(|v| v * Complex64::from_polar(1.0, phi)).collect();
                let f = ops.apply_gs(&j).unwrap();
                f.iter().zip(ep).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>()
            };
            assert!(rot(0.01) > r0 && rot(-0.01) > r0);
        }
    }

    #[test]
    fn current_lies_in_adjoint_range() {
        // J = G_S^H y for some y; solve the normal equations for y and compare
        let (grid, _, ops) = small();
        let e = data(6, 10);
        let bp = bp_current(&e, &ops).unwrap();
        let n = grid.n_cells();
        let n_rx = 10;
        let gs = ops.gs();
        for p in 0..6 {
            let j = bp.currents.illum(p);
            // Gram matrix G G^H (n_rx x n_rx) and rhs G J
            let mut gram = vec![Complex64::new(0.0, 0.0); n_rx * n_rx];
            for a in 0..n_rx {
                for b in 0..n_rx {
                    gram[a * n_rx + b] = dotc(&gs[b * n..(b + 1) * n], &gs[a * n..(a + 1) * n]);
                }
            }
            let rhs = ops.apply_gs(j).unwrap();
            let y = solve_dense(gram, rhs, n_rx);
            let proj = ops.apply_gs_adjoint(&y).unwrap();
            let diff: Vec<Complex64> = j.iter().zip(&proj).map(|(a, b)| a - b).collect();
            assert!(norm(&diff) <= 1e-10 * norm(j));
        }
    }

    fn solve_dense(mut a: Vec<Complex64>, mut b: Vec<Complex64>, n: usize) -> Vec<Complex64> {
        for k in 0..n {
            let piv = (k..n).max_by(|&x, &y| a[x * n + k].norm().total_cmp(&a[y * n + k].norm())).unwrap();
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
            }
            b.swap(k, piv);
            for r in k + 1..n {
                let f = a[r * n + k] / a[k * n + k];
                for c in k..n {
                    let v = a[k * n + c];
                    a[r * n + c] -= f * v;
                }
                let v = b[k];
                b[r] -= f * v;
            }
        }
        let mut x = vec![Complex64::new(0.0, 0.0); n];
        for k in (0..n).rev() {
            let mut s = b[k];
            for c in k + 1..n {
                s -= a[k * n + c] * x[c];
            }
            x[k] = s / a[k * n + k];
        }
        x
    }

    #[test]
    fn zero_current_gives_unit_permittivity() {
        let (grid, setup, ops) = small();
        let einc = incident_fields::<f64>(&setup, &grid).unwrap();
        let chi = bp_permittivity(&CurrentSet::zeros(6, 12), &einc, &ops).unwrap();
        assert!(chi.eps_r().iter().all(|e| *e == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn consistent_currents_recover_contrast() {
        let (grid, setup, ops) = small();
        let einc = incident_fields::<f64>(&setup, &grid).unwrap();
        let truth: Vec<Complex64> =
            (0..144).map(|q| Complex64::new(0.3 + 0.01 * (q % 7) as f64, 0.02 * (q % 3) as f64)).collect();
        let chi = ContrastMap::from_chi(12, truth.clone()).unwrap();
        let sol = solve_total_field(&chi, &einc, &ops, &SolverOptions { tol: 1e-13, max_iter: 2000 }).unwrap();
        let rec = bp_permittivity(&sol.currents, &einc, &ops).unwrap();
        assert!(rel_l2(&rec.chi, &truth) < 1e-10);
    }

    #[test]
    fn degenerate_pixels_are_zeroed() {
        let j = vec![Complex64::new(1.0, 0.0); 4];
        let e = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(2.0, 0.0), Complex64::new(1e-20, 0.0)];
        let (chi, _, deg) = contrast_ratio(&j, &e, 4);
        assert_eq!(deg, 2);
        assert_eq!(chi[1], Complex64::new(0.0, 0.0));
        assert_eq!(chi[3], Complex64::new(0.0, 0.0));
        assert_eq!(chi[2], Complex64::new(0.5, 0.0));
    }

    #[test]
    fn invariant_to_common_source_phase() {
        let (grid, setup, ops) = small();
        let einc = incident_fields::<f64>(&setup, &grid).unwrap();
        let shapes = crate::scene::reference_disc();
        let chi = crate::scene::rasterize_scene(&shapes, &grid).unwrap();
        let sol = solve_total_field(&chi, &einc, &ops, &SolverOptions::default()).unwrap();
        let meas = scattered_fields(&sol.currents, &ops).unwrap();
        let c = Complex64::from_polar(1.0, 1.234);
        let base = bp_permittivity(&bp_current(&meas, &ops).unwrap().currents, &einc, &ops).unwrap();
        let rot = bp_permittivity(&bp_current(&meas.scaled(c), &ops).unwrap().currents, &einc.scaled(c), &ops).unwrap();
        assert!(rel_l2(&rot.chi, &base.chi) < 1e-12);
    }
}
