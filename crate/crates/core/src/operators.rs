//! Discretized Green's operators of the state and data equations.
//!
//! Pixel basis with point matching, time convention `exp(-i omega t)`:
//! `g(r) = (i/4) H0(k0 r)`. Off-diagonal entries are `k0^2 dA g(|r_p - r_q|)`;
//! the diagonal integrates `k0^2 g` over an equal-area disc of radius
//! `a = cell / sqrt(pi)`, which gives `(i/2) pi k0 a H1(k0 a) - 1`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::linalg::{cast_complex, czero, split};
use crate::scene::{Grid, ImagingSetup};
use crate::special::{hankel1_0, hankel1_1};
use crate::{Complex, Error, Real, Result};

/// Scalar free-space Green's function `(i/4) H0^(1)(k0 dist)`.
pub fn green2d(k0: f64, dist: f64) -> Result<Complex64> {
    if !(dist > 0.0) || !dist.is_finite() {
        return Err(Error::Domain(format!("green2d needs dist > 0, got {dist}")));
    }
    if !(k0 > 0.0) {
        return Err(Error::Domain(format!("green2d needs k0 > 0, got {k0}")));
    }
    Ok(green_unchecked(k0, dist))
}

#[inline]
fn green_unchecked(k0: f64, dist: f64) -> Complex64 {
    Complex64::new(0.0, 0.25) * hankel1_0(k0 * dist)
}

/// Diagonal entry of `G_D` from the equal-area circular cell.
pub fn self_term(cell_size: f64, k0: f64) -> Complex64 {
    let a = cell_size / std::f64::consts::PI.sqrt();
    let x = k0 * a;
    Complex64::new(0.0, 0.5) * std::f64::consts::PI * x * hankel1_1(x) - 1.0
}

/// Dense `G_S` (`n_rx x m^2`, row-major) in `f64`.
pub fn build_gs(grid: &Grid, setup: &ImagingSetup) -> Result<Vec<Complex64>> {
    let h = grid.half_side();
    for (r, &(x, y)) in setup.rx_positions.iter().enumerate() {
        if x.abs() <= h && y.abs() <= h {
            return Err(Error::Geometry(format!(
                "receiver {r} at ({x:.4}, {y:.4}) lies inside the DOI"
            )));
        }
    }
    let scale = setup.k0 * setup.k0 * grid.cell_area();
    let centers = grid.centers();
    let mut gs = Vec::with_capacity(setup.n_rx * centers.len());
    for &(rx, ry) in &setup.rx_positions {
        for &(cx, cy) in &centers {
            let d = ((rx - cx).powi(2) + (ry - cy).powi(2)).sqrt();
            gs.push(green_unchecked(setup.k0, d) * scale);
        }
    }
    Ok(gs)
}

/// Translation kernel of `G_D` on offsets `-(m-1) ..= m-1` in each axis,
/// stored `(2m-1) x (2m-1)` with the zero offset at the centre (set to 0),
/// plus the self term.
pub fn build_gd(grid: &Grid, k0: f64) -> (Vec<Complex64>, Complex64) {
    let m = grid.m;
    let w = 2 * m - 1;
    let scale = k0 * k0 * grid.cell_area();
    let mut quarter = vec![Complex64::new(0.0, 0.0); m * m];
    for di in 0..m {
        for dj in di..m {
            if di == 0 && dj == 0 {
                continue;
            }
            let d = grid.cell_size * ((di * di + dj * dj) as f64).sqrt();
            let v = green_unchecked(k0, d) * scale;
            quarter[di * m + dj] = v;
            quarter[dj * m + di] = v;
        }
    }
    let mut kernel = vec![Complex64::new(0.0, 0.0); w * w];
    for a in 0..w {
        for b in 0..w {
            let di = (a as isize - (m as isize - 1)).unsigned_abs();
            let dj = (b as isize - (m as isize - 1)).unsigned_abs();
            kernel[a * w + b] = quarter[di * m + dj];
        }
    }
    (kernel, self_term(grid.cell_size, k0))
}

/// Dense `G_D` (`m^2 x m^2`) assembled entry by entry; intended for small grids.
pub fn dense_gd_elementwise(grid: &Grid, k0: f64) -> Vec<Complex64> {
    let n = grid.n_cells();
    let centers = grid.centers();
    let scale = k0 * k0 * grid.cell_area();
    let st = self_term(grid.cell_size, k0);
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for p in 0..n {
        for q in 0..n {
            out[p * n + q] = if p == q {
                st
            } else {
                let (x0, y0) = centers[p];
                let (x1, y1) = centers[q];
                green_unchecked(k0, ((x0 - x1).powi(2) + (y0 - y1).powi(2)).sqrt()) * scale
            };
        }
    }
    out
}

/// Scratch buffers for one `G_D` application. Not shared between threads.
pub struct GdWorkspace<T: Real> {
    buf: Vec<Complex<T>>,
    tmp: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
}

/// `G_S` and `G_D` for one grid and imaging setup.
pub struct GreenOperators<T: Real = f64> {
    grid: Grid,
    k0: f64,
    n_rx: usize,
    gs: Vec<Complex<T>>,
    gs_re: Vec<T>,
    gs_im: Vec<T>,
    gd_kernel: Vec<Complex<T>>,
    self_term: Complex<T>,
    pad: usize,
    /// FFT of the zero-padded kernel, stored transposed.
    kernel_hat: Vec<Complex<T>>,
    fft_fwd: Arc<dyn Fft<T>>,
    fft_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> fmt::Debug for GreenOperators<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GreenOperators")
            .field("m", &self.grid.m)
            .field("n_rx", &self.n_rx)
            .field("k0", &self.k0)
            .field("pad", &self.pad)
            .finish()
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], p: usize, rows: usize) {
    // src holds `rows` rows of length p; dst receives p rows of length `rows`
    // laid out with stride p.
    for r in 0..rows {
        for c in 0..p {
            dst[c * p + r] = src[r * p + c];
        }
    }
}

impl<T: Real> GreenOperators<T> {
    /// Builds both operators (`f64` evaluation, cast to `T`).
    pub fn build(grid: &Grid, setup: &ImagingSetup) -> Result<Self> {
        let gs = build_gs(grid, setup)?;
        let (kernel, st) = build_gd(grid, setup.k0);
        Ok(Self::from_parts(*grid, setup.k0, setup.n_rx, gs, kernel, st))
    }

    /// Assembles operators from precomputed `f64` parts (e.g. a loaded dump).
    pub fn from_parts(
        grid: Grid,
        k0: f64,
        n_rx: usize,
        gs: Vec<Complex64>,
        gd_kernel: Vec<Complex64>,
        self_term: Complex64,
    ) -> Self {
        let m = grid.m;
        let w = 2 * m - 1;
        assert_eq!(gs.len(), n_rx * m * m, "G_S shape");
        assert_eq!(gd_kernel.len(), w * w, "G_D kernel shape");
        let pad = w.next_power_of_two();
        let mut planner = FftPlanner::<T>::new();
        let fft_fwd = planner.plan_fft_forward(pad);
        let fft_inv = planner.plan_fft_inverse(pad);

        let gs_t: Vec<Complex<T>> = cast_complex(&gs);
        let (gs_re, gs_im) = split(&gs_t);
        let kernel_t: Vec<Complex<T>> = cast_complex(&gd_kernel);
        let self_t = Complex::new(T::of(self_term.re), T::of(self_term.im));

        let mut ops = Self {
            grid,
            k0,
            n_rx,
            gs: gs_t,
            gs_re,
            gs_im,
            gd_kernel: kernel_t,
            self_term: self_t,
            pad,
            kernel_hat: Vec::new(),
            fft_fwd,
            fft_inv,
        };
        ops.kernel_hat = ops.kernel_spectrum();
        ops
    }

    fn kernel_spectrum(&self) -> Vec<Complex<T>> {
        let m = self.grid.m;
        let w = 2 * m - 1;
        let p = self.pad;
        let mut buf = vec![czero::<T>(); p * p];
        for a in 0..w {
            for b in 0..w {
                let di = a as isize - (m as isize - 1);
                let dj = b as isize - (m as isize - 1);
                let r = di.rem_euclid(p as isize) as usize;
                let c = dj.rem_euclid(p as isize) as usize;
                buf[r * p + c] = self.gd_kernel[a * w + b];
            }
        }
        let mut scratch = vec![czero::<T>(); self.fft_fwd.get_inplace_scratch_len()];
        self.fft_fwd.process_with_scratch(&mut buf, &mut scratch);
        let mut tmp = vec![czero::<T>(); p * p];
        transpose(&buf, &mut tmp, p, p);
        self.fft_fwd.process_with_scratch(&mut tmp, &mut scratch);
        tmp
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn n_rx(&self) -> usize {
        self.n_rx
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    /// Row-major `n_rx x m^2`.
    pub fn gs(&self) -> &[Complex<T>] {
        &self.gs
    }

    pub fn gd_kernel(&self) -> &[Complex<T>] {
        &self.gd_kernel
    }

    pub fn self_term(&self) -> Complex<T> {
        self.self_term
    }

    /// Kernel value at cell offset `(di, dj)`.
    pub fn kernel_at(&self, di: isize, dj: isize) -> Complex<T> {
        let m = self.grid.m as isize;
        let w = (2 * m - 1) as usize;
        self.gd_kernel[(di + m - 1) as usize * w + (dj + m - 1) as usize]
    }

    pub fn workspace(&self) -> GdWorkspace<T> {
        let p = self.pad;
        GdWorkspace {
            buf: vec![czero(); p * p],
            tmp: vec![czero(); p * p],
            scratch: vec![czero(); self.fft_fwd.get_inplace_scratch_len().max(self.fft_inv.get_inplace_scratch_len())],
        }
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "{what} has {len} cells, grid has {}",
                self.grid.n_cells()
            )));
        }
        Ok(())
    }

    /// `y = G_D x` by zero-padded FFT convolution plus the self term.
    pub fn apply_gd(&self, x: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        let mut ws = self.workspace();
        let mut out = vec![czero(); x.len()];
        self.apply_gd_with(x, &mut out, &mut ws)?;
        Ok(out)
    }

    pub fn apply_gd_with(
        &self,
        x: &[Complex<T>],
        out: &mut [Complex<T>],
        ws: &mut GdWorkspace<T>,
    ) -> Result<()> {
        self.check_len(x.len(), "G_D input")?;
        self.check_len(out.len(), "G_D output")?;
        let m = self.grid.m;
        let p = self.pad;
        let GdWorkspace { buf, tmp, scratch } = ws;
        for v in buf.iter_mut() {
            *v = czero();
        }
        for i in 0..m {
            buf[i * p..i * p + m].copy_from_slice(&x[i * m..(i + 1) * m]);
        }
        // rows m.. are zero, their transforms stay zero
        self.fft_fwd.process_with_scratch(&mut buf[..m * p], scratch);
        transpose(&buf[..m * p], tmp, p, m);
        for r in 0..p {
            for c in m..p {
                tmp[r * p + c] = czero();
            }
        }
        self.fft_fwd.process_with_scratch(tmp, scratch);
        for (t, k) in tmp.iter_mut().zip(&self.kernel_hat) {
            *t = *t * *k;
        }
        self.fft_inv.process_with_scratch(tmp, scratch);
        // back to row-major; only the first m rows are needed
        for r in 0..m {
            for c in 0..p {
                buf[r * p + c] = tmp[c * p + r];
            }
        }
        self.fft_inv.process_with_scratch(&mut buf[..m * p], scratch);
        let norm = T::one() / T::of((p * p) as f64);
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = buf[i * p + j] * norm + self.self_term * x[i * m + j];
            }
        }
        Ok(())
    }

    /// `y = G_D^H x`. `G_D` is complex symmetric, so this is `conj(G_D conj(x))`.
    pub fn apply_gd_adjoint_with(
        &self,
        x: &[Complex<T>],
        out: &mut [Complex<T>],
        ws: &mut GdWorkspace<T>,
    ) -> Result<()> {
        let xc: Vec<Complex<T>> = x.iter().map(|v| v.conj()).collect();
        self.apply_gd_with(&xc, out, ws)?;
        for v in out.iter_mut() {
            *v = v.conj();
        }
        Ok(())
    }

    pub fn apply_gd_adjoint(&self, x: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        let mut ws = self.workspace();
        let mut out = vec![czero(); x.len()];
        self.apply_gd_adjoint_with(x, &mut out, &mut ws)?;
        Ok(out)
    }

    /// Dense `m^2 x m^2` matrix expanded from the stored kernel.
    pub fn dense_gd(&self) -> Vec<Complex<T>> {
        let m = self.grid.m;
        let n = m * m;
        let mut out = vec![czero(); n * n];
        for p in 0..n {
            let (pi, pj) = ((p / m) as isize, (p % m) as isize);
            for q in 0..n {
                let (qi, qj) = ((q / m) as isize, (q % m) as isize);
                out[p * n + q] = if p == q {
                    self.self_term
                } else {
                    self.kernel_at(pi - qi, pj - qj)
                };
            }
        }
        out
    }

    /// `E = G_S J` for one illumination.
    pub fn apply_gs(&self, j: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        self.check_len(j.len(), "G_S input")?;
        let n = self.grid.n_cells();
        Ok((0..self.n_rx)
            .map(|r| {
                self.gs[r * n..(r + 1) * n]
                    .iter()
                    .zip(j)
                    .fold(czero(), |acc, (g, x)| acc + g * x)
            })
            .collect())
    }

    /// `J = G_S^H E` for one illumination.
    pub fn apply_gs_adjoint(&self, e: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        if e.len() != self.n_rx {
            return Err(Error::ShapeMismatch(format!(
                "G_S adjoint input has {} entries, expected {}",
                e.len(),
                self.n_rx
            )));
        }
        let n = self.grid.n_cells();
        let mut out = vec![czero(); n];
        for (r, er) in e.iter().enumerate() {
            for (o, g) in out.iter_mut().zip(&self.gs[r * n..(r + 1) * n]) {
                *o += g.conj() * er;
            }
        }
        Ok(out)
    }

    /// Batched `G_S`: `j` is `n_illum x m^2`, result `n_illum x n_rx`.
    pub fn apply_gs_batch(&self, j: &[Complex<T>], n_illum: usize) -> Result<Vec<Complex<T>>> {
        let n = self.grid.n_cells();
        if j.len() != n_illum * n {
            return Err(Error::ShapeMismatch(format!(
                "batched G_S input has {} entries, expected {}",
                j.len(),
                n_illum * n
            )));
        }
        let (jr, ji) = split(j);
        Ok(crate::linalg::cgemm_abt(
            n_illum,
            n,
            self.n_rx,
            (&jr, &ji),
            (&self.gs_re, &self.gs_im),
        ))
    }

    /// Batched `G_S^H`: `e` is `n_illum x n_rx`, result `n_illum x m^2`.
    pub fn apply_gs_adjoint_batch(&self, e: &[Complex<T>], n_illum: usize) -> Result<Vec<Complex<T>>> {
        if e.len() != n_illum * self.n_rx {
            return Err(Error::ShapeMismatch(format!(
                "batched G_S adjoint input has {} entries, expected {}",
                e.len(),
                n_illum * self.n_rx
            )));
        }
        let (er, ei) = split(e);
        Ok(crate::linalg::cgemm_a_conj_b(
            n_illum,
            self.n_rx,
            self.grid.n_cells(),
            (&er, &ei),
            (&self.gs_re, &self.gs_im),
        ))
    }

    /// Copies the operator into another scalar type.
    pub fn cast<U: Real>(&self) -> GreenOperators<U> {
        let to64 = |v: &[Complex<T>]| -> Vec<Complex64> { cast_complex(v) };
        GreenOperators::from_parts(
            self.grid,
            self.k0,
            self.n_rx,
            to64(&self.gs),
            to64(&self.gd_kernel),
            Complex64::new(self.self_term.re.to_f64_lossy(), self.self_term.im.to_f64_lossy()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_l2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn dense_matvec(a: &[Complex64], x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|p| (0..n).map(|q| a[p * n + q] * x[q]).sum())
            .collect()
    }

    #[test]
    fn green_rejects_nonpositive_distance() {
        assert!(matches!(green2d(80.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(green2d(80.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn green_far_field_decay() {
        let setup = ImagingSetup::reference();
        let lam = setup.lambda0;
        let near = green2d(setup.k0, 25.0 * lam).unwrap().norm();
        let far = green2d(setup.k0, 100.0 * lam).unwrap().norm();
        assert!((far / near - 0.5).abs() < 0.005);
    }

    #[test]
    fn gs_entries_depend_on_distance_only() {
        let grid = Grid::new(4, 0.02).unwrap();
        let setup = ImagingSetup::new(4e9, 4, 4, 0.5).unwrap();
        let ops = GreenOperators::<f64>::build(&grid, &setup).unwrap();
        // the receivers at angles 0 and 90 degrees are equidistant from the
        // diagonal cells (i, i) mirrored through y = x
        let n = grid.n_cells();
        let e0 = ops.gs()[0];
        let e1 = ops.gs()[n];
        assert!((e0 - e1).norm() < 1e-12 * e0.norm());
    }

    #[test]
    fn receiver_inside_doi_rejected() {
        let grid = Grid::new(4, 0.2).unwrap();
        let setup = ImagingSetup::new(4e9, 4, 4, 0.05).unwrap();
        assert!(matches!(build_gs(&grid, &setup), Err(Error::Geometry(_))));
    }

    #[test]
    fn single_cell_current_radiates_green() {
        let grid = Grid::new(4, 0.02).unwrap();
        let setup = ImagingSetup::new(4e9, 3, 5, 0.4).unwrap();
        let ops = GreenOperators::<f64>::build(&grid, &setup).unwrap();
        let mut j = vec![Complex64::new(0.0, 0.0); grid.n_cells()];
        j[6] = Complex64::new(1.0, 0.0);
        let e = ops.apply_gs(&j).unwrap();
        let (cx, cy) = grid.center(1, 2);
        for (r, &(x, y)) in setup.rx_positions.iter().enumerate() {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let expect = green2d(setup.k0, d).unwrap() * setup.k0 * setup.k0 * grid.cell_area();
            assert!((e[r] - expect).norm() < 1e-14 * expect.norm());
        }
    }

    #[test]
    fn kernel_symmetry() {
        let grid = Grid::new(6, 0.05).unwrap();
        let ops = GreenOperators::<f64>::build(&grid, &ImagingSetup::new(4e9, 2, 2, 1.0).unwrap()).unwrap();
        for di in -5..=5 {
            for dj in -5..=5 {
                assert_eq!(ops.kernel_at(di, dj), ops.kernel_at(-di, -dj));
                assert_eq!(ops.kernel_at(di, dj), ops.kernel_at(dj, di));
            }
        }
    }

    #[test]
    fn dense_constructions_agree_on_4x4() {
        let grid = Grid::new(4, 0.03).unwrap();
        let setup = ImagingSetup::new(4e9, 2, 2, 1.0).unwrap();
        let ops = GreenOperators::<f64>::build(&grid, &setup).unwrap();
        let a = ops.dense_gd();
        let b = dense_gd_elementwise(&grid, setup.k0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() <= 1e-13 * y.norm());
        }
    }

    #[test]
    fn fft_apply_matches_dense_16() {
        let grid = Grid::new(16, 0.15).unwrap();
        let setup = ImagingSetup::reference();
        let ops = GreenOperators::<f64>::build(&grid, &setup).unwrap();
        let x = random_field(grid.n_cells(), 3);
        let y = ops.apply_gd(&x).unwrap();
        let yd = dense_matvec(&ops.dense_gd(), &x);
        assert!(rel_l2(&y, &yd) < 1e-10);
        let ya = ops.apply_gd_adjoint(&x).unwrap();
        let dense = ops.dense_gd();
        let n = grid.n_cells();
        let yad: Vec<Complex64> = (0..n)
            .map(|p| (0..n).map(|q| dense[q * n + p].conj() * x[q]).sum())
            .collect();
        assert!(rel_l2(&ya, &yad) < 1e-10);
    }

    #[test]
    fn zero_and_linearity() {
        let grid = Grid::new(8, 0.1).unwrap();
        let ops = GreenOperators::<f64>::build(&grid, &ImagingSetup::reference()).unwrap();
        let zero = vec![Complex64::new(0.0, 0.0); 64];
        assert!(ops.apply_gd(&zero).unwrap().iter().all(|v| v.norm() == 0.0));
        let x1 = random_field(64, 1);
        let x2 = random_field(64, 2);
        let (a, b) = (Complex64::new(0.3, -1.2), Complex64::new(2.0, 0.5));
        let mix: Vec<Complex64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let lhs = ops.apply_gd(&mix).unwrap();
        let y1 = ops.apply_gd(&x1).unwrap();
        let y2 = ops.apply_gd(&x2).unwrap();
        let rhs: Vec<Complex64> = y1.iter().zip(&y2).map(|(p, q)| a * p + b * q).collect();
        assert!(rel_l2(&lhs, &rhs) < 1e-13);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let grid = Grid::new(8, 0.1).unwrap();
        let ops = GreenOperators::<f64>::build(&grid, &ImagingSetup::reference()).unwrap();
        assert!(matches!(
            ops.apply_gd(&vec![Complex64::new(0.0, 0.0); 10]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn translation_consistency_in_interior() {
        let grid = Grid::new(12, 0.1).unwrap();
        let ops = GreenOperators::<f64>::build(&grid, &ImagingSetup::reference()).unwrap();
        let m = 12;
        let mut x = vec![Complex64::new(0.0, 0.0); m * m];
        x[5 * m + 5] = Complex64::new(1.0, 0.5);
        x[6 * m + 4] = Complex64::new(-0.3, 0.2);
        let mut shifted = vec![Complex64::new(0.0, 0.0); m * m];
        for i in 0..m {
            for j in 0..m - 1 {
                shifted[i * m + j + 1] = x[i * m + j];
            }
        }
        let y = ops.apply_gd(&x).unwrap();
        let ys = ops.apply_gd(&shifted).unwrap();
        for i in 0..m {
            for j in 0..m - 1 {
                assert!((ys[i * m + j + 1] - y[i * m + j]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_gs_matches_single() {
        let grid = Grid::new(6, 0.05).unwrap();
        let setup = ImagingSetup::new(4e9, 3, 7, 0.5).unwrap();
        let ops = GreenOperators::<f64>::build(&grid, &setup).unwrap();
        let j = random_field(3 * 36, 9);
        let batch = ops.apply_gs_batch(&j, 3).unwrap();
        let e = random_field(3 * 7, 10);
        let adj = ops.apply_gs_adjoint_batch(&e, 3).unwrap();
        for p in 0..3 {
            let single = ops.apply_gs(&j[p * 36..(p + 1) * 36]).unwrap();
            assert!(rel_l2(&batch[p * 7..(p + 1) * 7], &single) < 1e-13);
            let single_adj = ops.apply_gs_adjoint(&e[p * 7..(p + 1) * 7]).unwrap();
            assert!(rel_l2(&adj[p * 36..(p + 1) * 36], &single_adj) < 1e-13);
        }
    }

    #[test]
    fn single_precision_operator_tracks_double() {
        let grid = Grid::new(16, 0.15).unwrap();
        let ops64 = GreenOperators::<f64>::build(&grid, &ImagingSetup::reference()).unwrap();
        let ops32: GreenOperators<f32> = ops64.cast();
        let x = random_field(256, 4);
        let x32: Vec<Complex<f32>> = cast_complex(&x);
        let y64 = ops64.apply_gd(&x).unwrap();
        let y32: Vec<Complex64> = cast_complex(&ops32.apply_gd(&x32).unwrap());
        assert!(rel_l2(&y32, &y64) < 1e-5);
    }
}
