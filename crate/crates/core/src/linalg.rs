//! Small complex-vector helpers shared by the solvers.

use crate::{Complex, Real};

#[inline]
pub fn czero<T: Real>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}

/// `sum conj(a) * b`.
pub fn dotc<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    a.iter().zip(b).fold(czero(), |acc, (x, y)| acc + x.conj() * y)
}

pub fn norm_sqr<T: Real>(a: &[Complex<T>]) -> T {
    a.iter().fold(T::zero(), |acc, x| acc + x.norm_sqr())
}

pub fn norm<T: Real>(a: &[Complex<T>]) -> T {
    norm_sqr(a).sqrt()
}

/// Relative L2 distance `||a - b|| / ||b||` in `f64`.
pub fn rel_l2<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        num += d.norm_sqr().to_f64_lossy();
        den += y.norm_sqr().to_f64_lossy();
    }
    (num / den).sqrt()
}

pub fn cast_complex<T: Real, U: Real>(v: &[Complex<T>]) -> Vec<Complex<U>> {
    v.iter()
        .map(|c| Complex::new(U::of(c.re.to_f64_lossy()), U::of(c.im.to_f64_lossy())))
        .collect()
}

/// Splits complex values into separate real and imaginary arrays.
pub fn split<T: Real>(v: &[Complex<T>]) -> (Vec<T>, Vec<T>) {
    v.iter().map(|c| (c.re, c.im)).unzip()
}

/// Complex product `Y = A * B^T` using four real GEMMs, where `A` is
/// `rows x inner` and `B` is `cols x inner`, both row-major split arrays.
pub fn cgemm_abt<T: Real>(
    rows: usize,
    inner: usize,
    cols: usize,
    a: (&[T], &[T]),
    b: (&[T], &[T]),
) -> Vec<Complex<T>> {
    let mut yre = vec![T::zero(); rows * cols];
    let mut yim = vec![T::zero(); rows * cols];
    let a_s = (inner as isize, 1);
    let bt_s = (1, inner as isize);
    let c_s = (cols as isize, 1);
    T::gemm(rows, inner, cols, T::one(), a.0, a_s, b.0, bt_s, T::zero(), &mut yre, c_s);
    T::gemm(rows, inner, cols, -T::one(), a.1, a_s, b.1, bt_s, T::one(), &mut yre, c_s);
    T::gemm(rows, inner, cols, T::one(), a.0, a_s, b.1, bt_s, T::zero(), &mut yim, c_s);
    T::gemm(rows, inner, cols, T::one(), a.1, a_s, b.0, bt_s, T::one(), &mut yim, c_s);
    yre.into_iter().zip(yim).map(|(r, i)| Complex::new(r, i)).collect()
}

/// Complex product `Y = A * conj(B)` where `A` is `rows x inner` and `B` is
/// `inner x cols`, both row-major split arrays.
pub fn cgemm_a_conj_b<T: Real>(
    rows: usize,
    inner: usize,
    cols: usize,
    a: (&[T], &[T]),
    b: (&[T], &[T]),
) -> Vec<Complex<T>> {
    let mut yre = vec![T::zero(); rows * cols];
    let mut yim = vec![T::zero(); rows * cols];
    let a_s = (inner as isize, 1);
    let b_s = (cols as isize, 1);
    let c_s = (cols as isize, 1);
    // (ar + i ai)(br - i bi) = (ar br + ai bi) + i (ai br - ar bi)
    T::gemm(rows, inner, cols, T::one(), a.0, a_s, b.0, b_s, T::zero(), &mut yre, c_s);
    T::gemm(rows, inner, cols, T::one(), a.1, a_s, b.1, b_s, T::one(), &mut yre, c_s);
    T::gemm(rows, inner, cols, T::one(), a.1, a_s, b.0, b_s, T::zero(), &mut yim, c_s);
    T::gemm(rows, inner, cols, -T::one(), a.0, a_s, b.1, b_s, T::one(), &mut yim, c_s);
    yre.into_iter().zip(yim).map(|(r, i)| Complex::new(r, i)).collect()
}
