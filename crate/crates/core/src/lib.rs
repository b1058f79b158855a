//! Two-dimensional TM microwave inverse scattering.
//!
//! The crate contains a pixel-basis method-of-moments forward model with an
//! FFT-accelerated domain operator, an analytic cylinder reference, the
//! backpropagation initializer, and a contrast-source physics-driven network
//! solver that predicts induced currents and recovers permittivity from them.
//!
//! Numerical kernels are generic over [`Real`] (`f32` or `f64`). Geometry and
//! special functions are always evaluated in `f64` and cast on construction.

pub mod bp;
pub mod error;
pub mod forward;
pub mod io;
pub mod linalg;
pub mod mie;
pub mod operators;
pub mod report;
pub mod scene;
pub mod solver;
pub mod special;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

pub use error::{Error, Result};
pub use num_complex::Complex;

/// Floating-point scalar used by every numerical kernel: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FftNum
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c = alpha * a * b + beta * c` for strided row/column-major views.
    ///
    /// Shapes: `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are
    /// given as `(row_stride, col_stride)` in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn check_gemm_bounds<T>(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_gemm_bounds::<$t>(a.len(), m, k, a_strides);
                check_gemm_bounds::<$t>(b.len(), k, n, b_strides);
                check_gemm_bounds::<$t>(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Speed of light in vacuum (m/s).
pub const C0: f64 = 299_792_458.0;

pub use bp::{bp_current, bp_permittivity, BpCurrent};
pub use forward::{
    add_awgn, incident_fields, scattered_fields, solve_total_field, CurrentSet, FieldKind,
    FieldSet, ForwardSolution, SolverOptions, synthesize,
};
pub use io::{
    calibrate_fresnel, load_scene, parse_fresnel, parse_scene, Calibrated, FresnelDescriptor,
    FresnelRecord, RunMeta, SceneFile,
};
pub use mie::{mie_interior_field, mie_reference};
pub use operators::{green2d, GreenOperators};
pub use report::{metric_rrmse, region_mean, render_map, Component};
pub use scene::{builtin_profile, rasterize_scene, ContrastMap, Grid, ImagingSetup, ShapeSpec};
pub use solver::{
    reconstruct, ArchConfig, LossBreakdown, NetworkParams, ReconstructionResult, TrainConfig,
};

pub type ContrastMap32 = ContrastMap<f32>;
pub type ContrastMap64 = ContrastMap<f64>;
pub type FieldSet32 = FieldSet<f32>;
pub type FieldSet64 = FieldSet<f64>;
pub type CurrentSet32 = CurrentSet<f32>;
pub type CurrentSet64 = CurrentSet<f64>;
pub type GreenOperators32 = GreenOperators<f32>;
pub type GreenOperators64 = GreenOperators<f64>;
pub type NetworkParams32 = NetworkParams<f32>;
pub type NetworkParams64 = NetworkParams<f64>;
pub type Complex32 = Complex<f32>;
pub type Complex64 = Complex<f64>;
