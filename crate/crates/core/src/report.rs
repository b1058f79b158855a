//! Error metrics, permittivity images and timing tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::forward::{add_awgn, incident_fields, synthesize, SolverOptions};
use crate::operators::GreenOperators;
use crate::scene::{builtin_profile, ContrastMap, Grid, ImagingSetup, ShapeSpec};
use crate::solver::{reconstruct_with, TrainConfig};
use crate::{Error, Real, Result};

/// `||eps_pre - eps_true|| / ||eps_true||` over all cells.
pub fn metric_rrmse<T: Real, U: Real>(eps_pre: &ContrastMap<T>, eps_true: &ContrastMap<U>) -> Result<f64> {
    if eps_pre.m != eps_true.m {
        return Err(Error::ShapeMismatch(format!("grids {} and {} differ", eps_pre.m, eps_true.m)));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    // eps differences equal chi differences
    for (a, b) in eps_pre.chi.iter().zip(&eps_true.chi) {
        let (ar, ai) = (a.re.to_f64_lossy(), a.im.to_f64_lossy());
        let (br, bi) = (b.re.to_f64_lossy(), b.im.to_f64_lossy());
        num += (ar - br).powi(2) + (ai - bi).powi(2);
        den += (br + 1.0).powi(2) + bi.powi(2);
    }
    Ok((num / den).sqrt())
}

/// Mean reconstructed permittivity over the support of `eps_true`
/// (cells with nonzero contrast). `None` when the support is empty.
pub fn region_mean<T: Real>(eps_pre: &ContrastMap<T>, eps_true: &ContrastMap<f64>) -> Result<Option<(f64, f64)>> {
    if eps_pre.m != eps_true.m {
        return Err(Error::ShapeMismatch(format!("grids {} and {} differ", eps_pre.m, eps_true.m)));
    }
    let mut n = 0usize;
    let (mut re, mut im) = (0.0, 0.0);
    for (a, b) in eps_pre.chi.iter().zip(&eps_true.chi) {
        if b.re != 0.0 || b.im != 0.0 {
            n += 1;
            re += a.re.to_f64_lossy() + 1.0;
            im += a.im.to_f64_lossy();
        }
    }
    Ok((n > 0).then(|| (re / n as f64, im / n as f64)))
}

/// Jet colormap at `t` in `[0, 1]`.
pub fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(1.5 - (4.0 * t - 3.0).abs()), ch(1.5 - (4.0 * t - 2.0).abs()), ch(1.5 - (4.0 * t - 1.0).abs())]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Real,
    Imag,
}

/// RGB pixels of one component mapped linearly over `[lo, hi]`. Rows run
/// from the top of the domain (largest y) down; each cell is `scale`
/// pixels wide.
pub fn map_pixels<T: Real>(eps: &ContrastMap<T>, range: (f64, f64), part: Component, scale: usize) -> Result<Vec<u8>> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::Config(format!("invalid color range [{lo}, {hi}]")));
    }
    if scale == 0 {
        return Err(Error::Config("image scale must be positive".into()));
    }
    let m = eps.m;
    let mut px = Vec::with_capacity(m * m * scale * scale * 3);
    for r in 0..m * scale {
        let i = m - 1 - r / scale;
        for c in 0..m * scale {
            let e = eps.eps_at(i, c / scale);
            let v = match part {
                Component::Real => e.re.to_f64_lossy(),
                Component::Imag => e.im.to_f64_lossy(),
            };
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("permittivity at cell ({i}, {})", c / scale)));
            }
            px.extend(jet((v - lo) / (hi - lo)));
        }
    }
    Ok(px)
}

/// Writes a PNG of the chosen component. Output bytes depend only on the input.
pub fn render_map<T: Real>(eps: &ContrastMap<T>, range: (f64, f64), part: Component, scale: usize, path: &Path) -> Result<()> {
    let px = map_pixels(eps, range, part, scale)?;
    let side = (eps.m * scale) as u32;
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, side, side);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&px).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

/// Reference per-reconstruction times (seconds) for the six bundled profiles
/// on a GPU, in bundled-profile order.
pub const REFERENCE_TIMES_S: [f64; 6] = [27.91, 28.24, 27.55, 28.87, 28.47, 27.30];

#[derive(Debug, Clone)]
pub struct BenchmarkCase {
    pub name: String,
    pub shapes: Vec<ShapeSpec>,
    pub reference_s: Option<f64>,
}

/// The six bundled profiles paired with their reference times.
pub fn default_cases() -> Result<Vec<BenchmarkCase>> {
    let names = crate::scene::builtin_profile_names();
    names
        .into_iter()
        .zip(REFERENCE_TIMES_S)
        .map(|(name, t)| Ok(BenchmarkCase { shapes: builtin_profile(&name)?, name, reference_s: Some(t) }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub case: String,
    /// Operator assembly, data synthesis and solver initialization.
    pub setup_s: f64,
    pub epochs: usize,
    pub per_epoch_s: f64,
    pub total_s: f64,
    pub reference_s: Option<f64>,
}

/// CPU and thread description for the timing table.
pub fn hardware_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{model}; {} {}; {} threads",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}

/// Times noiseless synthesis plus a full reconstruction for each case.
/// `snr_db` adds noise to the synthetic data when given.
pub fn benchmark<T: Real>(
    cases: &[BenchmarkCase],
    grid: &Grid,
    setup: &ImagingSetup,
    cfg: &TrainConfig,
    snr_db: Option<f64>,
) -> Result<Vec<BenchmarkRow>> {
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let t0 = Instant::now();
        let mut e_sca = synthesize(&case.shapes, grid, setup, &SolverOptions::default())?;
        let ops = GreenOperators::<f64>::build(grid, setup)?;
        let e_inc = incident_fields::<f64>(setup, grid)?;
        if let Some(snr) = snr_db {
            e_sca = add_awgn(&e_sca, snr, cfg.seed)?;
        }
        let ops_t = ops.cast::<T>();
        let e_inc_t = e_inc.cast::<T>();
        let e_sca_t = e_sca.cast::<T>();
        let synth = t0.elapsed().as_secs_f64();
        let result = reconstruct_with(&ops_t, &e_inc_t, &e_sca_t, cfg, |_, _| {})?;
        let total = t0.elapsed().as_secs_f64();
        let setup_s = synth + result.setup_time;
        let epochs = result.epochs_run;
        let per_epoch = if epochs > 0 {
            (result.wall_time - result.setup_time) / epochs as f64
        } else {
            0.0
        };
        log::info!("{}: {:.2} s total, {:.4} s per epoch", case.name, total, per_epoch);
        rows.push(BenchmarkRow {
            case: case.name.clone(),
            setup_s,
            epochs,
            per_epoch_s: per_epoch,
            total_s: total,
            reference_s: case.reference_s,
        });
    }
    Ok(rows)
}

pub fn write_benchmark_csv<W: Write>(out: W, rows: &[BenchmarkRow], hardware: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(["case", "setup_s", "epochs", "per_epoch_s", "total_s", "reference_gpu_s", "hardware"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.case.clone(),
            format!("{:.6}", r.setup_s),
            r.epochs.to_string(),
            format!("{:.6}", r.per_epoch_s),
            format!("{:.6}", r.total_s),
            r.reference_s.map(|t| format!("{t:.2}")).unwrap_or_default(),
            hardware.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Complex64;

    fn map(m: usize, eps: &[f64]) -> ContrastMap<f64> {
        let e: Vec<Complex64> = eps.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        ContrastMap::from_eps(m, &e).unwrap()
    }

    #[test]
    fn rrmse_identical_is_zero() {
        let t = map(2, &[1.0, 2.0, 1.5, 1.0]);
        assert_eq!(metric_rrmse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn rrmse_hand_summation_4x4() {
        // one 2x2 block at eps 3 in a background of 1; prediction is empty background
        let mut truth = vec![1.0; 16];
        for k in [5, 6, 9, 10] {
            truth[k] = 3.0;
        }
        let t = map(4, &truth);
        let p = map(4, &[1.0; 16]);
        // numerator 4 * 2^2 = 16, denominator 12 * 1 + 4 * 9 = 48
        let expected = (16.0f64 / 48.0).sqrt();
        assert!((metric_rrmse(&p, &t).unwrap() - expected).abs() < 1e-15);
        assert_eq!(region_mean(&p, &t).unwrap(), Some((1.0, 0.0)));
        assert_eq!(region_mean(&t, &t).unwrap(), Some((3.0, 0.0)));
    }

    #[test]
    fn rrmse_sign_symmetric() {
        let t = map(2, &[1.0, 2.0, 1.5, 1.0]);
        let e = [0.1, -0.3, 0.2, 0.05];
        let plus: Vec<f64> = [1.0, 2.0, 1.5, 1.0].iter().zip(e).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = [1.0, 2.0, 1.5, 1.0].iter().zip(e).map(|(a, b)| a - b).collect();
        let a = metric_rrmse(&map(2, &plus), &t).unwrap();
        let b = metric_rrmse(&map(2, &minus), &t).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(metric_rrmse(&map(3, &[1.0; 9]), &t).is_err());
    }

    #[test]
    fn colormap_lookup_2x2() {
        // rows i=0 (bottom) [1.0, 1.25], i=1 (top) [1.5, 2.0]
        let m = map(2, &[1.0, 1.25, 1.5, 2.0]);
        let px = map_pixels(&m, (1.0, 2.0), Component::Real, 1).unwrap();
        let at = |r: usize, c: usize| [px[(r * 2 + c) * 3], px[(r * 2 + c) * 3 + 1], px[(r * 2 + c) * 3 + 2]];
        // t = 0.5: r = 0.5, g = 1, b = 0.5; t = 1: r = 0.5, g = 0, b = 0
        assert_eq!(at(0, 0), [128, 255, 128]);
        assert_eq!(at(0, 1), [128, 0, 0]);
        // t = 0: b = 0.5; t = 0.25: g = 0.5, b = 1
        assert_eq!(at(1, 0), [0, 0, 128]);
        assert_eq!(at(1, 1), [0, 128, 255]);
    }

    #[test]
    fn constant_map_is_single_color_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = map(8, &[1.7; 64]);
        let px = map_pixels(&m, (1.0, 3.0), Component::Real, 2).unwrap();
        assert!(px.chunks(3).all(|c| c == &px[..3]));
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        render_map(&m, (1.0, 3.0), Component::Real, 4, &a).unwrap();
        render_map(&m, (1.0, 3.0), Component::Real, 4, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn render_rejects_bad_input() {
        let mut m = map(2, &[1.0; 4]);
        assert!(map_pixels(&m, (2.0, 1.0), Component::Real, 1).is_err());
        m.chi[0].re = f64::NAN;
        assert!(matches!(map_pixels(&m, (1.0, 2.0), Component::Real, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn default_cases_carry_reference_times() {
        let cases = default_cases().unwrap();
        assert_eq!(cases.len(), 6);
        let refs: Vec<f64> = cases.iter().map(|c| c.reference_s.unwrap()).collect();
        assert_eq!(refs, REFERENCE_TIMES_S);
    }

    #[test]
    fn benchmark_accounting() {
        let grid = Grid::new(8, 0.15).unwrap();
        let setup = ImagingSetup::new(4e9, 4, 8, 1.5).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            arch: crate::ArchConfig { channels: [2, 2, 2], hidden: 8, leaky_slope: 0.2 },
            ..TrainConfig::default()
        };
        let cases = vec![
            BenchmarkCase { name: "disc".into(), shapes: crate::scene::reference_disc(), reference_s: None },
            BenchmarkCase { name: "disc2".into(), shapes: crate::scene::reference_disc(), reference_s: Some(1.0) },
        ];
        let rows = benchmark::<f64>(&cases, &grid, &setup, &cfg, None).unwrap();
        assert_eq!(rows.len(), cases.len());
        for r in &rows {
            let parts = r.setup_s + r.epochs as f64 * r.per_epoch_s;
            assert!(r.total_s >= parts * 0.95, "{r:?}");
        }
        let mut buf = Vec::new();
        write_benchmark_csv(&mut buf, &rows, &hardware_descriptor()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().contains(",1.00,"));
    }
}
