use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use iscat::forward::{add_awgn, incident_fields, synthesize, SolverOptions};
use iscat::io::{self, RunMeta, SceneFile};
use iscat::report::{self, Component};
use iscat::{
    bp_current, bp_permittivity, ArchConfig, ContrastMap, Error, FieldSet, Grid, GreenOperators, ImagingSetup, Real,
    Result, TrainConfig,
};

#[derive(Parser)]
#[command(name = "iscat", version, about = "2-D microwave inverse scattering toolkit")]
struct Cli {
    /// Seed for network initialization, dropout and synthetic noise.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Single worker thread so that every output is bit-reproducible.
    #[arg(long, global = true)]
    strict_deterministic: bool,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate receiver data for a scene.
    Simulate(SimulateArgs),
    /// Backpropagation estimate of the permittivity.
    Bp(BpArgs),
    /// Network reconstruction from receiver data.
    Reconstruct(ReconstructArgs),
    /// Compare a permittivity map with the ground truth.
    Evaluate(EvaluateArgs),
    /// Draw a permittivity map as PNG.
    Render(RenderArgs),
    /// Time reconstructions of the bundled profiles.
    Benchmark(BenchmarkArgs),
    /// Calibrate a Fresnel measurement file and optionally reconstruct from it.
    Fresnel(FresnelArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene JSON.
    #[arg(long)]
    scene: PathBuf,
    /// Add complex Gaussian noise at this SNR (dB).
    #[arg(long)]
    snr: Option<f64>,
    /// Generate the data on a finer m x m grid than the scene grid.
    #[arg(long)]
    data_grid_m: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BpArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Receiver data CSV (`tx,rx,re,im`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchPreset {
    /// Full widths: channels 16/32/64, hidden 512.
    Full,
    /// Narrow widths for single-core runs (default).
    Desk,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Training config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    arch: Option<ArchPreset>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reconstructed permittivity CSV (`i,j,re,im`).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth scene JSON.
    #[arg(long, conflicts_with = "truth")]
    scene: Option<PathBuf>,
    /// Ground-truth permittivity CSV.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Permittivity CSV, or a scene JSON to draw its ground truth.
    #[arg(long)]
    eps: PathBuf,
    #[arg(long)]
    min: Option<f64>,
    #[arg(long)]
    max: Option<f64>,
    /// Draw the imaginary part instead of the real part.
    #[arg(long)]
    imag: bool,
    /// Pixels per cell.
    #[arg(long, default_value_t = 8)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Comma-separated profile names (default: all six).
    #[arg(long, value_delimiter = ',')]
    cases: Vec<String>,
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long)]
    snr: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FresnelArgs {
    /// Measurement file (`tx rx freq re im [re_inc im_inc]` per line).
    #[arg(long)]
    data: PathBuf,
    /// Geometry descriptor JSON.
    #[arg(long)]
    descriptor: PathBuf,
    /// Frequency in GHz (6 GHz sits mid-band of the 2-10 GHz sweep).
    #[arg(long, default_value_t = 6.0)]
    freq: f64,
    #[arg(long, default_value_t = 64)]
    m: usize,
    /// Side length of the imaging domain in meters.
    #[arg(long, default_value_t = 0.15)]
    side: f64,
    /// Skip the reconstruction and only write calibrated data.
    #[arg(long)]
    calibrate_only: bool,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

struct Globals {
    seed: u64,
    threads: usize,
    strict: bool,
}

impl Globals {
    fn meta(&self, command: &str) -> RunMeta {
        RunMeta {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            threads: self.threads,
            strict_deterministic: self.strict,
            config: serde_json::Value::Null,
            wall_time_s: None,
            parameter_count: None,
            extra: serde_json::Value::Null,
        }
    }
}

fn train_config(args: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    let raw: serde_json::Value = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => serde_json::json!({}),
    };
    let mut cfg: TrainConfig = serde_json::from_value(raw.clone())?;
    if let Some(e) = args.epochs {
        cfg.max_epochs = e;
    }
    match args.arch {
        Some(ArchPreset::Full) => cfg.arch = ArchConfig::default(),
        Some(ArchPreset::Desk) => cfg.arch = ArchConfig::desk(),
        // desk widths unless the config file names an architecture
        None if raw.get("arch").is_none() => cfg.arch = ArchConfig::desk(),
        None => {}
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn write_meta(dir: &Path, meta: &RunMeta) -> Result<()> {
    io::write_run_meta(&dir.join("run_meta.json"), meta)
}

fn load_data(path: &Path, setup: &ImagingSetup) -> Result<FieldSet<f64>> {
    let data = io::load_fields_csv(path, Some((setup.n_tx, setup.n_rx)))?;
    Ok(data)
}

fn simulate(a: &SimulateArgs, g: &Globals) -> Result<()> {
    let start = Instant::now();
    let scene = io::load_scene(&a.scene)?;
    let grid = scene.grid()?;
    let setup = scene.setup()?;
    let shapes = scene.shapes()?;
    let data_grid = match a.data_grid_m {
        Some(m) => Grid::new(m, grid.side_len)?,
        None => grid,
    };
    let clean = synthesize(&shapes, &data_grid, &setup, &SolverOptions::default())?;
    let data = match a.snr {
        Some(snr) => add_awgn(&clean, snr, g.seed)?,
        None => clean.clone(),
    };
    fs::create_dir_all(&a.out)?;
    io::save_fields_csv(&a.out.join("e_sca.csv"), &data)?;
    if a.snr.is_some() {
        io::save_fields_csv(&a.out.join("e_sca_clean.csv"), &clean)?;
    }
    io::save_eps_csv(&a.out.join("eps_true.csv"), &scene.contrast()?)?;
    io::save_scene(&a.out.join("scene.json"), &scene)?;
    let mut meta = g.meta("simulate");
    meta.wall_time_s = Some(start.elapsed().as_secs_f64());
    meta.extra = json!({ "snr_db": a.snr, "data_grid_m": data_grid.m });
    write_meta(&a.out, &meta)
}

fn bp(a: &BpArgs, g: &Globals) -> Result<()> {
    let start = Instant::now();
    let scene = io::load_scene(&a.scene)?;
    let grid = scene.grid()?;
    let setup = scene.setup()?;
    let data = load_data(&a.data, &setup)?;
    let ops = GreenOperators::<f64>::build(&grid, &setup)?;
    let e_inc = incident_fields::<f64>(&setup, &grid)?;
    let j0 = bp_current(&data, &ops)?;
    let eps = bp_permittivity(&j0.currents, &e_inc, &ops)?;
    fs::create_dir_all(&a.out)?;
    io::save_eps_csv(&a.out.join("eps_r.csv"), &eps)?;
    let mut meta = g.meta("bp");
    meta.wall_time_s = Some(start.elapsed().as_secs_f64());
    meta.extra = json!({ "degenerate_illuminations": j0.degenerate.iter().filter(|&&d| d).count() });
    write_meta(&a.out, &meta)
}

fn run_reconstruction<T: Real>(
    data: &FieldSet<f64>,
    setup: &ImagingSetup,
    grid: &Grid,
    cfg: &TrainConfig,
    out: &Path,
    mut meta: RunMeta,
) -> Result<()> {
    let ops = GreenOperators::<f64>::build(grid, setup)?.cast::<T>();
    let e_inc = incident_fields::<T>(setup, grid)?;
    let e_mea = data.cast::<T>();
    let every = (cfg.max_epochs / 20).max(1);
    let res = iscat::solver::reconstruct_with(&ops, &e_inc, &e_mea, cfg, |e, l| {
        if e % every == 0 {
            log::info!("epoch {e}: total {:.4e} data {:.4e} state {:.4e}", l.total, l.data, l.state);
        }
    })?;
    fs::create_dir_all(out)?;
    io::save_eps_csv(&out.join("eps_r_bp.csv"), &res.eps_r_bp)?;
    meta.extra = json!({ "precision": std::any::type_name::<T>() });
    io::save_result(out, &res, cfg, meta)?;
    log::info!(
        "finished {} epochs in {:.1} s; data loss {:.3e} (initial {:.3e})",
        res.epochs_run,
        res.wall_time,
        res.final_loss.data,
        res.bp_loss.data
    );
    Ok(())
}

fn reconstruct(a: &ReconstructArgs, g: &Globals) -> Result<()> {
    let scene = io::load_scene(&a.scene)?;
    let grid = scene.grid()?;
    let setup = scene.setup()?;
    let data = load_data(&a.data, &setup)?;
    let cfg = train_config(&a.train, g.seed)?;
    let meta = g.meta("reconstruct");
    match a.train.precision {
        Precision::F32 => run_reconstruction::<f32>(&data, &setup, &grid, &cfg, &a.out, meta),
        Precision::F64 => run_reconstruction::<f64>(&data, &setup, &grid, &cfg, &a.out, meta),
    }
}

fn evaluate(a: &EvaluateArgs, g: &Globals) -> Result<()> {
    let pred = io::load_eps_csv(&a.pred)?;
    let truth: ContrastMap<f64> = match (&a.scene, &a.truth) {
        (Some(s), None) => io::load_scene(s)?.contrast()?,
        (None, Some(t)) => io::load_eps_csv(t)?,
        _ => return Err(Error::Config("give exactly one of --scene or --truth".into())),
    };
    let rrmse = report::metric_rrmse(&pred, &truth)?;
    let region = report::region_mean(&pred, &truth)?;
    println!("rrmse {rrmse:.6}");
    if let Some((re, im)) = region {
        println!("support mean eps_r {re:.6} {im:+.6}i");
    }
    fs::create_dir_all(&a.out)?;
    let metrics = json!({
        "rrmse": rrmse,
        "support_mean_eps_r": region.map(|(re, im)| [re, im]),
    });
    fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    let mut meta = g.meta("evaluate");
    meta.extra = metrics;
    write_meta(&a.out, &meta)
}

fn render(a: &RenderArgs, g: &Globals) -> Result<()> {
    let eps = if a.eps.extension().is_some_and(|e| e == "json") {
        io::load_scene(&a.eps)?.contrast()?
    } else {
        io::load_eps_csv(&a.eps)?
    };
    let part = if a.imag { Component::Imag } else { Component::Real };
    let values: Vec<f64> = eps
        .eps_r()
        .iter()
        .map(|e| if a.imag { e.im } else { e.re })
        .collect();
    let lo = a.min.unwrap_or_else(|| values.iter().cloned().fold(f64::INFINITY, f64::min));
    let mut hi = a.max.unwrap_or_else(|| values.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if hi <= lo {
        hi = lo + 1.0;
    }
    fs::create_dir_all(&a.out)?;
    let name = if a.imag { "eps_im.png" } else { "eps_re.png" };
    report::render_map(&eps, (lo, hi), part, a.scale, &a.out.join(name))?;
    let mut meta = g.meta("render");
    meta.extra = json!({ "range": [lo, hi], "image": name });
    write_meta(&a.out, &meta)
}

fn benchmark(a: &BenchmarkArgs, g: &Globals) -> Result<()> {
    let all = report::default_cases()?;
    let cases: Vec<_> = if a.cases.is_empty() {
        all
    } else {
        a.cases
            .iter()
            .map(|n| {
                all.iter().find(|c| &c.name == n).cloned().ok_or_else(|| Error::UnknownProfile {
                    name: n.clone(),
                    valid: iscat::scene::builtin_profile_names(),
                })
            })
            .collect::<Result<_>>()?
    };
    let grid = Grid::new(a.m, 0.15)?;
    let setup = ImagingSetup::reference();
    let cfg = train_config(&a.train, g.seed)?;
    let rows = match a.train.precision {
        Precision::F32 => report::benchmark::<f32>(&cases, &grid, &setup, &cfg, a.snr)?,
        Precision::F64 => report::benchmark::<f64>(&cases, &grid, &setup, &cfg, a.snr)?,
    };
    fs::create_dir_all(&a.out)?;
    let hw = report::hardware_descriptor();
    report::write_benchmark_csv(fs::File::create(a.out.join("benchmark.csv"))?, &rows, &hw)?;
    let mut meta = g.meta("benchmark");
    meta.config = serde_json::to_value(&cfg)?;
    meta.extra = json!({ "hardware": hw, "m": a.m });
    write_meta(&a.out, &meta)
}

fn fresnel(a: &FresnelArgs, g: &Globals) -> Result<()> {
    let records = io::load_fresnel(&a.data)?;
    let desc = io::FresnelDescriptor::load(&a.descriptor)?;
    let freq = if a.freq < 1e3 { a.freq * 1e9 } else { a.freq };
    let cal = io::calibrate_fresnel(&records, &desc, freq)?;
    log::info!(
        "{}: {} samples at {:.2} GHz, incident residual {:.3e}",
        desc.name,
        cal.fields.sample_count(),
        freq / 1e9,
        cal.incident_residual
    );
    fs::create_dir_all(&a.out)?;
    io::save_fields_csv(&a.out.join("e_sca.csv"), &cal.fields)?;
    let calibration = json!({
        "dataset": desc.name,
        "freq_hz": freq,
        "samples": cal.fields.sample_count(),
        "incident_residual": cal.incident_residual,
        "factors": cal.factors.iter().map(|c| [c.re, c.im]).collect::<Vec<_>>(),
    });
    fs::write(a.out.join("calibration.json"), serde_json::to_string_pretty(&calibration)?)?;
    let grid = Grid::new(a.m, a.side)?;
    let scene = SceneFile {
        schema_version: io::SCENE_SCHEMA_VERSION,
        grid: io::GridSpec { m: a.m, side_len: a.side },
        setup: io::SetupSpec {
            freq,
            n_tx: None,
            n_rx: None,
            rx_radius: Some(desc.rx_radius),
            tx_radius: Some(desc.tx_radius),
            tx_angles_deg: Some(desc.tx_angles.clone()),
            rx_angles_deg: Some(desc.rx_angles.clone()),
        },
        profile: None,
        shapes: vec![],
    };
    io::save_scene(&a.out.join("scene.json"), &scene)?;
    let mut meta = g.meta("fresnel");
    if a.calibrate_only {
        meta.extra = calibration;
        return write_meta(&a.out, &meta);
    }
    let cfg = train_config(&a.train, g.seed)?;
    meta.extra = calibration;
    match a.train.precision {
        Precision::F32 => run_reconstruction::<f32>(&cal.fields, &cal.setup, &grid, &cfg, &a.out, meta),
        Precision::F64 => run_reconstruction::<f64>(&cal.fields, &cal.setup, &grid, &cfg, &a.out, meta),
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.strict_deterministic { 1 } else { cli.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let g = Globals { seed: cli.seed, threads: rayon::current_num_threads(), strict: cli.strict_deterministic };
    match &cli.command {
        Command::Simulate(a) => simulate(a, &g),
        Command::Bp(a) => bp(a, &g),
        Command::Reconstruct(a) => reconstruct(a, &g),
        Command::Evaluate(a) => evaluate(a, &g),
        Command::Render(a) => render(a, &g),
        Command::Benchmark(a) => benchmark(a, &g),
        Command::Fresnel(a) => fresnel(a, &g),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
