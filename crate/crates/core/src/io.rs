//! Scene, field and result files, plus the Fresnel measurement format.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::forward::{incident_at_receivers, FieldKind, FieldSet};
use crate::operators::GreenOperators;
use crate::scene::{builtin_profile, rasterize_scene, ContrastMap, Grid, ImagingSetup, ShapeSpec};
use crate::solver::{LossBreakdown, ReconstructionResult, TrainConfig};
use crate::{Complex64, Error, Real, Result, C0};

pub const SCENE_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub m: usize,
    pub side_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupSpec {
    pub freq: f64,
    #[serde(default)]
    pub n_tx: Option<usize>,
    #[serde(default)]
    pub n_rx: Option<usize>,
    /// Receiver ring radius; 20 wavelengths when absent.
    #[serde(default)]
    pub rx_radius: Option<f64>,
    /// Transmitter ring radius; the receiver radius when absent.
    #[serde(default)]
    pub tx_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_angles_deg: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rx_angles_deg: Option<Vec<f64>>,
}

impl SetupSpec {
    pub fn build(&self) -> Result<ImagingSetup> {
        let rx_radius = self.rx_radius.unwrap_or(20.0 * C0 / self.freq);
        let tx_radius = self.tx_radius.unwrap_or(rx_radius);
        if self.tx_angles_deg.is_none() && self.rx_angles_deg.is_none() {
            return ImagingSetup::with_radii(self.freq, self.n_tx.unwrap_or(36), self.n_rx.unwrap_or(36), rx_radius, tx_radius);
        }
        let even = |n: usize| -> Vec<f64> { (0..n).map(|k| 360.0 * k as f64 / n as f64).collect() };
        let tx = match &self.tx_angles_deg {
            Some(a) => a.clone(),
            None => even(self.n_tx.unwrap_or(36)),
        };
        let rx = match &self.rx_angles_deg {
            Some(a) => a.clone(),
            None => even(self.n_rx.unwrap_or(36)),
        };
        if self.n_tx.is_some_and(|n| n != tx.len()) || self.n_rx.is_some_and(|n| n != rx.len()) {
            return Err(Error::Config("antenna counts disagree with the listed angles".into()));
        }
        ImagingSetup::from_angles(self.freq, tx_radius, &tx, rx_radius, &rx)
    }
}

/// Scene description: grid, antenna setup and scatterers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u64,
    pub grid: GridSpec,
    pub setup: SetupSpec,
    /// Name of a bundled profile; used when `shapes` is empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(default)]
    pub shapes: Vec<ShapeSpec>,
}

impl SceneFile {
    /// 64x64 grid over 0.15 m, 36/36 antennas at 4 GHz on a 20-wavelength ring.
    pub fn reference(shapes: Vec<ShapeSpec>) -> Self {
        Self {
            schema_version: SCENE_SCHEMA_VERSION,
            grid: GridSpec { m: 64, side_len: 0.15 },
            setup: SetupSpec {
                freq: 4e9,
                n_tx: Some(36),
                n_rx: Some(36),
                rx_radius: None,
                tx_radius: None,
                tx_angles_deg: None,
                rx_angles_deg: None,
            },
            profile: None,
            shapes,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.m, self.grid.side_len)
    }

    pub fn setup(&self) -> Result<ImagingSetup> {
        self.setup.build()
    }

    pub fn shapes(&self) -> Result<Vec<ShapeSpec>> {
        match (&self.profile, self.shapes.is_empty()) {
            (Some(name), true) => builtin_profile(name),
            _ => Ok(self.shapes.clone()),
        }
    }

    pub fn contrast(&self) -> Result<ContrastMap<f64>> {
        rasterize_scene(&self.shapes()?, &self.grid()?)
    }
}

pub fn parse_scene(text: &str) -> Result<SceneFile> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != SCENE_SCHEMA_VERSION {
        return Err(Error::UnsupportedSchema { found, expected: SCENE_SCHEMA_VERSION });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn load_scene(path: &Path) -> Result<SceneFile> {
    parse_scene(&fs::read_to_string(path)?)
}

pub fn save_scene(path: &Path, scene: &SceneFile) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(scene)?)?;
    Ok(())
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, msg: format!("{other:?}") },
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse { line, msg: format!("missing value for `{name}`") })?;
    raw.trim()
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("invalid `{name}` value `{raw}`") })
}

/// Receiver data as CSV with header `tx,rx,re,im`, one row per measured sample.
pub fn write_fields_csv<W: Write>(out: W, fields: &FieldSet<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tx", "rx", "re", "im"]).map_err(csv_error)?;
    for t in 0..fields.n_illum {
        for r in 0..fields.len {
            let idx = t * fields.len + r;
            if !fields.is_measured(idx) {
                continue;
            }
            let v = fields.values[idx];
            // `{}` prints the shortest representation that parses back exactly
            w.write_record([t.to_string(), r.to_string(), format!("{}", v.re), format!("{}", v.im)])
                .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `tx,rx,re,im` rows. Dimensions default to the largest indices seen;
/// missing `(tx, rx)` pairs become masked samples.
pub fn read_fields_csv<R: Read>(input: R, dims: Option<(usize, usize)>) -> Result<FieldSet<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let cols = ["tx", "rx", "re", "im"].map(|c| column_index(&headers, c));
    let [ct, cr, cre, cim] = [cols[0].as_ref(), cols[1].as_ref(), cols[2].as_ref(), cols[3].as_ref()];
    let (ct, cr, cre, cim) = match (ct, cr, cre, cim) {
        (Ok(a), Ok(b), Ok(c), Ok(d)) => (*a, *b, *c, *d),
        _ => {
            let missing = ["tx", "rx", "re", "im"].into_iter().zip(&cols).find(|(_, c)| c.is_err()).unwrap().0;
            return Err(Error::MissingColumn(missing.to_string()));
        }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let t: usize = field(&rec, ct, "tx", line)?;
        let r: usize = field(&rec, cr, "rx", line)?;
        let re: f64 = field(&rec, cre, "re", line)?;
        let im: f64 = field(&rec, cim, "im", line)?;
        rows.push((line, t, r, Complex64::new(re, im)));
    }
    let (n_tx, n_rx) = match dims {
        Some(d) => d,
        None => (
            rows.iter().map(|r| r.1 + 1).max().unwrap_or(0),
            rows.iter().map(|r| r.2 + 1).max().unwrap_or(0),
        ),
    };
    let mut values = vec![Complex64::new(0.0, 0.0); n_tx * n_rx];
    let mut seen = vec![false; n_tx * n_rx];
    for (line, t, r, v) in rows {
        if t >= n_tx || r >= n_rx {
            return Err(Error::Parse { line, msg: format!("index ({t}, {r}) outside {n_tx} x {n_rx}") });
        }
        if seen[t * n_rx + r] {
            return Err(Error::Parse { line, msg: format!("duplicate sample ({t}, {r})") });
        }
        seen[t * n_rx + r] = true;
        values[t * n_rx + r] = v;
    }
    let fs = FieldSet::new(FieldKind::ScatteredReceiver, n_tx, n_rx, values)?;
    if seen.iter().all(|&s| s) {
        Ok(fs)
    } else {
        fs.with_mask(seen)
    }
}

pub fn save_fields_csv(path: &Path, fields: &FieldSet<f64>) -> Result<()> {
    write_fields_csv(BufWriter::new(File::create(path)?), fields)
}

pub fn load_fields_csv(path: &Path, dims: Option<(usize, usize)>) -> Result<FieldSet<f64>> {
    read_fields_csv(BufReader::new(File::open(path)?), dims)
}

const FIELD_MAGIC: &[u8; 4] = b"ISFD";
const OPERATOR_MAGIC: &[u8; 4] = b"ISGO";
const BINARY_VERSION: u32 = 1;

fn kind_code(k: FieldKind) -> u32 {
    match k {
        FieldKind::IncidentDomain => 0,
        FieldKind::TotalDomain => 1,
        FieldKind::ScatteredReceiver => 2,
    }
}

fn kind_from(code: u32) -> Result<FieldKind> {
    match code {
        0 => Ok(FieldKind::IncidentDomain),
        1 => Ok(FieldKind::TotalDomain),
        2 => Ok(FieldKind::ScatteredReceiver),
        _ => Err(Error::Parse { line: 0, msg: format!("unknown field kind {code}") }),
    }
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact(r)?))
}

fn read_complex<R: Read>(r: &mut R, n: usize) -> Result<Vec<Complex64>> {
    let mut buf = vec![0u8; n * 16];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect())
}

fn write_complex<W: Write>(w: &mut W, v: &[Complex64]) -> Result<()> {
    for c in v {
        w.write_all(&c.re.to_le_bytes())?;
        w.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

/// Binary field file: 32-byte little-endian header (magic, version, kind,
/// rows, columns, mask flag) followed by `re, im` pairs and an optional mask.
pub fn write_fields_bin<W: Write>(mut w: W, fields: &FieldSet<f64>) -> Result<()> {
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&kind_code(fields.kind).to_le_bytes())?;
    w.write_all(&(fields.n_illum as u64).to_le_bytes())?;
    w.write_all(&(fields.len as u64).to_le_bytes())?;
    w.write_all(&(fields.mask.is_some() as u32).to_le_bytes())?;
    write_complex(&mut w, &fields.values)?;
    if let Some(mask) = &fields.mask {
        let bytes: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fields_bin<R: Read>(mut r: R) -> Result<FieldSet<f64>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::Parse { line: 0, msg: "not a field file".into() });
    }
    let version = read_u32(&mut r)?;
    if version != BINARY_VERSION {
        return Err(Error::UnsupportedSchema { found: version as u64, expected: BINARY_VERSION as u64 });
    }
    let kind = kind_from(read_u32(&mut r)?)?;
    let n_illum = read_u64(&mut r)? as usize;
    let len = read_u64(&mut r)? as usize;
    let has_mask = read_u32(&mut r)? != 0;
    let values = read_complex(&mut r, n_illum * len)?;
    let mut fs = FieldSet::new(kind, n_illum, len, values)?;
    if has_mask {
        let mut bytes = vec![0u8; n_illum * len];
        r.read_exact(&mut bytes)?;
        // values are stored as written; do not re-zero through with_mask
        fs.mask = Some(bytes.into_iter().map(|b| b != 0).collect());
    }
    Ok(fs)
}

/// Operator dump: 32-byte header (magic, version, `m`, `n_rx`, `k0`), then
/// the side length, self term, `G_S` and the `G_D` translation kernel.
pub fn write_operators<W: Write>(mut w: W, ops: &GreenOperators<f64>) -> Result<()> {
    w.write_all(OPERATOR_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&(ops.grid().m as u64).to_le_bytes())?;
    w.write_all(&(ops.n_rx() as u64).to_le_bytes())?;
    w.write_all(&ops.k0().to_le_bytes())?;
    w.write_all(&ops.grid().side_len.to_le_bytes())?;
    write_complex(&mut w, &[ops.self_term()])?;
    write_complex(&mut w, ops.gs())?;
    write_complex(&mut w, ops.gd_kernel())?;
    w.flush()?;
    Ok(())
}

pub fn read_operators<R: Read>(mut r: R) -> Result<GreenOperators<f64>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != OPERATOR_MAGIC {
        return Err(Error::Parse { line: 0, msg: "not an operator dump".into() });
    }
    let version = read_u32(&mut r)?;
    if version != BINARY_VERSION {
        return Err(Error::UnsupportedSchema { found: version as u64, expected: BINARY_VERSION as u64 });
    }
    let m = read_u64(&mut r)? as usize;
    let n_rx = read_u64(&mut r)? as usize;
    let k0 = read_f64(&mut r)?;
    let side = read_f64(&mut r)?;
    let grid = Grid::new(m, side)?;
    let self_term = read_complex(&mut r, 1)?[0];
    let gs = read_complex(&mut r, n_rx * m * m)?;
    let kernel = read_complex(&mut r, (2 * m - 1) * (2 * m - 1))?;
    Ok(GreenOperators::from_parts(grid, k0, n_rx, gs, kernel, self_term))
}

/// Permittivity map as CSV `i,j,re,im`.
pub fn write_eps_csv<W: Write, T: Real>(out: W, map: &ContrastMap<T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["i", "j", "re", "im"]).map_err(csv_error)?;
    let eps = map.eps_r();
    for i in 0..map.m {
        for j in 0..map.m {
            let e = eps[i * map.m + j];
            w.write_record([
                i.to_string(),
                j.to_string(),
                format!("{}", e.re.to_f64_lossy()),
                format!("{}", e.im.to_f64_lossy()),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_eps_csv<R: Read>(input: R) -> Result<ContrastMap<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let ci = column_index(&headers, "i")?;
    let cj = column_index(&headers, "j")?;
    let cre = column_index(&headers, "re")?;
    let cim = column_index(&headers, "im")?;
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let i: usize = field(&rec, ci, "i", line)?;
        let j: usize = field(&rec, cj, "j", line)?;
        let re: f64 = field(&rec, cre, "re", line)?;
        let im: f64 = field(&rec, cim, "im", line)?;
        cells.push((i, j, Complex64::new(re, im)));
    }
    let m = (cells.len() as f64).sqrt().round() as usize;
    if m * m != cells.len() || m < 2 {
        return Err(Error::ShapeMismatch(format!("{} cells do not form a square grid", cells.len())));
    }
    let mut eps = vec![Complex64::new(f64::NAN, 0.0); m * m];
    for (i, j, e) in cells {
        if i >= m || j >= m {
            return Err(Error::ShapeMismatch(format!("cell ({i}, {j}) outside a {m}x{m} grid")));
        }
        eps[i * m + j] = e;
    }
    if eps.iter().any(|e| e.re.is_nan()) {
        return Err(Error::ShapeMismatch("permittivity map has missing cells".into()));
    }
    ContrastMap::from_eps(m, &eps)
}

pub fn load_eps_csv(path: &Path) -> Result<ContrastMap<f64>> {
    read_eps_csv(BufReader::new(File::open(path)?))
}

pub fn save_eps_csv<T: Real>(path: &Path, map: &ContrastMap<T>) -> Result<()> {
    write_eps_csv(BufWriter::new(File::create(path)?), map)
}

pub fn write_loss_history<W: Write>(out: W, history: &[LossBreakdown], lr: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "state", "data", "bound", "tv", "total", "lr"]).map_err(csv_error)?;
    for (e, (l, r)) in history.iter().zip(lr).enumerate() {
        w.write_record([
            e.to_string(),
            format!("{}", l.state),
            format!("{}", l.data),
            format!("{}", l.bound),
            format!("{}", l.tv),
            format!("{}", l.total),
            format!("{r}"),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `loss_history.csv` back as `(losses, learning rates)`.
pub fn read_loss_history<R: Read>(input: R) -> Result<(Vec<LossBreakdown>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let names = ["state", "data", "bound", "tv", "total", "lr"];
    let idx: Vec<usize> = names.iter().map(|n| column_index(&headers, n)).collect::<Result<_>>()?;
    let mut losses = Vec::new();
    let mut lrs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let v: Vec<f64> = idx
            .iter()
            .zip(names)
            .map(|(&i, n)| field(&rec, i, n, line))
            .collect::<Result<_>>()?;
        losses.push(LossBreakdown { state: v[0], data: v[1], bound: v[2], tv: v[3], total: v[4] });
        lrs.push(v[5]);
    }
    Ok((losses, lrs))
}

/// Metadata written next to every command output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub strict_deterministic: bool,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub wall_time_s: Option<f64>,
    #[serde(default)]
    pub parameter_count: Option<usize>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn write_run_meta(path: &Path, meta: &RunMeta) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Writes `eps_r.csv`, `loss_history.csv` and `run_meta.json` under `dir`.
pub fn save_result<T: Real>(dir: &Path, result: &ReconstructionResult<T>, cfg: &TrainConfig, mut meta: RunMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_eps_csv(&dir.join("eps_r.csv"), &result.eps_r_pre)?;
    write_loss_history(BufWriter::new(File::create(dir.join("loss_history.csv"))?), &result.loss_history, &result.lr_history)?;
    meta.config = serde_json::to_value(cfg)?;
    meta.wall_time_s = Some(result.wall_time);
    meta.parameter_count = Some(result.param_count);
    let mut extra = match meta.extra.take() {
        serde_json::Value::Object(o) => o,
        _ => serde_json::Map::new(),
    };
    extra.insert("epochs_run".into(), result.epochs_run.into());
    extra.insert("setup_time_s".into(), result.setup_time.into());
    extra.insert("input_scale".into(), result.input_scale.into());
    extra.insert("final_loss".into(), serde_json::to_value(result.final_loss)?);
    extra.insert("bp_loss".into(), serde_json::to_value(result.bp_loss)?);
    meta.extra = serde_json::Value::Object(extra);
    write_run_meta(&dir.join("run_meta.json"), &meta)
}

/// One line of a Fresnel measurement file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FresnelRecord {
    /// Degrees in `[0, 360)`.
    pub tx_angle: f64,
    pub rx_angle: f64,
    /// Hz.
    pub freq: f64,
    pub total: Complex64,
    pub incident: Option<Complex64>,
}

/// Parses whitespace-separated `tx rx freq Re(Et) Im(Et) [Re(Ei) Im(Ei)]`
/// lines. Lines starting with `#`, `%` or `!` are comments. Frequencies below
/// 1 kHz are read as GHz.
pub fn parse_fresnel<R: BufRead>(input: R) -> Result<Vec<FresnelRecord>> {
    let mut out = Vec::new();
    let mut arity = None;
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with(['#', '%', '!']) {
            continue;
        }
        let cols: Vec<&str> = t.split_whitespace().collect();
        if cols.len() != 5 && cols.len() != 7 {
            return Err(Error::Parse { line: lineno, msg: format!("expected 5 or 7 columns, found {}", cols.len()) });
        }
        match arity {
            None => arity = Some(cols.len()),
            Some(a) if a != cols.len() => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("record has {} columns, earlier records have {a}", cols.len()),
                })
            }
            _ => {}
        }
        let v: Vec<f64> = cols
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| Error::Parse { line: lineno, msg: format!("invalid number `{c}`") }))
            .collect::<Result<_>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse { line: lineno, msg: "non-finite value".into() });
        }
        let freq = if v[2] < 1e3 { v[2] * 1e9 } else { v[2] };
        if !(freq > 0.0) {
            return Err(Error::Parse { line: lineno, msg: "frequency must be positive".into() });
        }
        out.push(FresnelRecord {
            tx_angle: v[0].rem_euclid(360.0),
            rx_angle: v[1].rem_euclid(360.0),
            freq,
            total: Complex64::new(v[3], v[4]),
            incident: (v.len() == 7).then(|| Complex64::new(v[5], v[6])),
        });
    }
    Ok(out)
}

pub fn load_fresnel(path: &Path) -> Result<Vec<FresnelRecord>> {
    parse_fresnel(BufReader::new(File::open(path)?))
}

pub fn write_fresnel<W: Write>(mut w: W, records: &[FresnelRecord]) -> Result<()> {
    for r in records {
        match r.incident {
            Some(i) => writeln!(w, "{} {} {} {} {} {} {}", r.tx_angle, r.rx_angle, r.freq, r.total.re, r.total.im, i.re, i.im)?,
            None => writeln!(w, "{} {} {} {} {}", r.tx_angle, r.rx_angle, r.freq, r.total.re, r.total.im)?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Records keyed by frequency rounded to the nearest Hz.
pub fn group_by_frequency(records: &[FresnelRecord]) -> BTreeMap<u64, Vec<FresnelRecord>> {
    let mut out: BTreeMap<u64, Vec<FresnelRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.freq.round() as u64).or_default().push(*r);
    }
    out
}

/// Geometry of a measured dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FresnelDescriptor {
    pub name: String,
    pub tx_radius: f64,
    pub rx_radius: f64,
    /// Degrees.
    pub tx_angles: Vec<f64>,
    /// Every receiver angle used by any transmitter, degrees.
    pub rx_angles: Vec<f64>,
    /// Hz.
    pub frequencies: Vec<f64>,
    /// `"exp(-iwt)"` (default) or `"exp(+iwt)"`; the latter is conjugated on load.
    #[serde(default)]
    pub time_convention: Option<String>,
}

impl FresnelDescriptor {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn conjugate(&self) -> Result<bool> {
        match self.time_convention.as_deref() {
            None | Some("exp(-iwt)") => Ok(false),
            Some("exp(+iwt)") => Ok(true),
            Some(other) => Err(Error::Config(format!("unknown time convention `{other}`"))),
        }
    }

    /// Antenna setup at `freq` with the full receiver union.
    pub fn setup(&self, freq: f64) -> Result<ImagingSetup> {
        ImagingSetup::from_angles(freq, self.tx_radius, &self.tx_angles, self.rx_radius, &self.rx_angles)
    }
}

fn angle_index(angles: &[f64], a: f64) -> Option<usize> {
    angles.iter().position(|&b| {
        let d = (a - b).rem_euclid(360.0);
        d.min(360.0 - d) < 1e-6
    })
}

/// Calibrated receiver data at one frequency.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub setup: ImagingSetup,
    /// Scattered field, masked where no record exists.
    pub fields: FieldSet<f64>,
    /// Per-transmitter complex factor applied to the measurements.
    pub factors: Vec<Complex64>,
    /// `||c_t E_inc_meas - E_inc_model|| / ||E_inc_model||` over all samples.
    pub incident_residual: f64,
}

/// Subtracts incident from total field and rescales each transmitter so that
/// its measured incident field best matches the line-source model.
pub fn calibrate_fresnel(records: &[FresnelRecord], desc: &FresnelDescriptor, freq: f64) -> Result<Calibrated> {
    let setup = desc.setup(freq)?;
    let conj = desc.conjugate()?;
    let (n_tx, n_rx) = (setup.n_tx, setup.n_rx);
    let mut total = vec![Complex64::new(0.0, 0.0); n_tx * n_rx];
    let mut inc = vec![Complex64::new(0.0, 0.0); n_tx * n_rx];
    let mut seen = vec![false; n_tx * n_rx];
    for r in records {
        if (r.freq - freq).abs() > 1e-6 * freq {
            continue;
        }
        let t = angle_index(&desc.tx_angles, r.tx_angle)
            .ok_or_else(|| Error::Geometry(format!("transmitter angle {} not in the descriptor", r.tx_angle)))?;
        let q = angle_index(&desc.rx_angles, r.rx_angle)
            .ok_or_else(|| Error::Geometry(format!("receiver angle {} not in the descriptor", r.rx_angle)))?;
        let i = r
            .incident
            .ok_or_else(|| Error::MissingIncident(format!("record tx {} rx {}", r.tx_angle, r.rx_angle)))?;
        let fix = |v: Complex64| if conj { v.conj() } else { v };
        total[t * n_rx + q] = fix(r.total);
        inc[t * n_rx + q] = fix(i);
        seen[t * n_rx + q] = true;
    }
    if !seen.iter().any(|&s| s) {
        return Err(Error::MissingIncident(format!("no records at {freq} Hz")));
    }
    let model = incident_at_receivers(&setup);
    let mut factors = Vec::with_capacity(n_tx);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut sca = vec![Complex64::new(0.0, 0.0); n_tx * n_rx];
    for t in 0..n_tx {
        let mut cn = Complex64::new(0.0, 0.0);
        let mut cd = 0.0;
        for q in 0..n_rx {
            let k = t * n_rx + q;
            if seen[k] {
                cn += inc[k].conj() * model[k];
                cd += inc[k].norm_sqr();
            }
        }
        if cd == 0.0 {
            if seen[t * n_rx..(t + 1) * n_rx].iter().any(|&s| s) {
                return Err(Error::ZeroNormalization(format!("measured incident field of transmitter {t} is zero")));
            }
            factors.push(Complex64::new(0.0, 0.0));
            continue;
        }
        let c = cn / cd;
        for q in 0..n_rx {
            let k = t * n_rx + q;
            if seen[k] {
                sca[k] = c * (total[k] - inc[k]);
                num += (c * inc[k] - model[k]).norm_sqr();
                den += model[k].norm_sqr();
            }
        }
        factors.push(c);
    }
    let fields = FieldSet::new(FieldKind::ScatteredReceiver, n_tx, n_rx, sca)?.with_mask(seen)?;
    Ok(Calibrated { setup, fields, factors, incident_residual: (num / den).sqrt() })
}
