//! Imaging geometry and ground-truth scatterer rasterization.
//!
//! Coordinates: `x` to the right, `y` up, DOI centred at the origin. Cell
//! `(i, j)` has row index `i` increasing with `y` and column index `j`
//! increasing with `x`; flattened index is `i * m + j`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Complex, Error, Real, Result, C0};

/// Square domain of interest split into `m x m` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub m: usize,
    pub side_len: f64,
    pub cell_size: f64,
}

impl Grid {
    pub fn new(m: usize, side_len: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Geometry(format!("grid needs m >= 2, got {m}")));
        }
        if !(side_len.is_finite() && side_len > 0.0) {
            return Err(Error::Geometry(format!("side length must be positive, got {side_len}")));
        }
        Ok(Self {
            m,
            side_len,
            cell_size: side_len / m as f64,
        })
    }

    /// 0.15 m DOI on a 64 x 64 grid.
    pub fn reference() -> Self {
        Self::new(64, 0.15).expect("valid reference grid")
    }

    pub fn n_cells(&self) -> usize {
        self.m * self.m
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    pub fn half_side(&self) -> f64 {
        0.5 * self.side_len
    }

    /// Centre of cell `(i, j)`.
    #[inline]
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let h = self.half_side();
        (
            -h + (j as f64 + 0.5) * self.cell_size,
            -h + (i as f64 + 0.5) * self.cell_size,
        )
    }

    /// All centres in flattened order.
    pub fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.m)
            .flat_map(|i| (0..self.m).map(move |j| (i, j)))
            .map(|(i, j)| self.center(i, j))
            .collect()
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let h = self.half_side();
        x.abs() <= h && y.abs() <= h
    }
}

/// Transmitter/receiver ring and frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagingSetup {
    pub freq: f64,
    pub k0: f64,
    pub lambda0: f64,
    pub n_tx: usize,
    pub n_rx: usize,
    /// Receiver ring radius.
    pub ring_radius: f64,
    /// Transmitter ring radius; equals `ring_radius` unless set explicitly.
    pub tx_radius: f64,
    pub tx_positions: Vec<(f64, f64)>,
    pub rx_positions: Vec<(f64, f64)>,
}

fn ring(n: usize, radius: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let phi = 2.0 * PI * k as f64 / n as f64;
            (radius * phi.cos(), radius * phi.sin())
        })
        .collect()
}

impl ImagingSetup {
    pub fn new(freq: f64, n_tx: usize, n_rx: usize, ring_radius: f64) -> Result<Self> {
        Self::with_radii(freq, n_tx, n_rx, ring_radius, ring_radius)
    }

    pub fn with_radii(
        freq: f64,
        n_tx: usize,
        n_rx: usize,
        rx_radius: f64,
        tx_radius: f64,
    ) -> Result<Self> {
        if !(freq.is_finite() && freq > 0.0) {
            return Err(Error::Config(format!("frequency must be positive, got {freq}")));
        }
        if n_tx == 0 || n_rx == 0 {
            return Err(Error::Config("need at least one transmitter and receiver".into()));
        }
        if !(rx_radius > 0.0 && tx_radius > 0.0) {
            return Err(Error::Geometry("ring radii must be positive".into()));
        }
        let k0 = 2.0 * PI * freq / C0;
        Ok(Self {
            freq,
            k0,
            lambda0: 2.0 * PI / k0,
            n_tx,
            n_rx,
            ring_radius: rx_radius,
            tx_radius,
            tx_positions: ring(n_tx, tx_radius),
            rx_positions: ring(n_rx, rx_radius),
        })
    }

    /// 4 GHz, 36 transmitters and 36 receivers on a 20-wavelength ring.
    pub fn reference() -> Self {
        let freq = 4e9;
        let lambda = C0 / freq;
        Self::new(freq, 36, 36, 20.0 * lambda).expect("valid reference setup")
    }

    /// Antennas at explicit angles (degrees) on two rings.
    pub fn from_angles(
        freq: f64,
        tx_radius: f64,
        tx_angles_deg: &[f64],
        rx_radius: f64,
        rx_angles_deg: &[f64],
    ) -> Result<Self> {
        let mut s = Self::with_radii(freq, tx_angles_deg.len().max(1), rx_angles_deg.len().max(1), rx_radius, tx_radius)?;
        if tx_angles_deg.is_empty() || rx_angles_deg.is_empty() {
            return Err(Error::Config("need at least one transmitter and receiver".into()));
        }
        let place = |r: f64, a: &[f64]| -> Vec<(f64, f64)> {
            a.iter().map(|d| (r * d.to_radians().cos(), r * d.to_radians().sin())).collect()
        };
        s.tx_positions = place(tx_radius, tx_angles_deg);
        s.rx_positions = place(rx_radius, rx_angles_deg);
        Ok(s)
    }

    /// Polar angle of transmitter `t` in `[0, 2 pi)`.
    pub fn tx_angle(&self, t: usize) -> f64 {
        let (x, y) = self.tx_positions[t];
        y.atan2(x).rem_euclid(2.0 * PI)
    }

    pub fn rx_angle(&self, r: usize) -> f64 {
        let (x, y) = self.rx_positions[r];
        y.atan2(x).rem_euclid(2.0 * PI)
    }

    /// Errors unless every antenna lies strictly outside the DOI.
    pub fn check_outside(&self, grid: &Grid) -> Result<()> {
        let h = grid.half_side();
        for (label, pts) in [("transmitter", &self.tx_positions), ("receiver", &self.rx_positions)] {
            for (k, &(x, y)) in pts.iter().enumerate() {
                if x.abs() <= h && y.abs() <= h {
                    return Err(Error::Geometry(format!(
                        "{label} {k} at ({x:.4}, {y:.4}) lies inside the DOI"
                    )));
                }
            }
        }
        Ok(())
    }
}

mod eps_serde {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Real(f64),
        Pair([f64; 2]),
    }

    pub fn serialize<S: Serializer>(v: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        use serde::Serialize;
        [v.re, v.im].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        Ok(match Repr::deserialize(d)? {
            Repr::Real(re) => Complex64::new(re, 0.0),
            Repr::Pair([re, im]) => Complex64::new(re, im),
        })
    }
}

/// One homogeneous ground-truth scatterer. `eps_r` serializes as `[re, im]`
/// (a bare number is accepted on input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeSpec {
    Disc {
        center: [f64; 2],
        radius: f64,
        #[serde(with = "eps_serde")]
        eps_r: Complex64,
    },
    Annulus {
        center: [f64; 2],
        inner: f64,
        outer: f64,
        #[serde(with = "eps_serde")]
        eps_r: Complex64,
    },
    Rectangle {
        center: [f64; 2],
        half_extents: [f64; 2],
        #[serde(with = "eps_serde")]
        eps_r: Complex64,
    },
}

impl ShapeSpec {
    pub fn disc(center: [f64; 2], radius: f64, eps_r: Complex64) -> Self {
        ShapeSpec::Disc { center, radius, eps_r }
    }

    pub fn eps_r(&self) -> Complex64 {
        match self {
            ShapeSpec::Disc { eps_r, .. }
            | ShapeSpec::Annulus { eps_r, .. }
            | ShapeSpec::Rectangle { eps_r, .. } => *eps_r,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            ShapeSpec::Disc { center, radius, .. } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                dx * dx + dy * dy < radius * radius
            }
            ShapeSpec::Annulus { center, inner, outer, .. } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let r2 = dx * dx + dy * dy;
                r2 < outer * outer && r2 >= inner * inner
            }
            ShapeSpec::Rectangle { center, half_extents, .. } => {
                (x - center[0]).abs() < half_extents[0] && (y - center[1]).abs() < half_extents[1]
            }
        }
    }

    /// Axis-aligned bounding box `(xmin, xmax, ymin, ymax)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (c, hx, hy) = match *self {
            ShapeSpec::Disc { center, radius, .. } => (center, radius, radius),
            ShapeSpec::Annulus { center, outer, .. } => (center, outer, outer),
            ShapeSpec::Rectangle { center, half_extents, .. } => {
                (center, half_extents[0], half_extents[1])
            }
        };
        (c[0] - hx, c[0] + hx, c[1] - hy, c[1] + hy)
    }

    pub fn area(&self) -> f64 {
        match *self {
            ShapeSpec::Disc { radius, .. } => PI * radius * radius,
            ShapeSpec::Annulus { inner, outer, .. } => PI * (outer * outer - inner * inner),
            ShapeSpec::Rectangle { half_extents, .. } => 4.0 * half_extents[0] * half_extents[1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        match *self {
            ShapeSpec::Disc { radius, center, .. } => {
                if !(finite(radius) && radius > 0.0) || !center.iter().all(|c| finite(*c)) {
                    return Err(Error::Geometry(format!("disc radius must be positive, got {radius}")));
                }
            }
            ShapeSpec::Annulus { inner, outer, .. } => {
                if !(inner > 0.0 && outer > 0.0 && inner < outer) {
                    return Err(Error::Geometry(format!(
                        "annulus needs 0 < inner < outer, got inner={inner} outer={outer}"
                    )));
                }
            }
            ShapeSpec::Rectangle { half_extents, .. } => {
                if !(half_extents[0] > 0.0 && half_extents[1] > 0.0) {
                    return Err(Error::Geometry("rectangle half extents must be positive".into()));
                }
            }
        }
        let eps = self.eps_r();
        if !(eps.re.is_finite() && eps.im.is_finite()) || eps.re < 1.0 {
            return Err(Error::Geometry(format!(
                "ground-truth permittivity needs Re(eps_r) >= 1, got {eps}"
            )));
        }
        Ok(())
    }
}

/// Complex contrast `chi = eps_r - 1` on an `m x m` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMap<T: Real = f64> {
    pub m: usize,
    pub chi: Vec<Complex<T>>,
}

impl<T: Real> ContrastMap<T> {
    pub fn zeros(m: usize) -> Self {
        Self {
            m,
            chi: vec![Complex::new(T::zero(), T::zero()); m * m],
        }
    }

    pub fn from_chi(m: usize, chi: Vec<Complex<T>>) -> Result<Self> {
        if chi.len() != m * m {
            return Err(Error::ShapeMismatch(format!(
                "contrast map of length {} for m = {m}",
                chi.len()
            )));
        }
        Ok(Self { m, chi })
    }

    pub fn from_eps(m: usize, eps: &[Complex<T>]) -> Result<Self> {
        Self::from_chi(m, eps.iter().map(|e| e - T::one()).collect())
    }

    pub fn eps_r(&self) -> Vec<Complex<T>> {
        self.chi.iter().map(|c| c + T::one()).collect()
    }

    pub fn eps_at(&self, i: usize, j: usize) -> Complex<T> {
        self.chi[i * self.m + j] + T::one()
    }

    pub fn cast<U: Real>(&self) -> ContrastMap<U> {
        ContrastMap {
            m: self.m,
            chi: self
                .chi
                .iter()
                .map(|c| Complex::new(U::of(c.re.to_f64_lossy()), U::of(c.im.to_f64_lossy())))
                .collect(),
        }
    }

    /// Counter-clockwise rotation by 90 degrees about the grid centre.
    pub fn rotate90(&self) -> Self {
        let m = self.m;
        let mut chi = self.chi.clone();
        for i in 0..m {
            for j in 0..m {
                // (x, y) -> (-y, x): new column from old row, new row from mirrored old column
                chi[j * m + (m - 1 - i)] = self.chi[i * m + j];
            }
        }
        Self { m, chi }
    }

    /// Number of cells with nonzero contrast.
    pub fn support_count(&self) -> usize {
        self.chi.iter().filter(|c| c.re != T::zero() || c.im != T::zero()).count()
    }
}

/// Paints shapes in order onto the grid; later shapes overwrite earlier ones.
pub fn rasterize_scene(shapes: &[ShapeSpec], grid: &Grid) -> Result<ContrastMap<f64>> {
    let h = grid.half_side();
    let slack = 1e-12 * grid.side_len;
    for (k, s) in shapes.iter().enumerate() {
        s.validate()?;
        let (x0, x1, y0, y1) = s.bounds();
        if x0 < -h - slack || x1 > h + slack || y0 < -h - slack || y1 > h + slack {
            return Err(Error::Geometry(format!(
                "shape {k} extends outside the DOI [-{h}, {h}]^2"
            )));
        }
    }
    let mut map = ContrastMap::zeros(grid.m);
    for i in 0..grid.m {
        for j in 0..grid.m {
            let (x, y) = grid.center(i, j);
            if let Some(s) = shapes.iter().rev().find(|s| s.contains(x, y)) {
                map.chi[i * grid.m + j] = s.eps_r() - 1.0;
            }
        }
    }
    Ok(map)
}

#[derive(Deserialize)]
struct ProfileTable {
    version: u64,
    profiles: Vec<NamedProfile>,
}

#[derive(Deserialize)]
struct NamedProfile {
    name: String,
    shapes: Vec<ShapeSpec>,
}

const PROFILE_TABLE: &str = include_str!("../data/profiles.json");

/// Version of the bundled profile geometry table.
pub fn profile_table_version() -> u64 {
    parse_profiles().version
}

fn parse_profiles() -> ProfileTable {
    serde_json::from_str(PROFILE_TABLE).expect("bundled profile table is valid JSON")
}

/// Names accepted by [`builtin_profile`].
pub fn builtin_profile_names() -> Vec<String> {
    parse_profiles().profiles.into_iter().map(|p| p.name).collect()
}

/// One of the six bundled multi-scatterer test cases, sized for the 0.15 m DOI.
pub fn builtin_profile(name: &str) -> Result<Vec<ShapeSpec>> {
    let table = parse_profiles();
    let valid: Vec<String> = table.profiles.iter().map(|p| p.name.clone()).collect();
    table
        .profiles
        .into_iter()
        .find(|p| p.name == name)
        .map(|p| p.shapes)
        .ok_or(Error::UnknownProfile { name: name.to_string(), valid })
}

/// Centred disc used by the forward-model and reconstruction fixtures.
pub fn reference_disc() -> Vec<ShapeSpec> {
    vec![ShapeSpec::disc([0.0, 0.0], 0.03, Complex64::new(2.0, 0.0))]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_invariants() {
        let g = Grid::reference();
        assert_eq!(g.cell_size, 0.15 / 64.0);
        let (x, y) = g.center(0, 0);
        let (x2, y2) = g.center(63, 63);
        assert!((x + x2).abs() < 1e-15 && (y + y2).abs() < 1e-15);
        assert!(Grid::new(1, 0.1).is_err());
        assert!(Grid::new(4, 0.0).is_err());
    }

    #[test]
    fn reference_setup_constants() {
        let s = ImagingSetup::reference();
        assert!((s.k0 - 2.0 * PI * 4e9 / C0).abs() < 1e-12);
        assert!((s.lambda0 - C0 / 4e9).abs() < 1e-15);
        assert_eq!(s.tx_positions.len(), 36);
        assert!((s.ring_radius - 20.0 * s.lambda0).abs() < 1e-12);
        s.check_outside(&Grid::reference()).unwrap();
    }

    #[test]
    fn empty_scene_is_background() {
        let map = rasterize_scene(&[], &Grid::reference()).unwrap();
        assert!(map.chi.iter().all(|c| *c == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn full_coverage_disc() {
        let g = Grid::new(16, 0.1).unwrap();
        // Disc clipped to the DOI is rejected, so use a rectangle filling the grid.
        let full = ShapeSpec::Rectangle {
            center: [0.0, 0.0],
            half_extents: [0.05, 0.05],
            eps_r: Complex64::new(2.0, 0.0),
        };
        let map = rasterize_scene(&[full], &g).unwrap();
        assert!(map.chi.iter().all(|c| *c == Complex64::new(1.0, 0.0)));
        let disc = ShapeSpec::disc([0.0, 0.0], 0.05, Complex64::new(2.0, 0.0));
        let map = rasterize_scene(&[disc], &g).unwrap();
        assert_eq!(map.chi[0], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn disc_cell_count_matches_membership_test() {
        let g = Grid::reference();
        let map = rasterize_scene(&reference_disc(), &g).unwrap();
        let mut count = 0;
        for i in 0..g.m {
            for j in 0..g.m {
                let x = -0.075 + (j as f64 + 0.5) * 0.15 / 64.0;
                let y = -0.075 + (i as f64 + 0.5) * 0.15 / 64.0;
                if (x * x + y * y).sqrt() < 0.03 {
                    count += 1;
                }
            }
        }
        assert_eq!(map.support_count(), count);
    }

    #[test]
    fn later_shapes_overwrite() {
        let g = Grid::new(8, 0.08).unwrap();
        let a = ShapeSpec::disc([0.0, 0.0], 0.03, Complex64::new(2.0, 0.0));
        let b = ShapeSpec::disc([0.0, 0.0], 0.01, Complex64::new(3.0, 0.5));
        let map = rasterize_scene(&[a, b], &g).unwrap();
        assert_eq!(map.eps_at(3, 3), Complex64::new(3.0, 0.5));
        assert_eq!(map.eps_at(3, 1), Complex64::new(2.0, 0.0));
    }

    #[test]
    fn shape_outside_doi_rejected() {
        let g = Grid::reference();
        let s = ShapeSpec::disc([0.07, 0.0], 0.01, Complex64::new(2.0, 0.0));
        assert!(matches!(rasterize_scene(&[s], &g), Err(Error::Geometry(_))));
    }

    #[test]
    fn invalid_shapes_rejected() {
        let g = Grid::reference();
        let bad = [
            ShapeSpec::disc([0.0, 0.0], -0.01, Complex64::new(2.0, 0.0)),
            ShapeSpec::Annulus {
                center: [0.0, 0.0],
                inner: 0.03,
                outer: 0.02,
                eps_r: Complex64::new(2.0, 0.0),
            },
            ShapeSpec::disc([0.0, 0.0], 0.01, Complex64::new(0.5, 0.0)),
        ];
        for s in bad {
            assert!(rasterize_scene(&[s], &g).is_err());
        }
    }

    #[test]
    fn builtin_profiles_structure() {
        let names = builtin_profile_names();
        assert_eq!(
            names,
            ["austria", "overlap-ring", "three-discs", "overlap-disc", "concentric", "corner-overlap"]
        );
        let austria = builtin_profile("austria").unwrap();
        let annuli = austria.iter().filter(|s| matches!(s, ShapeSpec::Annulus { .. })).count();
        let discs = austria.iter().filter(|s| matches!(s, ShapeSpec::Disc { .. })).count();
        assert_eq!((annuli, discs), (1, 2));
        assert!(austria.iter().all(|s| s.eps_r().re > 1.0));

        let conc = builtin_profile("concentric").unwrap();
        assert_eq!(conc.len(), 2);
        match (&conc[0], &conc[1]) {
            (
                ShapeSpec::Disc { center: c0, radius: r0, eps_r: e0 },
                ShapeSpec::Disc { center: c1, radius: r1, eps_r: e1 },
            ) => {
                assert_eq!(c0, c1);
                assert!(r0 != r1);
                assert!(e0 != e1);
            }
            _ => panic!("concentric profile must be two discs"),
        }
        for name in names {
            let map = rasterize_scene(&builtin_profile(&name).unwrap(), &Grid::reference()).unwrap();
            assert!(map.eps_r().iter().all(|e| e.re >= 1.0), "{name}");
            assert!(map.support_count() > 0, "{name}");
        }
    }

    #[test]
    fn unknown_profile_lists_names() {
        let err = builtin_profile("nope").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("austria") && msg.contains("corner-overlap"), "{msg}");
    }

    #[test]
    fn disc_area_converges() {
        let g = Grid::new(256, 0.15).unwrap();
        let map = rasterize_scene(&reference_disc(), &g).unwrap();
        let area = map.support_count() as f64 * g.cell_area();
        let exact = PI * 0.03 * 0.03;
        assert!(((area - exact) / exact).abs() < 0.02);
    }

    #[test]
    fn centered_disc_is_rotation_invariant() {
        let g = Grid::reference();
        let map = rasterize_scene(&reference_disc(), &g).unwrap();
        assert_eq!(map.rotate90(), map);
        let r4 = map.rotate90().rotate90().rotate90().rotate90();
        assert_eq!(r4, map);
    }

    #[test]
    fn rasterization_is_idempotent() {
        let shapes = builtin_profile("austria").unwrap();
        let a = rasterize_scene(&shapes, &Grid::reference()).unwrap();
        let b = rasterize_scene(&shapes, &Grid::reference()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_json_roundtrip() {
        let s = ShapeSpec::Annulus {
            center: [0.0, -0.015],
            inner: 0.02,
            outer: 0.04,
            eps_r: Complex64::new(2.0, 0.3),
        };
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"kind\":\"annulus\""));
        let back: ShapeSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bare: ShapeSpec =
            serde_json::from_str(r#"{"kind":"disc","center":[0,0],"radius":0.01,"eps_r":2}"#).unwrap();
        assert_eq!(bare.eps_r(), Complex64::new(2.0, 0.0));
    }
}
