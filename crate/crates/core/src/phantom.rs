//! Synthetic cord phantoms: a tube along an analytic centerline with
//! level-labelled rootlet bands, single-voxel disc labels and a T2-like image.
//!
//! Anatomy is placed by arc length `s` along the centerline. The top slice
//! centre sits at `s = top_arc_length` and `s` grows inferiorly.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{write_atomic, write_csv};
use crate::nifti::save_volume;
use crate::volume::{Grid, Image, LabelMap};

pub const BACKGROUND: f32 = 0.1;
pub const CORD: f32 = 1.0;
pub const BAND: f32 = 0.5;
pub const TEMPLATE_SPACING: f64 = 0.5;
/// Radius of one rootlet blob (mm).
const BLOB_RADIUS: f64 = 1.2;
/// Distance of disc labels in front of the cord surface (mm).
const DISC_GAP: f64 = 1.5;
/// Membership slack so boundaries that land on voxel centres do not depend on rounding.
const TIE_MM: f64 = 1e-6;
const TABLE_STEP: f64 = 0.01;

/// Sagittal-plane shape of the centerline, as a y-offset `g(h)` of the
/// vertical depth `h` below the top slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Curvature {
    Straight,
    /// Circular arc; the sign of `radius` picks the bending direction.
    /// `apex` is the depth (mm) of the arc apex, centred when absent.
    Arc {
        radius: f64,
        #[serde(default)]
        apex: Option<f64>,
    },
    Sinusoid {
        amplitude: f64,
        wavelength: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl Curvature {
    /// Offset and its first two derivatives at depth `h`.
    fn eval(&self, h: f64, depth: f64) -> (f64, f64, f64) {
        match *self {
            Curvature::Straight => (0.0, 0.0, 0.0),
            Curvature::Arc { radius, apex } => {
                let r = radius.abs();
                let sign = radius.signum();
                let u = h - apex.unwrap_or(0.5 * depth);
                let u = u.clamp(-0.999 * r, 0.999 * r);
                let q = (r * r - u * u).sqrt();
                (sign * (q - r), -sign * u / q, -sign * r * r / (q * q * q))
            }
            Curvature::Sinusoid {
                amplitude,
                wavelength,
                phase,
            } => {
                let w = std::f64::consts::TAU / wavelength;
                let a = w * h + phase;
                (amplitude * a.sin(), amplitude * w * a.cos(), -amplitude * w * w * a.sin())
            }
        }
    }
}

/// Cord radius along arc length, with an optional enlargement bump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CordProfile {
    pub radius: f64,
    pub bump_amplitude: f64,
    /// Arc length of the bump centre; midway between the C5 and C6 bands when absent.
    #[serde(default)]
    pub bump_center: Option<f64>,
    pub bump_width: f64,
}

impl Default for CordProfile {
    fn default() -> Self {
        CordProfile {
            radius: 3.5,
            bump_amplitude: 1.0,
            bump_center: None,
            bump_width: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub cord: CordProfile,
    pub curvature: Curvature,
    /// Arc length at the top slice centre.
    #[serde(default)]
    pub top_arc_length: f64,
    /// Nominal band centres (arc length, mm) of levels 2..=8.
    pub rootlet_centers: BTreeMap<u8, f64>,
    pub band_thickness: f64,
    /// Disc label value → arc length.
    pub disc_positions: BTreeMap<u8, f64>,
    /// Vertebral–spinal offsets added to the band centres.
    #[serde(default)]
    pub offsets: BTreeMap<u8, f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub fn default_rootlet_centers() -> BTreeMap<u8, f64> {
    [(2, 21.0), (3, 38.0), (4, 54.0), (5, 70.0), (6, 86.0), (7, 102.0), (8, 118.0)].into_iter().collect()
}

pub fn default_disc_positions() -> BTreeMap<u8, f64> {
    [(2, 12.0), (3, 30.0), (4, 46.0), (5, 62.0), (6, 78.0), (7, 94.0), (8, 110.0), (9, 126.0)]
        .into_iter()
        .collect()
}

impl PhantomSpec {
    /// Straight template-like phantom on a 48×48×300 grid of 0.5 mm voxels.
    pub fn template_default() -> Self {
        PhantomSpec {
            dims: [48, 48, 300],
            spacing: [TEMPLATE_SPACING; 3],
            cord: CordProfile::default(),
            curvature: Curvature::Straight,
            top_arc_length: 0.0,
            rootlet_centers: default_rootlet_centers(),
            band_thickness: 8.0,
            disc_positions: default_disc_positions(),
            offsets: BTreeMap::new(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// Subject-like phantom with 0.8 mm voxels and a gentle arc.
    pub fn subject_default() -> Self {
        PhantomSpec {
            dims: [32, 80, 188],
            spacing: [0.8; 3],
            curvature: Curvature::Arc {
                radius: 300.0,
                apex: None,
            },
            noise_sigma: 0.02,
            ..Self::template_default()
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        let origin = [
            -0.5 * (self.dims[0] - 1) as f64 * self.spacing[0],
            -0.5 * (self.dims[1] - 1) as f64 * self.spacing[1],
            0.0,
        ];
        Grid::axis_aligned(self.dims, self.spacing, origin)
    }

    /// Band centre of `level` including its offset.
    pub fn band_center(&self, level: u8) -> Option<f64> {
        self.rootlet_centers
            .get(&level)
            .map(|s| s + self.offsets.get(&level).copied().unwrap_or(0.0))
    }

    pub fn bump_center(&self) -> f64 {
        self.cord.bump_center.unwrap_or_else(|| {
            match (self.band_center(5), self.band_center(6)) {
                (Some(a), Some(b)) => 0.5 * (a + b),
                _ => 78.0,
            }
        })
    }

    pub fn radius_at(&self, s: f64) -> f64 {
        let c = &self.cord;
        c.radius + c.bump_amplitude * (-((s - self.bump_center()) / c.bump_width).powi(2)).exp()
    }

    fn max_radius(&self) -> f64 {
        self.cord.radius + self.cord.bump_amplitude.max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.dims.iter().any(|&d| d < 2) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("dims must be >= 2 and spacing > 0".into());
        }
        if !(self.cord.radius > 0.0) || self.cord.radius + self.cord.bump_amplitude.min(0.0) <= 0.0 {
            return bad("cord radius must stay positive".into());
        }
        if !(self.cord.bump_width > 0.0) || !(self.band_thickness > 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("bump width and band thickness must be > 0, noise >= 0".into());
        }
        match self.curvature {
            Curvature::Arc { radius, .. } if radius.abs() < 20.0 => {
                return bad(format!("arc radius {radius} mm is too tight"));
            }
            Curvature::Sinusoid { wavelength, .. } if !(wavelength > 0.0) => {
                return bad("sinusoid wavelength must be > 0".into());
            }
            _ => {}
        }
        if self.rootlet_centers.keys().any(|l| !(2..=8).contains(l)) {
            return bad("rootlet levels must lie in 2..=8".into());
        }
        if self.rootlet_centers.len() < 2 {
            return bad("at least two rootlet levels are required".into());
        }
        let bands: Vec<(u8, f64)> = self
            .rootlet_centers
            .keys()
            .map(|&l| (l, self.band_center(l).expect("present")))
            .collect();
        for w in bands.windows(2) {
            if w[1].1 - w[0].1 < self.band_thickness {
                return bad(format!("bands of levels {} and {} overlap", w[0].0, w[1].0));
            }
        }
        let geo = Geometry::new(self)?;
        let (s_lo, s_hi) = (self.top_arc_length, self.top_arc_length + geo.length());
        let half = 0.5 * self.band_thickness;
        for &(l, s) in &bands {
            if s - half < s_lo || s + half > s_hi {
                return bad(format!("band of level {l} leaves the field of view"));
            }
        }
        for (&d, &s) in &self.disc_positions {
            if s < s_lo || s > s_hi {
                return bad(format!("disc {d} leaves the field of view"));
            }
        }
        let grid = self.grid()?;
        let reach = self.max_radius() + DISC_GAP + 1.0;
        let (gx_lo, gx_hi) = grid.axis_range(0);
        let (gy_lo, gy_hi) = grid.axis_range(1);
        if geo.x0 - reach < gx_lo || geo.x0 + reach > gx_hi {
            return bad("cord does not fit the grid in x".into());
        }
        if geo.y_min - reach < gy_lo || geo.y_max + reach > gy_hi {
            return bad("cord does not fit the grid in y".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("phantom spec", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }
}

/// Closest-point geometry of the analytic centerline.
struct Geometry {
    curvature: Curvature,
    x0: f64,
    y0: f64,
    z_top: f64,
    depth: f64,
    s0: f64,
    y_min: f64,
    y_max: f64,
    /// Arc length from the top versus vertical depth, sampled every TABLE_STEP.
    h_lo: f64,
    arc: Vec<f64>,
}

impl Geometry {
    fn new(spec: &PhantomSpec) -> Result<Self> {
        let grid = spec.grid()?;
        let z_top = grid.slice_z(spec.dims[2] - 1);
        let depth = z_top - grid.slice_z(0);
        let c = spec.curvature.clone();
        let (mut g_lo, mut g_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..=400 {
            let g = c.eval(depth * k as f64 / 400.0, depth).0;
            g_lo = g_lo.min(g);
            g_hi = g_hi.max(g);
        }
        let y0 = -0.5 * (g_lo + g_hi);
        let margin = 40.0;
        let h_lo = -margin;
        let n = ((depth + 2.0 * margin) / TABLE_STEP).ceil() as usize;
        let mut arc = Vec::with_capacity(n + 1);
        let speed = |h: f64| (1.0 + c.eval(h, depth).1.powi(2)).sqrt();
        // Simpson on each step, zeroed at h = 0 afterwards
        let mut acc = 0.0;
        arc.push(0.0);
        for i in 0..n {
            let a = h_lo + i as f64 * TABLE_STEP;
            let b = a + TABLE_STEP;
            acc += TABLE_STEP / 6.0 * (speed(a) + 4.0 * speed(0.5 * (a + b)) + speed(b));
            arc.push(acc);
        }
        let mut geo = Geometry {
            curvature: c,
            x0: 0.0,
            y0,
            z_top,
            depth,
            s0: spec.top_arc_length,
            y_min: y0 + g_lo,
            y_max: y0 + g_hi,
            h_lo,
            arc,
        };
        let at_top = geo.arc_from_table(0.0);
        geo.arc.iter_mut().for_each(|v| *v -= at_top);
        Ok(geo)
    }

    fn length(&self) -> f64 {
        self.arc_from_table(self.depth)
    }

    fn arc_from_table(&self, h: f64) -> f64 {
        let f = (h - self.h_lo) / TABLE_STEP;
        let i = (f.floor().max(0.0) as usize).min(self.arc.len() - 2);
        let t = f - i as f64;
        self.arc[i] + t * (self.arc[i + 1] - self.arc[i])
    }

    /// Depth at which the arc length from the top equals `a`.
    fn depth_at_arc(&self, a: f64) -> f64 {
        let i = self.arc.partition_point(|&v| v < a).clamp(1, self.arc.len() - 1);
        let (a0, a1) = (self.arc[i - 1], self.arc[i]);
        let t = if a1 > a0 { (a - a0) / (a1 - a0) } else { 0.0 };
        self.h_lo + (i as f64 - 1.0 + t) * TABLE_STEP
    }

    fn curve(&self, h: f64) -> (Point3<f64>, Vector3<f64>) {
        let (g, gp, _) = self.curvature.eval(h, self.depth);
        // d/dz = -d/dh
        (Point3::new(self.x0, self.y0 + g, self.z_top - h), Vector3::new(0.0, -gp, 1.0))
    }

    /// Arc length `s` and in-plane frame coordinates `(u, v)` of `p`.
    fn local(&self, p: &Point3<f64>) -> (f64, f64, f64) {
        let mut h = self.z_top - p.z;
        for _ in 0..20 {
            let (g, gp, gpp) = self.curvature.eval(h, self.depth);
            let dy = self.y0 + g - p.y;
            let dz = (self.z_top - h) - p.z;
            // f(h) = (c(h) - p)·c'(h) with c'(h) = (0, g', -1)
            let f = dy * gp - dz;
            let fp = gp * gp + dy * gpp + 1.0;
            let step = f / fp;
            h -= step;
            if step.abs() < 1e-10 {
                break;
            }
        }
        let (c, t) = self.curve(h);
        let n = t.norm();
        let n2 = Vector3::new(0.0, 1.0, -t.y) / n;
        let r = p - c;
        (self.s0 + self.arc_from_table(h), r.x, r.dot(&n2))
    }

    /// World point at arc length `s` and frame offsets `(u, v)`.
    fn point(&self, s: f64, u: f64, v: f64) -> Point3<f64> {
        let h = self.depth_at_arc(s - self.s0);
        let (c, t) = self.curve(h);
        let n2 = Vector3::new(0.0, 1.0, -t.y) / t.norm();
        c + Vector3::x() * u + n2 * v
    }
}

/// Ground-truth position of one band or disc.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruthRow {
    pub level: u8,
    pub arc_length_mm: f64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

#[derive(Clone, Debug)]
pub struct PhantomSet {
    pub spec: PhantomSpec,
    pub t2: Image,
    pub cord: LabelMap,
    pub rootlets: LabelMap,
    pub discs: LabelMap,
    pub rootlet_truth: Vec<TruthRow>,
    pub disc_truth: Vec<TruthRow>,
}

pub const FILES: [&str; 7] = [
    "t2.nii.gz",
    "cord.nii.gz",
    "rootlets.nii.gz",
    "discs.nii.gz",
    "rootlets_truth.csv",
    "discs_truth.csv",
    "metadata.json",
];

impl PhantomSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_volume(&self.t2, &dir.join(FILES[0]))?;
        save_volume(&self.cord, &dir.join(FILES[1]))?;
        save_volume(&self.rootlets, &dir.join(FILES[2]))?;
        save_volume(&self.discs, &dir.join(FILES[3]))?;
        write_csv(&dir.join(FILES[4]), &self.rootlet_truth)?;
        write_csv(&dir.join(FILES[5]), &self.disc_truth)?;
        #[derive(Serialize)]
        struct Meta<'a> {
            seed: u64,
            spec: &'a PhantomSpec,
        }
        let meta = serde_json::to_vec_pretty(&Meta {
            seed: self.spec.seed,
            spec: &self.spec,
        })
        .map_err(|e| Error::json("phantom metadata", e))?;
        write_atomic(&dir.join(FILES[6]), &meta)
    }
}

/// Rasterise a phantom.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomSet> {
    spec.validate()?;
    let grid = spec.grid()?;
    let geo = Geometry::new(spec)?;
    let [nx, ny, nz] = spec.dims;
    let bands: Vec<(u8, f64)> = spec
        .rootlet_centers
        .keys()
        .map(|&l| (l, spec.band_center(l).expect("present")))
        .collect();
    let half = 0.5 * spec.band_thickness;
    let reach = spec.max_radius() + BLOB_RADIUS + 1.0;
    let mut cord = LabelMap::zeros(grid.clone());
    let mut rootlets = LabelMap::zeros(grid.clone());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.center_of(i, j, k);
                let (cy, _) = geo.curve(geo.z_top - p.z);
                if (p.x - cy.x).hypot(p.y - cy.y) > 3.0 * reach {
                    continue;
                }
                let (s, u, v) = geo.local(&p);
                let r = spec.radius_at(s);
                if u.hypot(v) <= r + TIE_MM {
                    cord.set(i, j, k, 1);
                }
                // blob centres on the dorsal-lateral surface at the band centre
                if let Some(&(l, c)) = bands.iter().find(|&&(_, c)| (s - c).abs() <= half + TIE_MM) {
                    let rc = spec.radius_at(c);
                    let (a, b) = (0.6 * rc, 0.8 * rc);
                    if (u.abs() - a).hypot(v + b) <= BLOB_RADIUS + TIE_MM {
                        rootlets.set(i, j, k, l);
                    }
                }
            }
        }
    }

    let mut discs = LabelMap::zeros(grid.clone());
    let mut disc_truth = Vec::new();
    for (&d, &s) in &spec.disc_positions {
        let p = geo.point(s, 0.0, spec.radius_at(s) + DISC_GAP);
        let v = grid.world_to_voxel(&p);
        let idx = v.map(|c| c.round().max(0.0) as usize);
        let idx = [idx[0].min(nx - 1), idx[1].min(ny - 1), idx[2].min(nz - 1)];
        if discs.get(idx[0], idx[1], idx[2]) != 0 {
            return Err(Error::InvalidSpec(format!("disc {d} collides with another disc")));
        }
        discs.set(idx[0], idx[1], idx[2], d);
        let c = grid.center_of(idx[0], idx[1], idx[2]);
        disc_truth.push(TruthRow {
            level: d,
            arc_length_mm: s,
            x_mm: c.x,
            y_mm: c.y,
            z_mm: c.z,
        });
    }
    let rootlet_truth = bands
        .iter()
        .map(|&(l, s)| {
            let p = geo.point(s, 0.0, -0.8 * spec.radius_at(s));
            TruthRow {
                level: l,
                arc_length_mm: s,
                x_mm: p.x,
                y_mm: p.y,
                z_mm: p.z,
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut t2 = Image::zeros(grid);
    for idx in 0..t2.data().len() {
        let base = if rootlets.data()[idx] != 0 {
            BAND
        } else if cord.data()[idx] != 0 {
            CORD
        } else {
            BACKGROUND
        };
        let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
        t2.data_mut()[idx] = base + n;
    }
    Ok(PhantomSet {
        spec: spec.clone(),
        t2,
        cord,
        rootlets,
        discs,
        rootlet_truth,
        disc_truth,
    })
}

/// Straight template phantom resampled to 0.5 mm isotropic voxels.
pub fn make_template(base: &PhantomSpec) -> Result<PhantomSet> {
    if base.curvature != Curvature::Straight {
        return Err(Error::InvalidSpec("the template must have a straight centerline".into()));
    }
    let mut spec = base.clone();
    for a in 0..3 {
        let extent = (base.dims[a] - 1) as f64 * base.spacing[a];
        spec.dims[a] = (extent / TEMPLATE_SPACING).round() as usize + 1;
    }
    spec.spacing = [TEMPLATE_SPACING; 3];
    generate_phantom(&spec)
}

/// Per-subject variation drawn by [`make_cohort`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortModel {
    /// Half-width of the uniform offset range per level (mm).
    pub offset_ranges: BTreeMap<u8, f64>,
    /// Curvatures assigned to subjects in turn; empty keeps the base curvature.
    #[serde(default)]
    pub curvatures: Vec<Curvature>,
    /// Half-width of the uniform top arc-length shift (mm).
    #[serde(default)]
    pub top_shift: f64,
    /// Relative half-width of the uniform cord radius scaling.
    #[serde(default)]
    pub radius_jitter: f64,
}

impl CohortModel {
    /// Offsets widening linearly from ±1 mm at C2 to ±6 mm at C8.
    pub fn caudal_widening() -> Self {
        CohortModel {
            offset_ranges: (2..=8u8).map(|l| (l, 1.0 + (l - 2) as f64 * 5.0 / 6.0)).collect(),
            curvatures: Vec::new(),
            top_shift: 0.0,
            radius_jitter: 0.0,
        }
    }

    pub fn zero() -> Self {
        CohortModel {
            offset_ranges: BTreeMap::new(),
            curvatures: Vec::new(),
            top_shift: 0.0,
            radius_jitter: 0.0,
        }
    }
}

const MAX_DRAWS: usize = 10_000;

/// `n` subject specs with random vertebral–spinal offsets; discs stay fixed.
pub fn make_cohort(base: &PhantomSpec, n: usize, model: &CohortModel, seed: u64) -> Result<Vec<PhantomSpec>> {
    if n == 0 {
        return Err(Error::InvalidParameter("cohort size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut spec = base.clone();
        let mut accepted = false;
        for _ in 0..MAX_DRAWS {
            let mut offsets = base.offsets.clone();
            for (&l, &w) in &model.offset_ranges {
                let d = if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
                *offsets.entry(l).or_insert(0.0) += d;
            }
            spec.offsets = offsets;
            if spec.validate().is_ok() || model.offset_ranges.values().all(|&w| w == 0.0) {
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::InvalidSpec("could not draw non-overlapping band offsets".into()));
        }
        if !model.curvatures.is_empty() {
            spec.curvature = model.curvatures[i % model.curvatures.len()].clone();
        }
        if model.top_shift > 0.0 {
            spec.top_arc_length = base.top_arc_length + rng.random_range(-model.top_shift..=model.top_shift);
        }
        if model.radius_jitter > 0.0 {
            spec.cord.radius = base.cord.radius * (1.0 + rng.random_range(-model.radius_jitter..=model.radius_jitter));
        }
        spec.seed = rng.random();
        spec.validate()?;
        out.push(spec);
    }
    Ok(out)
}

/// Neck posture of a phantom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeckPosition {
    Flexion,
    Neutral,
    Extension,
}

impl NeckPosition {
    pub const ALL: [NeckPosition; 3] = [NeckPosition::Flexion, NeckPosition::Neutral, NeckPosition::Extension];

    fn sign(self) -> f64 {
        match self {
            NeckPosition::Flexion => 1.0,
            NeckPosition::Neutral => 0.0,
            NeckPosition::Extension => -1.0,
        }
    }
}

/// Same anatomy in another posture: the curvature changes and the discs
/// slide along the cord by `disc_slide·(level - 2)` mm, while the rootlet
/// bands keep their arc-length positions.
pub fn neck_variant(base: &PhantomSpec, pos: NeckPosition, arc_radius: f64, disc_slide: f64) -> Result<PhantomSpec> {
    let mut spec = base.clone();
    let sign = pos.sign();
    spec.curvature = if sign == 0.0 {
        base.curvature.clone()
    } else {
        Curvature::Arc {
            radius: sign * arc_radius,
            apex: None,
        }
    };
    for (&d, s) in spec.disc_positions.iter_mut() {
        *s += sign * disc_slide * (d as f64 - 2.0);
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centerline::extract_centerline;
    use crate::landmarks::{disc_landmarks, level_centers_of_mass};

    fn quiet(mut s: PhantomSpec) -> PhantomSpec {
        s.noise_sigma = 0.0;
        s
    }

    #[test]
    fn straight_bands_recovered_from_labels() {
        let spec = quiet(PhantomSpec::subject_default());
        let spec = PhantomSpec {
            curvature: Curvature::Straight,
            ..spec
        };
        let set = generate_phantom(&spec).unwrap();
        let lm = level_centers_of_mass(&set.rootlets).unwrap();
        let half_voxel = 0.5 * spec.spacing[2];
        for t in &set.rootlet_truth {
            let p = lm.get(t.level).unwrap();
            assert!((p.z - t.z_mm).abs() <= half_voxel, "level {}: {} vs {}", t.level, p.z, t.z_mm);
            assert!((p.x - t.x_mm).abs() <= 0.5 * spec.spacing[0]);
            assert!((p.y - t.y_mm).abs() <= 0.5 * spec.spacing[1]);
        }
        let discs = disc_landmarks(&set.discs).unwrap();
        assert_eq!(discs.len(), spec.disc_positions.len());
        for t in &set.disc_truth {
            assert_eq!(discs.get(t.level).unwrap().z, t.z_mm);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::subject_default();
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.t2.data(), b.t2.data());
        assert_eq!(a.rootlets, b.rootlets);
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(generate_phantom(&other).unwrap().t2.data(), a.t2.data());
    }

    #[test]
    fn arc_centerline_follows_analytic_curve() {
        let spec = quiet(PhantomSpec {
            curvature: Curvature::Arc {
                radius: 120.0,
                apex: None,
            },
            ..PhantomSpec::subject_default()
        });
        let set = generate_phantom(&spec).unwrap();
        let cl = extract_centerline(&set.cord).unwrap();
        let geo = Geometry::new(&spec).unwrap();
        let mut sq = 0.0;
        let n = 200;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let p = cl.point(t);
            let (c, _) = geo.curve(geo.z_top - p.z);
            sq += (p.x - c.x).powi(2) + (p.y - c.y).powi(2);
        }
        let rms = (sq / (n + 1) as f64).sqrt();
        assert!(rms < 0.5, "rms {rms}");
    }

    #[test]
    fn arc_length_table_matches_closed_form() {
        let spec = PhantomSpec {
            curvature: Curvature::Arc {
                radius: 150.0,
                apex: Some(0.0),
            },
            ..PhantomSpec::subject_default()
        };
        let geo = Geometry::new(&spec).unwrap();
        // arc of a circle from the apex: R·asin(h/R)
        for h in [10.0, 50.0, 100.0, 140.0] {
            let exact = 150.0 * (h / 150.0f64).asin();
            assert!((geo.arc_from_table(h) - exact).abs() < 1e-6, "h={h}");
            assert!((geo.depth_at_arc(exact) - h).abs() < 1e-6);
        }
    }

    #[test]
    fn local_coordinates_invert_point() {
        let spec = PhantomSpec {
            curvature: Curvature::Sinusoid {
                amplitude: 4.0,
                wavelength: 120.0,
                phase: 0.3,
            },
            ..PhantomSpec::subject_default()
        };
        let geo = Geometry::new(&spec).unwrap();
        for &(s, u, v) in &[(20.0, 1.0, -2.0), (75.0, -2.5, 3.0), (130.0, 0.0, 0.5)] {
            let p = geo.point(s, u, v);
            let (s2, u2, v2) = geo.local(&p);
            assert!((s - s2).abs() < 1e-4 && (u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-4);
        }
    }

    #[test]
    fn template_is_straight_at_half_millimetre() {
        let set = make_template(&PhantomSpec::template_default()).unwrap();
        assert_eq!(set.t2.grid().spacing(), [0.5; 3]);
        let cl = extract_centerline(&set.cord).unwrap();
        for i in 0..=20 {
            let p = cl.point(i as f64 / 20.0);
            assert!(p.x.abs() < 1e-3 && p.y.abs() < 1e-3);
        }
        let lm = level_centers_of_mass(&set.rootlets).unwrap();
        let z_top = set.t2.grid().slice_z(299);
        for (l, s) in default_rootlet_centers() {
            let dz = lm.get(l).unwrap().z - (z_top - s);
            assert!(dz.abs() <= 0.25, "level {l}: {dz}");
        }
        assert!(make_template(&PhantomSpec::subject_default()).is_err());
    }

    #[test]
    fn cohort_offsets_widen_caudally() {
        let base = PhantomSpec::subject_default();
        let one = make_cohort(&base, 1, &CohortModel::zero(), 3).unwrap();
        assert_eq!(one[0].offsets, base.offsets);
        assert_eq!(one[0].rootlet_centers, base.rootlet_centers);
        let a = make_cohort(&base, 20, &CohortModel::caudal_widening(), 9).unwrap();
        let b = make_cohort(&base, 20, &CohortModel::caudal_widening(), 9).unwrap();
        assert_eq!(a, b);
        let std = |l: u8| {
            let v: Vec<f64> = a.iter().map(|s| s.offsets[&l]).collect();
            crate::metrics::mean_std(&v).unwrap().1
        };
        assert!(std(8) > std(2));
        for s in &a {
            assert!(s.offsets[&2].abs() <= 1.0 && s.offsets[&8].abs() <= 6.0);
            assert_eq!(s.disc_positions, base.disc_positions);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = PhantomSpec::subject_default();
        s.offsets.insert(3, 15.0);
        assert!(matches!(generate_phantom(&s), Err(Error::InvalidSpec(_))));
        let mut s = PhantomSpec::subject_default();
        s.dims[1] = 20;
        s.curvature = Curvature::Arc {
            radius: 100.0,
            apex: None,
        };
        assert!(s.validate().is_err());
        let mut s = PhantomSpec::subject_default();
        s.rootlet_centers.insert(9, 140.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn neck_variants_keep_bands_and_slide_discs() {
        let base = PhantomSpec::subject_default();
        let f = neck_variant(&base, NeckPosition::Flexion, 150.0, 0.5).unwrap();
        let e = neck_variant(&base, NeckPosition::Extension, 150.0, 0.5).unwrap();
        assert_eq!(f.rootlet_centers, e.rootlet_centers);
        assert_eq!(f.disc_positions[&9] - base.disc_positions[&9], 3.5);
        assert_eq!(e.disc_positions[&2], base.disc_positions[&2]);
        assert_ne!(f.curvature, e.curvature);
    }

    #[test]
    fn spec_json_round_trip() {
        let s = PhantomSpec::subject_default();
        assert_eq!(PhantomSpec::from_json(&s.to_json()).unwrap(), s);
        let bad = PhantomSpec::from_json("{\"dims\": [1]}");
        assert!(matches!(bad, Err(Error::Json { .. })));
    }
}
