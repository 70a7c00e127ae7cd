//! Cord centerline extraction and the curved ↔ straight resampling transform.
//!
//! The centerline is a least-squares clamped cubic B-spline through the
//! per-slice centroids of the cord mask, parameterised from the inferior to
//! the superior end. Straight space places arc length `s` on the line
//! `x = x0, y = y0, z = z_base + s`; in-plane offsets are measured in a
//! rotation-minimising frame carried along the curve.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bspline;
use crate::error::{Error, Result};
use crate::volume::{Grid, Image, LabelMap};
use crate::warpfield::{resample, Interp};

/// Minimum number of nonempty axial slices.
pub const MIN_SLICES: usize = 10;
/// Target RMS distance between the fitted curve and the slice centroids.
pub const MAX_FIT_RMS_MM: f64 = 1.0;
/// Arc-length sampling of the straightening frames.
pub const FRAME_STEP_MM: f64 = 0.25;

/// Smooth cord centerline in world mm.
#[derive(Clone, Debug)]
pub struct Centerline {
    knots: Vec<f64>,
    ctrl: Vec<Vector3<f64>>,
    t_table: Vec<f64>,
    s_table: Vec<f64>,
    z_range: (f64, f64),
    rms: f64,
    centroids: Vec<Point3<f64>>,
}

impl Centerline {
    pub fn n_ctrl(&self) -> usize {
        self.ctrl.len()
    }

    /// Curve point at parameter `t` in [0, 1] (0 = inferior end).
    pub fn point(&self, t: f64) -> Point3<f64> {
        let (f, b, _) = bspline::basis_with_derivs(self.ctrl.len(), &self.knots, t);
        let v: Vector3<f64> = (0..4).map(|r| self.ctrl[f + r] * b[r]).sum();
        Point3::from(v)
    }

    /// dC/dt.
    pub fn derivative(&self, t: f64) -> Vector3<f64> {
        let (f, _, d) = bspline::basis_with_derivs(self.ctrl.len(), &self.knots, t);
        (0..4).map(|r| self.ctrl[f + r] * d[r]).sum()
    }

    pub fn length(&self) -> f64 {
        *self.s_table.last().unwrap()
    }

    /// Parameter at arc length `s` from the inferior end.
    pub fn t_at(&self, s: f64) -> f64 {
        interp_table(&self.s_table, &self.t_table, s)
    }

    pub fn point_at(&self, s: f64) -> Point3<f64> {
        self.point(self.t_at(s))
    }

    pub fn z_range(&self) -> (f64, f64) {
        self.z_range
    }

    /// RMS in-plane distance between the curve and the slice centroids.
    pub fn rms(&self) -> f64 {
        self.rms
    }

    /// Per-slice mask centroids the curve was fitted to, inferior first.
    pub fn centroids(&self) -> &[Point3<f64>] {
        &self.centroids
    }
}

/// Linear interpolation in a monotone table, clamped at the ends.
fn interp_table(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|&v| v <= x).max(1) - 1;
    let f = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + f * (ys[i + 1] - ys[i])
}

/// In-plane centroid of every nonempty axial slice, inferior first.
pub fn slice_centroids(mask: &LabelMap) -> Vec<Point3<f64>> {
    let grid = mask.grid();
    let [nx, ny, nz] = grid.dims();
    let mut out = Vec::new();
    for k in 0..nz {
        let (mut si, mut sj, mut n) = (0.0, 0.0, 0usize);
        let slice = mask.slice(k);
        for j in 0..ny {
            for i in 0..nx {
                if slice[i + nx * j] != 0 {
                    si += i as f64;
                    sj += j as f64;
                    n += 1;
                }
            }
        }
        if n > 0 {
            out.push(grid.voxel_to_world([si / n as f64, sj / n as f64, k as f64]));
        }
    }
    out
}

/// Fit a smooth centerline to a binary cord mask on a canonical grid.
pub fn extract_centerline(mask: &LabelMap) -> Result<Centerline> {
    if !mask.grid().is_canonical() {
        return Err(Error::InvalidVolume("cord mask grid is not canonical".into()));
    }
    let centroids = slice_centroids(mask);
    fit_centerline(centroids)
}

/// Fit a centerline to centroids ordered by increasing z.
pub fn fit_centerline(centroids: Vec<Point3<f64>>) -> Result<Centerline> {
    let m = centroids.len();
    if m < MIN_SLICES {
        return Err(Error::CordTooShort {
            slices: m,
            required: MIN_SLICES,
        });
    }
    let z_lo = centroids[0].z;
    let z_hi = centroids[m - 1].z;
    let ts: Vec<f64> = centroids.iter().map(|c| (c.z - z_lo) / (z_hi - z_lo)).collect();
    let values: Vec<Vec<f64>> = centroids.iter().map(|c| vec![c.x, c.y, c.z]).collect();

    let n_max = (m / 3).max(bspline::DEGREE + 1);
    let n0 = ((10.0 * (z_hi - z_lo) / 150.0).round() as usize).max(bspline::DEGREE + 1).min(n_max);
    let mut n = n0;
    let mut fitted = loop {
        let ctrl = bspline::fit_clamped(&ts, &values, n)?;
        let cl = assemble(ctrl, &centroids, &ts, (z_lo, z_hi));
        if cl.rms <= MAX_FIT_RMS_MM || n >= n_max {
            break cl;
        }
        n += 1;
    };
    validate_monotone(&fitted)?;
    fitted.centroids = centroids;
    build_arc_table(&mut fitted);
    Ok(fitted)
}

fn assemble(ctrl: Vec<Vec<f64>>, centroids: &[Point3<f64>], ts: &[f64], z_range: (f64, f64)) -> Centerline {
    let n = ctrl.len();
    let mut cl = Centerline {
        knots: bspline::clamped_knots(n),
        ctrl: ctrl.into_iter().map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
        t_table: Vec::new(),
        s_table: Vec::new(),
        z_range,
        rms: 0.0,
        centroids: Vec::new(),
    };
    let ss: f64 = centroids
        .iter()
        .zip(ts)
        .map(|(c, &t)| {
            let p = cl.point(t);
            (p.x - c.x).powi(2) + (p.y - c.y).powi(2)
        })
        .sum();
    cl.rms = (ss / centroids.len() as f64).sqrt();
    cl
}

fn validate_monotone(cl: &Centerline) -> Result<()> {
    let samples = 20 * cl.ctrl.len().max(50);
    for i in 0..=samples {
        let t = i as f64 / samples as f64;
        if !(cl.derivative(t).z > 0.0) {
            return Err(Error::CenterlineNotMonotone { t });
        }
    }
    Ok(())
}

fn build_arc_table(cl: &mut Centerline) {
    let (z_lo, z_hi) = cl.z_range;
    let n = (((z_hi - z_lo) / 0.02).ceil() as usize).max(200);
    let mut t_table = Vec::with_capacity(n + 1);
    let mut s_table = Vec::with_capacity(n + 1);
    let mut prev = cl.point(0.0);
    let mut s = 0.0;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let p = cl.point(t);
        s += (p - prev).norm();
        prev = p;
        t_table.push(t);
        s_table.push(s);
    }
    cl.t_table = t_table;
    cl.s_table = s_table;
}

/// Where the straightened cord is placed.
#[derive(Clone, Debug)]
pub struct StraightTarget {
    /// Output grid of straightened volumes (the template grid).
    pub grid: Grid,
    /// In-plane (x, y) of the straight axis.
    pub axis: [f64; 2],
    /// World z the superior end of the cord is mapped to.
    pub z_top: f64,
}

/// Invertible curved ↔ straight transform built from a centerline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StraightenTransform {
    ds: f64,
    length: f64,
    positions: Vec<[f64; 3]>,
    tangents: Vec<[f64; 3]>,
    normals: Vec<[f64; 3]>,
    axis: [f64; 2],
    z_base: f64,
    curved_grid: Grid,
    straight_grid: Grid,
}

/// Position and orthonormal frame at one arc length.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub position: Point3<f64>,
    pub tangent: Vector3<f64>,
    pub n1: Vector3<f64>,
    pub n2: Vector3<f64>,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Build the straightening transform for a subject on `curved_grid`.
pub fn build_straightening(
    cl: &Centerline,
    curved_grid: &Grid,
    target: &StraightTarget,
) -> Result<StraightenTransform> {
    let length = cl.length();
    let m = ((length / FRAME_STEP_MM).ceil() as usize).max(1);
    let ds = length / m as f64;
    let mut positions = Vec::with_capacity(m + 1);
    let mut tangents = Vec::with_capacity(m + 1);
    for i in 0..=m {
        let t = cl.t_at(i as f64 * ds);
        positions.push(cl.point(t).coords);
        let d = cl.derivative(t);
        let norm = d.norm();
        if !(norm > 0.0) {
            return Err(Error::FrameDegenerate { s: i as f64 * ds });
        }
        tangents.push(d / norm);
    }
    // initial normal: x̂ projected onto the plane normal to the tangent
    let t0 = tangents[0];
    let x = Vector3::x();
    let r0 = x - t0 * t0.dot(&x);
    if r0.norm() < 1e-3 {
        return Err(Error::FrameDegenerate { s: 0.0 });
    }
    let mut normals = vec![r0.normalize()];
    // double reflection
    for i in 0..m {
        let r = normals[i];
        let v1 = positions[i + 1] - positions[i];
        let c1 = v1.dot(&v1);
        let (rl, tl) = if c1 > 0.0 {
            (
                r - v1 * (2.0 / c1 * v1.dot(&r)),
                tangents[i] - v1 * (2.0 / c1 * v1.dot(&tangents[i])),
            )
        } else {
            (r, tangents[i])
        };
        let v2 = tangents[i + 1] - tl;
        let c2 = v2.dot(&v2);
        let mut next = if c2 > 1e-300 { rl - v2 * (2.0 / c2 * v2.dot(&rl)) } else { rl };
        let tn = tangents[i + 1];
        next -= tn * tn.dot(&next);
        let norm = next.norm();
        if !(norm > 1e-6) {
            return Err(Error::FrameDegenerate { s: (i + 1) as f64 * ds });
        }
        normals.push(next / norm);
    }
    Ok(StraightenTransform {
        ds,
        length,
        positions: positions.iter().map(arr).collect(),
        tangents: tangents.iter().map(arr).collect(),
        normals: normals.iter().map(arr).collect(),
        axis: target.axis,
        z_base: target.z_top - length,
        curved_grid: curved_grid.clone(),
        straight_grid: target.grid.clone(),
    })
}

impl StraightenTransform {
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn z_base(&self) -> f64 {
        self.z_base
    }

    pub fn axis(&self) -> [f64; 2] {
        self.axis
    }

    pub fn curved_grid(&self) -> &Grid {
        &self.curved_grid
    }

    pub fn straight_grid(&self) -> &Grid {
        &self.straight_grid
    }

    /// Frame at arc length `s`; beyond the ends the curve continues straight.
    pub fn frame(&self, s: f64) -> Frame {
        let m = self.positions.len() - 1;
        if s <= 0.0 || s >= self.length {
            let i = if s <= 0.0 { 0 } else { m };
            let end_s = if s <= 0.0 { 0.0 } else { self.length };
            let t = v3(self.tangents[i]);
            let n1 = v3(self.normals[i]);
            return Frame {
                position: Point3::from(v3(self.positions[i]) + t * (s - end_s)),
                tangent: t,
                n1,
                n2: t.cross(&n1),
            };
        }
        let x = s / self.ds;
        let i = (x.floor() as usize).min(m - 1);
        let f = x - i as f64;
        let lerp = |a: &[[f64; 3]]| v3(a[i]) * (1.0 - f) + v3(a[i + 1]) * f;
        let t = lerp(&self.tangents).normalize();
        let n = lerp(&self.normals);
        let n1 = (n - t * t.dot(&n)).normalize();
        Frame {
            position: Point3::from(lerp(&self.positions)),
            tangent: t,
            n1,
            n2: t.cross(&n1),
        }
    }

    /// Straight-space point → curved (native) point.
    pub fn to_curved(&self, q: &Point3<f64>) -> Point3<f64> {
        let s = q.z - self.z_base;
        let u = q.x - self.axis[0];
        let v = q.y - self.axis[1];
        let fr = self.frame(s);
        fr.position + fr.n1 * u + fr.n2 * v
    }

    /// Curved (native) point → straight-space point.
    pub fn to_straight(&self, p: &Point3<f64>) -> Point3<f64> {
        let s = self.project(p);
        let fr = self.frame(s);
        let d = p - fr.position;
        Point3::new(
            self.axis[0] + d.dot(&fr.n1),
            self.axis[1] + d.dot(&fr.n2),
            self.z_base + s,
        )
    }

    /// Arc length whose normal plane contains `p`.
    fn project(&self, p: &Point3<f64>) -> f64 {
        let g = |s: f64| {
            let fr = self.frame(s);
            (p - fr.position).dot(&fr.tangent)
        };
        let s0 = self.guess_from_z(p.z);
        let mut step = 1.0;
        let (mut a, mut b) = (s0 - step, s0 + step);
        let mut ga = g(a);
        while ga < 0.0 {
            step *= 2.0;
            b = a;
            a -= step;
            ga = g(a);
        }
        let mut gb = g(b);
        while gb > 0.0 {
            step *= 2.0;
            a = b;
            b += step;
            gb = g(b);
        }
        for _ in 0..60 {
            let mid = 0.5 * (a + b);
            if g(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
            if b - a < 1e-9 {
                break;
            }
        }
        0.5 * (a + b)
    }

    fn guess_from_z(&self, z: f64) -> f64 {
        let m = self.positions.len() - 1;
        let z0 = self.positions[0][2];
        let zm = self.positions[m][2];
        if z <= z0 {
            return (z - z0) / self.tangents[0][2].max(1e-3);
        }
        if z >= zm {
            return self.length + (z - zm) / self.tangents[m][2].max(1e-3);
        }
        let i = self.positions.partition_point(|p| p[2] <= z).clamp(1, m) - 1;
        let f = (z - self.positions[i][2]) / (self.positions[i + 1][2] - self.positions[i][2]);
        (i as f64 + f) * self.ds
    }
}

/// Resample a native volume into straight space (template grid).
pub fn straighten_volume(v: &Image, t: &StraightenTransform, is_label: bool) -> Image {
    let interp = if is_label { Interp::Nearest } else { Interp::Linear };
    resample(v, t.straight_grid(), interp, |q| t.to_curved(q))
}
