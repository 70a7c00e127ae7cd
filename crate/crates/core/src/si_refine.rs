//! Masked superior–inferior refinement on straightened images.
//!
//! A cubic B-spline free-form deformation whose displacement is purely along
//! z is fitted by maximising normalised cross-correlation over the dilated
//! fixed rootlet mask; the moving mask only bounds the z-support of the
//! lattice. Coefficient differences along z are bounded so every column of the
//! total map keeps slope ≥ `min_slope`; an edge envelope then forces the
//! field to zero at the ends of the support while preserving monotonicity.

use std::str::FromStr;

use log::debug;

use crate::bspline::uniform_weights;
use crate::error::{Error, Result};
use crate::volume::{Grid, Image, LabelMap};
use crate::warpfield::{DeformationField, FieldKind};

/// Maximum rise of the envelope near the support ends (mm per mm).
const EDGE_RISE: f64 = 4.0;
/// Accepted steps with falling NCC that count as divergence.
const DIVERGENCE_STEPS: usize = 3;

/// Tunables of the SI registration, settable as `key=value` strings.
#[derive(Clone, Debug, PartialEq)]
pub struct SIRegParams {
    /// B-spline control point spacing (mm).
    pub control_spacing: f64,
    /// Pyramid levels; level `l` of `n` downsamples z by `2^(n-1-l)`.
    pub levels: usize,
    /// Objective evaluations per pyramid level.
    pub max_iterations: usize,
    /// Mask dilation radius (voxels).
    pub dilation: usize,
    /// Weight of the coefficient-compression penalty.
    pub monotonicity_weight: f64,
    /// Initial largest coefficient update (mm) at the coarsest level.
    pub step: f64,
    /// Optimisation stops once the step is halved below this (mm).
    pub min_step: f64,
    /// Minimum slope of the total z-map.
    pub min_slope: f64,
    /// Fraction of the distance to a support end the field may not consume.
    pub edge_margin: f64,
}

impl Default for SIRegParams {
    fn default() -> Self {
        SIRegParams {
            control_spacing: 15.0,
            levels: 3,
            max_iterations: 100,
            dilation: 3,
            monotonicity_weight: 1.0,
            step: 1.0,
            min_step: 0.01,
            min_slope: 0.2,
            edge_margin: 0.15,
        }
    }
}

impl SIRegParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.control_spacing > 0.0) {
            return bad("control_spacing must be > 0");
        }
        if self.levels < 1 {
            return bad("levels must be >= 1");
        }
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1");
        }
        if !(self.monotonicity_weight >= 0.0) {
            return bad("monotonicity_weight must be >= 0");
        }
        if !(self.step > 0.0 && self.min_step > 0.0) {
            return bad("step and min_step must be > 0");
        }
        if !(self.min_slope > 0.0 && self.min_slope < 1.0) {
            return bad("min_slope must be in (0, 1)");
        }
        if !(self.edge_margin > 0.0 && self.edge_margin < 1.0) {
            return bad("edge_margin must be in (0, 1)");
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("cannot parse `{value}` for `{key}`")))
        }
        match key.trim() {
            "control_spacing" => self.control_spacing = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "max_iterations" => self.max_iterations = parse(key, value)?,
            "dilation" => self.dilation = parse(key, value)?,
            "monotonicity_weight" => self.monotonicity_weight = parse(key, value)?,
            "step" => self.step = parse(key, value)?,
            "min_step" => self.min_step = parse(key, value)?,
            "min_slope" => self.min_slope = parse(key, value)?,
            "edge_margin" => self.edge_margin = parse(key, value)?,
            other => return Err(Error::InvalidParameter(format!("unknown SI parameter `{other}`"))),
        }
        Ok(())
    }

    /// Defaults with `key=value` overrides applied in order.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[S]) -> Result<Self> {
        let mut p = SIRegParams::default();
        for pair in pairs {
            let pair = pair.as_ref();
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("expected key=value, got `{pair}`")))?;
            p.set(k, v)?;
        }
        p.validate()?;
        Ok(p)
    }
}

/// Morphological dilation by a discrete Euclidean ball of `radius` voxels.
pub fn dilate_mask(m: &LabelMap, radius: usize) -> LabelMap {
    let mut out = m.binarize();
    if radius == 0 {
        return out;
    }
    let r = radius as isize;
    let mut ball = Vec::new();
    for dk in -r..=r {
        for dj in -r..=r {
            for di in -r..=r {
                if di * di + dj * dj + dk * dk <= r * r {
                    ball.push((di, dj, dk));
                }
            }
        }
    }
    let [nx, ny, nz] = m.dims();
    let src = m.data();
    let grid = m.grid().clone();
    let is_set = |i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < nx
            && (j as usize) < ny
            && (k as usize) < nz
            && src[grid.index(i as usize, j as usize, k as usize)] != 0
    };
    let data = out.data_mut();
    for k in 0..nz as isize {
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                if !is_set(i, j, k) {
                    continue;
                }
                // interior voxels add nothing beyond what their boundary neighbours stamp
                let interior = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .all(|&(a, b, c)| is_set(i + a, j + b, k + c));
                if interior {
                    continue;
                }
                for &(di, dj, dk) in &ball {
                    let (a, b, c) = (i + di, j + dj, k + dk);
                    if a >= 0 && b >= 0 && c >= 0 && (a as usize) < nx && (b as usize) < ny && (c as usize) < nz {
                        data[grid.index(a as usize, b as usize, c as usize)] = 1;
                    }
                }
            }
        }
    }
    out
}

/// Fixed (template) and moving (subject) images with their rootlet masks.
#[derive(Clone, Debug)]
pub struct MaskedPair {
    pub fixed: Image,
    pub fixed_mask: LabelMap,
    pub moving: Image,
    pub moving_mask: LabelMap,
}

impl MaskedPair {
    pub fn new(fixed: Image, fixed_mask: LabelMap, moving: Image, moving_mask: LabelMap) -> Result<Self> {
        let g = fixed.grid();
        for (name, other) in [
            ("fixed mask", fixed_mask.grid()),
            ("moving image", moving.grid()),
            ("moving mask", moving_mask.grid()),
        ] {
            if !g.same_space(other) {
                return Err(Error::SpaceMismatch(format!("{name} is not on the fixed image grid")));
            }
        }
        if !g.is_canonical() {
            return Err(Error::InvalidVolume("SI registration needs a canonical grid".into()));
        }
        Ok(MaskedPair {
            fixed,
            fixed_mask,
            moving,
            moving_mask,
        })
    }
}

/// Outcome of [`register_si`].
#[derive(Clone, Debug)]
pub struct SIRegistration {
    pub field: DeformationField,
    pub ncc_identity: f64,
    pub ncc_final: f64,
    pub iterations: Vec<usize>,
    /// True when optimisation could not beat the identity and the identity was returned.
    pub fell_back: bool,
}

/// Control lattice geometry shared by all pyramid levels.
#[derive(Clone, Debug)]
struct Lattice {
    origin: [f64; 3],
    h: f64,
    n: [usize; 3],
    z_support: (f64, f64),
    edge_margin: f64,
}

impl Lattice {
    fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    fn index(&self, a: usize, b: usize, c: usize) -> usize {
        a + self.n[0] * (b + self.n[1] * c)
    }

    fn axis_weights(&self, axis: usize, x: f64) -> (usize, [f64; 4]) {
        let u = (x - self.origin[axis]) / self.h;
        let i0 = (u.floor().max(0.0) as usize).min(self.n[axis] - 4);
        (i0, uniform_weights(u - i0 as f64))
    }

    /// Allowed displacement interval at height `z`.
    fn envelope(&self, z: f64) -> (f64, f64) {
        let (zb, zt) = self.z_support;
        let keep = 1.0 - self.edge_margin;
        let hi = (keep * (zt - z)).min(EDGE_RISE * (z - zb));
        let lo = (-keep * (z - zb)).max(-EDGE_RISE * (zt - z));
        (lo.min(0.0), hi.max(0.0))
    }
}

/// Precomputed lattice weights of one voxel.
#[derive(Clone, Debug)]
struct Sample {
    col: usize,
    z: f64,
    fixed: f64,
    base: [usize; 3],
    w: [[f64; 4]; 3],
    bounds: (f64, f64),
}

impl Sample {
    fn new(lat: &Lattice, col: usize, p: [f64; 3], fixed: f64) -> Self {
        let (a, wx) = lat.axis_weights(0, p[0]);
        let (b, wy) = lat.axis_weights(1, p[1]);
        let (c, wz) = lat.axis_weights(2, p[2]);
        Sample {
            col,
            z: p[2],
            fixed,
            base: [a, b, c],
            w: [wx, wy, wz],
            bounds: lat.envelope(p[2]),
        }
    }

    /// Raw spline displacement.
    fn raw(&self, lat: &Lattice, coef: &[f64]) -> f64 {
        let mut d = 0.0;
        for t in 0..4 {
            for s in 0..4 {
                let wyz = self.w[1][s] * self.w[2][t];
                let row = lat.index(self.base[0], self.base[1] + s, self.base[2] + t);
                for r in 0..4 {
                    d += self.w[0][r] * wyz * coef[row + r];
                }
            }
        }
        d
    }

    /// Clamped displacement and whether the clamp is inactive.
    fn displacement(&self, lat: &Lattice, coef: &[f64]) -> (f64, bool) {
        let d = self.raw(lat, coef);
        let (lo, hi) = self.bounds;
        if d < lo {
            (lo, false)
        } else if d > hi {
            (hi, false)
        } else {
            (d, true)
        }
    }

    fn scatter(&self, lat: &Lattice, value: f64, grad: &mut [f64]) {
        for t in 0..4 {
            for s in 0..4 {
                let wyz = self.w[1][s] * self.w[2][t] * value;
                let row = lat.index(self.base[0], self.base[1] + s, self.base[2] + t);
                for r in 0..4 {
                    grad[row + r] += self.w[0][r] * wyz;
                }
            }
        }
    }
}

/// One pyramid level: pooled moving image and the similarity domain.
struct Level {
    nz: usize,
    z0: f64,
    dz: f64,
    col_len: usize,
    moving: Vec<f64>,
    samples: Vec<Sample>,
}

impl Level {
    /// Moving value and its z-derivative at height `z` in column `col`.
    fn sample_moving(&self, col: usize, z: f64) -> (f64, f64) {
        let kf = (z - self.z0) / self.dz;
        let n = self.nz as f64;
        if !(kf >= -0.5 && kf <= n - 0.5) {
            return (0.0, 0.0);
        }
        let at = |k: usize| self.moving[col + self.col_len * k];
        if self.nz == 1 {
            return (at(0), 0.0);
        }
        if kf <= 0.0 {
            return (at(0), 0.0);
        }
        if kf >= n - 1.0 {
            return (at(self.nz - 1), 0.0);
        }
        let k = (kf.floor() as usize).min(self.nz - 2);
        let t = kf - k as f64;
        let (a, b) = (at(k), at(k + 1));
        (a + (b - a) * t, (b - a) / self.dz)
    }

    /// NCC at the current coefficients, optionally with its gradient.
    fn ncc(&self, lat: &Lattice, coef: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let n = self.samples.len() as f64;
        let mut m = Vec::with_capacity(self.samples.len());
        let mut dm = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let (d, free) = s.displacement(lat, coef);
            let (v, g) = self.sample_moving(s.col, s.z + d);
            m.push(v);
            dm.push(if free { g } else { 0.0 });
        }
        let mf = self.samples.iter().map(|s| s.fixed).sum::<f64>() / n;
        let mm = m.iter().sum::<f64>() / n;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for (s, &v) in self.samples.iter().zip(&m) {
            let f = s.fixed - mf;
            let g = v - mm;
            a += f * g;
            b += f * f;
            c += g * g;
        }
        if !(b > 0.0 && c > 0.0) {
            return 0.0;
        }
        let ncc = a / (b * c).sqrt();
        if let Some(grad) = grad {
            let scale = ncc * (b / c).sqrt();
            let norm = (b * c).sqrt();
            for ((s, &v), &g) in self.samples.iter().zip(&m).zip(&dm) {
                if g == 0.0 {
                    continue;
                }
                let dn = ((s.fixed - mf) - scale * (v - mm)) / norm;
                s.scatter(lat, dn * g, grad);
            }
        }
        ncc
    }
}

/// Squared excess compression of adjacent z-coefficients, with gradient.
fn penalty(lat: &Lattice, coef: &[f64], threshold: f64, grad: Option<&mut [f64]>) -> f64 {
    let mut p = 0.0;
    let mut g = grad;
    for c in 0..lat.n[2] - 1 {
        for b in 0..lat.n[1] {
            for a in 0..lat.n[0] {
                let i0 = lat.index(a, b, c);
                let i1 = lat.index(a, b, c + 1);
                let x = -(coef[i1] - coef[i0]) / lat.h - threshold;
                if x > 0.0 {
                    p += x * x;
                    if let Some(g) = g.as_deref_mut() {
                        g[i1] -= 2.0 * x / lat.h;
                        g[i0] += 2.0 * x / lat.h;
                    }
                }
            }
        }
    }
    p
}

/// Hard feasibility: successive z-coefficients drop by at most `(1 - min_slope)·h`.
fn project(lat: &Lattice, coef: &mut [f64], min_slope: f64) {
    let max_drop = (1.0 - min_slope) * lat.h;
    for b in 0..lat.n[1] {
        for a in 0..lat.n[0] {
            for c in 1..lat.n[2] {
                let lo = coef[lat.index(a, b, c - 1)] - max_drop;
                let i = lat.index(a, b, c);
                if coef[i] < lo {
                    coef[i] = lo;
                }
            }
        }
    }
}

fn pool_z<T: Copy>(data: &[T], dims: [usize; 3], f: usize, reduce: impl Fn(&[T]) -> f64) -> (Vec<f64>, usize) {
    let n = dims[0] * dims[1];
    let nz = dims[2] / f;
    let mut out = vec![0.0; n * nz];
    let mut buf = Vec::with_capacity(f);
    for k in 0..nz {
        for col in 0..n {
            buf.clear();
            for kk in k * f..(k + 1) * f {
                buf.push(data[col + n * kk]);
            }
            out[col + n * k] = reduce(&buf);
        }
    }
    (out, nz)
}

fn z_extent(mask: &LabelMap) -> Option<(usize, usize)> {
    let n = mask.grid().slice_len();
    let nz = mask.dims()[2];
    let has = |k: usize| mask.data()[k * n..(k + 1) * n].iter().any(|&v| v != 0);
    let lo = (0..nz).find(|&k| has(k))?;
    let hi = (0..nz).rev().find(|&k| has(k))?;
    Some((lo, hi))
}

fn inplane_bbox(mask: &LabelMap) -> ([usize; 2], [usize; 2]) {
    let [nx, ny, _] = mask.dims();
    let (mut lo, mut hi) = ([usize::MAX; 2], [0usize; 2]);
    for (idx, &v) in mask.data().iter().enumerate() {
        if v != 0 {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            lo = [lo[0].min(i), lo[1].min(j)];
            hi = [hi[0].max(i), hi[1].max(j)];
        }
    }
    (lo, hi)
}

/// Fit the z-only refinement field mapping the moving image onto the fixed one.
pub fn register_si(pair: &MaskedPair, p: &SIRegParams) -> Result<SIRegistration> {
    p.validate()?;
    let grid = pair.fixed.grid().clone();
    let dims = grid.dims();
    let [nx, ny, nz] = dims;
    let fixed_d = dilate_mask(&pair.fixed_mask, p.dilation);
    let moving_d = dilate_mask(&pair.moving_mask, p.dilation);
    let (f_lo, f_hi) = z_extent(&fixed_d).ok_or_else(|| Error::EmptyMask("fixed rootlet mask".into()))?;
    let (m_lo, m_hi) = z_extent(&moving_d).ok_or_else(|| Error::EmptyMask("moving rootlet mask".into()))?;
    let (k_lo, k_hi) = (f_lo.min(m_lo), f_hi.max(m_hi));
    let union = LabelMap::new(
        grid.clone(),
        fixed_d.data().iter().zip(moving_d.data()).map(|(a, b)| a | b).collect(),
    )?;
    let (ij_lo, ij_hi) = inplane_bbox(&union);

    let h = p.control_spacing;
    let lo_w = grid.center_of(ij_lo[0], ij_lo[1], k_lo);
    let hi_w = grid.center_of(ij_hi[0], ij_hi[1], k_hi);
    let count = |lo: f64, hi: f64| ((hi - lo) / h).floor() as usize + 4;
    // control index a sits at origin + (a - 1)·h
    let lat = Lattice {
        origin: [lo_w.x, lo_w.y, lo_w.z],
        h,
        n: [count(lo_w.x, hi_w.x), count(lo_w.y, hi_w.y), count(lo_w.z, hi_w.z)],
        z_support: (lo_w.z, hi_w.z),
        edge_margin: p.edge_margin,
    };

    let build_level = |f: usize| -> Level {
        let avg = |b: &[f32]| b.iter().map(|&v| v as f64).sum::<f64>() / b.len() as f64;
        let (fixed, lnz) = pool_z(pair.fixed.data(), dims, f, avg);
        let (moving, _) = pool_z(pair.moving.data(), dims, f, avg);
        let (mask, _) = pool_z(fixed_d.data(), dims, f, |b: &[u8]| b.iter().copied().max().unwrap_or(0) as f64);
        let dz = grid.spacing()[2] * f as f64;
        let z0 = grid.slice_z(0) + 0.5 * (f - 1) as f64 * grid.spacing()[2];
        let col_len = nx * ny;
        let mut samples = Vec::new();
        for k in 0..lnz {
            for j in 0..ny {
                for i in 0..nx {
                    let col = i + nx * j;
                    if mask[col + col_len * k] != 0.0 {
                        let c = grid.center_of(i, j, 0);
                        let z = z0 + dz * k as f64;
                        samples.push(Sample::new(&lat, col, [c.x, c.y, z], fixed[col + col_len * k]));
                    }
                }
            }
        }
        Level {
            nz: lnz,
            z0,
            dz,
            col_len,
            moving,
            samples,
        }
    };

    let threshold = 0.5 * (1.0 - p.min_slope);
    let objective = |lvl: &Level, coef: &[f64], grad: Option<&mut [f64]>| -> (f64, f64) {
        match grad {
            Some(g) => {
                let ncc = lvl.ncc(&lat, coef, Some(&mut *g));
                let mut pg = vec![0.0; coef.len()];
                let pen = penalty(&lat, coef, threshold, Some(&mut pg));
                for (gi, pi) in g.iter_mut().zip(&pg) {
                    *gi -= p.monotonicity_weight * pi;
                }
                (ncc - p.monotonicity_weight * pen, ncc)
            }
            None => {
                let ncc = lvl.ncc(&lat, coef, None);
                (ncc - p.monotonicity_weight * penalty(&lat, coef, threshold, None), ncc)
            }
        }
    };

    let mut coef = vec![0.0; lat.len()];
    let mut iterations = Vec::with_capacity(p.levels);
    for l in 0..p.levels {
        let factor = 1usize << (p.levels - 1 - l);
        let factor = factor.min(nz.max(1));
        let lvl = build_level(factor);
        if lvl.samples.is_empty() {
            return Err(Error::EmptyMask(format!("fixed mask vanished at pyramid level {l}")));
        }
        let mut step = p.step / (1u64 << l) as f64;
        let mut grad = vec![0.0; coef.len()];
        let (mut best, mut best_ncc) = objective(&lvl, &coef, Some(&mut grad));
        let mut falling = 0usize;
        let mut its = 0usize;
        while its < p.max_iterations && step >= p.min_step {
            let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !(gmax > 1e-15) {
                break;
            }
            its += 1;
            let mut cand: Vec<f64> = coef.iter().zip(&grad).map(|(c, g)| c + step * g / gmax).collect();
            project(&lat, &mut cand, p.min_slope);
            let mut cand_grad = vec![0.0; coef.len()];
            let (val, ncc) = objective(&lvl, &cand, Some(&mut cand_grad));
            if val > best {
                falling = if ncc < best_ncc { falling + 1 } else { 0 };
                if falling >= DIVERGENCE_STEPS {
                    return Err(Error::OptimizerDivergence {
                        level: l,
                        steps: falling,
                        from: best_ncc,
                        to: ncc,
                    });
                }
                coef = cand;
                grad = cand_grad;
                best = val;
                best_ncc = ncc;
            } else {
                step *= 0.5;
            }
        }
        debug!("SI level {l} (z x{factor}): {its} iterations, NCC {best_ncc:.5}");
        iterations.push(its);
    }

    let finest = build_level(1);
    let zero = vec![0.0; coef.len()];
    let ncc_identity = finest.ncc(&lat, &zero, None);
    let ncc_final = finest.ncc(&lat, &coef, None);
    let fell_back = !(ncc_final >= ncc_identity);
    if fell_back {
        debug!("SI refinement did not improve NCC ({ncc_final:.5} < {ncc_identity:.5}); using identity");
        coef = zero;
    }

    let field = rasterize(&grid, &lat, &coef, (ij_lo, ij_hi), (k_lo, k_hi))?;
    check_columns_monotone(&field, p.min_slope.min(lat.edge_margin))?;
    Ok(SIRegistration {
        field,
        ncc_identity,
        ncc_final: if fell_back { ncc_identity } else { ncc_final },
        iterations,
        fell_back,
    })
}

fn rasterize(
    grid: &Grid,
    lat: &Lattice,
    coef: &[f64],
    bbox: ([usize; 2], [usize; 2]),
    krange: (usize, usize),
) -> Result<DeformationField> {
    let mut disp = vec![[0.0; 3]; grid.len()];
    let (lo, hi) = bbox;
    for k in krange.0..=krange.1 {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                let c = grid.center_of(i, j, k);
                let s = Sample::new(lat, 0, [c.x, c.y, c.z], 0.0);
                let (d, _) = s.displacement(lat, coef);
                disp[grid.index(i, j, k)][2] = d;
            }
        }
    }
    DeformationField::new(grid.clone(), FieldKind::ZOnly, disp)
}

/// Every column of the total map `z + d(z)` must rise by at least
/// `min_slope·dz` per slice; linear interpolation between slices then keeps
/// it strictly increasing everywhere.
fn check_columns_monotone(f: &DeformationField, min_slope: f64) -> Result<()> {
    let grid = f.grid();
    let [nx, ny, nz] = grid.dims();
    let dz = grid.spacing()[2];
    for j in 0..ny {
        for i in 0..nx {
            for k in 1..nz {
                let a = f.data()[grid.index(i, j, k - 1)][2];
                let b = f.data()[grid.index(i, j, k)][2];
                let slope = 1.0 + (b - a) / dz;
                if !(slope >= min_slope * (1.0 - 1e-9)) {
                    return Err(Error::NonMonotoneField {
                        z: grid.slice_z(k),
                        slope,
                    });
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::axis_aligned(dims, [0.5; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn single_voxel_dilation_matches_ball_count() {
        let mut m = LabelMap::zeros(grid([15, 15, 15]));
        m.set(7, 7, 7, 1);
        let d = dilate_mask(&m, 3);
        let mut expected = 0;
        for k in -3i32..=3 {
            for j in -3i32..=3 {
                for i in -3i32..=3 {
                    if i * i + j * j + k * k <= 9 {
                        expected += 1;
                        assert_eq!(d.get((7 + i) as usize, (7 + j) as usize, (7 + k) as usize), 1);
                    }
                }
            }
        }
        assert_eq!(d.count_nonzero(), expected);
        assert_eq!(expected, 123);
    }

    #[test]
    fn zero_radius_is_identity() {
        let m = LabelMap::from_fn(grid([6, 6, 6]), |i, j, k| u8::from((i + j * k) % 4 == 0));
        assert_eq!(dilate_mask(&m, 0), m);
    }

    #[test]
    fn params_parse_and_validate() {
        let p = SIRegParams::from_pairs(&["control_spacing=10", "levels=2", "dilation = 2"]).unwrap();
        assert_eq!(p.control_spacing, 10.0);
        assert_eq!(p.levels, 2);
        assert_eq!(p.dilation, 2);
        assert!(SIRegParams::from_pairs(&["levels=0"]).is_err());
        assert!(SIRegParams::from_pairs(&["bogus=1"]).is_err());
        assert!(SIRegParams::from_pairs(&["control_spacing"]).is_err());
        assert!(SIRegParams::from_pairs(&["control_spacing=-1"]).is_err());
    }

    /// Bands of intensity along z inside a cylinder; labels mark the bands.
    fn band_phantom(shift: impl Fn(f64) -> f64) -> (Image, LabelMap) {
        let g = grid([24, 24, 200]);
        let centers = [80.0, 64.0, 48.0, 32.0];
        let g2 = g.clone();
        let label_at = move |i: usize, j: usize, k: usize| -> u8 {
            let p = g2.center_of(i, j, k);
            let z = p.z - shift(p.z);
            let (u, v) = (p.x - 6.0, p.y - 6.0);
            for (n, &c) in centers.iter().enumerate() {
                if (z - c).abs() <= 3.0 && ((u.abs() - 2.0).powi(2) + (v + 1.5).powi(2)) <= 1.5 {
                    return n as u8 + 2;
                }
            }
            0
        };
        let labels = LabelMap::from_fn(g.clone(), &label_at);
        let g3 = g.clone();
        let img = Image::from_fn(g, |i, j, k| {
            let p = g3.center_of(i, j, k);
            let r2 = (p.x - 6.0).powi(2) + (p.y - 6.0).powi(2);
            if label_at(i, j, k) != 0 {
                0.5
            } else if r2 <= 9.0 {
                1.0
            } else {
                0.1
            }
        });
        (img, labels)
    }

    #[test]
    fn self_registration_is_near_identity() {
        let (img, labels) = band_phantom(|_| 0.0);
        let pair = MaskedPair::new(img.clone(), labels.clone(), img, labels).unwrap();
        let r = register_si(&pair, &SIRegParams::default()).unwrap();
        assert!(r.field.max_abs() < 0.1);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let (img, labels) = band_phantom(|_| 0.0);
        let empty = LabelMap::zeros(labels.grid().clone());
        let pair = MaskedPair::new(img.clone(), empty, img, labels).unwrap();
        assert!(matches!(register_si(&pair, &SIRegParams::default()), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn recovers_rigid_shift() {
        let (fixed, fl) = band_phantom(|_| 0.0);
        let (moving, ml) = band_phantom(|_| 2.0);
        let pair = MaskedPair::new(fixed, fl.clone(), moving, ml).unwrap();
        let r = register_si(&pair, &SIRegParams::default()).unwrap();
        assert!(r.ncc_final >= r.ncc_identity);
        let g = fl.grid();
        let mut worst = 0.0f64;
        for (idx, &v) in fl.data().iter().enumerate() {
            if v != 0 {
                worst = worst.max((r.field.data()[idx][2] - 2.0).abs());
            }
        }
        assert!(worst < 0.25, "worst in-mask error {worst}");
        // zero outside the support
        let n = g.slice_len();
        assert!(r.field.data()[..n].iter().all(|d| d[2] == 0.0));
    }

    #[test]
    fn field_is_zero_outside_union_extent_and_monotone() {
        let (fixed, fl) = band_phantom(|_| 0.0);
        let (moving, ml) = band_phantom(|z| 1.2 * (z * std::f64::consts::TAU / 40.0).sin());
        let pair = MaskedPair::new(fixed, fl.clone(), moving, ml.clone()).unwrap();
        let p = SIRegParams::default();
        let r = register_si(&pair, &p).unwrap();
        let fd = dilate_mask(&fl, p.dilation);
        let md = dilate_mask(&ml, p.dilation);
        let (a, b) = z_extent(&fd).unwrap();
        let (c, d) = z_extent(&md).unwrap();
        let (lo, hi) = (a.min(c), b.max(d));
        let g = fl.grid();
        for (idx, v) in r.field.data().iter().enumerate() {
            let k = g.coords(idx)[2];
            if k <= lo || k >= hi {
                assert_eq!(v[2], 0.0, "slice {k}");
            }
        }
        check_columns_monotone(&r.field, 0.1).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn dilation_is_monotone(seed in 0u64..10_000, r in 0usize..3) {
            let g = grid([8, 8, 8]);
            let a = LabelMap::from_fn(g.clone(), |i, j, k| u8::from((i * 31 + j * 17 + k * 7 + seed as usize) % 23 == 0));
            let b = LabelMap::from_fn(g, |i, j, k| u8::from(a.get(i, j, k) == 1 || (i + j + k + seed as usize) % 11 == 0));
            let da = dilate_mask(&a, r);
            let db = dilate_mask(&b, r);
            for (x, y) in da.data().iter().zip(db.data()) {
                prop_assert!(*x <= *y);
            }
        }
    }
}
