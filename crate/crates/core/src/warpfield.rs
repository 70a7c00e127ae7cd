//! Displacement fields, their algebra, and chained resampling.
//!
//! Every transform is used in pullback form: an output point `p` reads the
//! source at `p + d(p)`. A [`WarpChain`] lists transforms from source to
//! target, so resampling evaluates them last to first.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::centerline::StraightenTransform;
use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{Grid, Image, LabelMap};

/// Tolerance below which a z-displacement counts as zero.
pub const ZERO_TOL_MM: f64 = 1e-9;

/// Sampling rule for resampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

/// Resample `v` onto `out` by reading it at `pull(p)` for every voxel centre `p`.
pub fn resample<F>(v: &Image, out: &Grid, interp: Interp, pull: F) -> Image
where
    F: Fn(&Point3<f64>) -> Point3<f64> + Sync,
{
    let [nx, ny, _] = out.dims();
    let mut data = vec![0.0f32; out.len()];
    data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        for j in 0..ny {
            for i in 0..nx {
                let q = pull(&out.center_of(i, j, k));
                slice[i + nx * j] = match interp {
                    Interp::Linear => v.sample_trilinear(&q) as f32,
                    Interp::Nearest => v.sample_nearest(&q),
                };
            }
        }
    });
    Image::new(out.clone(), data).expect("length matches grid")
}

/// Whether a field may have in-plane components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Dense3d,
    ZOnly,
}

/// Dense displacement field (world mm) sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    grid: Grid,
    kind: FieldKind,
    disp: Vec<[f64; 3]>,
}

impl DeformationField {
    pub fn new(grid: Grid, kind: FieldKind, disp: Vec<[f64; 3]>) -> Result<Self> {
        if disp.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "field has {} vectors for dims {:?}",
                disp.len(),
                grid.dims()
            )));
        }
        if let Some(i) = disp.iter().position(|d| d.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFiniteField(i));
        }
        if kind == FieldKind::ZOnly {
            if let Some(i) = disp.iter().position(|d| d[0] != 0.0 || d[1] != 0.0) {
                return Err(Error::NotZOnly(format!(
                    "voxel {i} has in-plane displacement ({}, {})",
                    disp[i][0], disp[i][1]
                )));
            }
        }
        Ok(DeformationField { grid, kind, disp })
    }

    pub fn identity(grid: Grid, kind: FieldKind) -> Self {
        let disp = vec![[0.0; 3]; grid.len()];
        DeformationField { grid, kind, disp }
    }

    /// Field from a function of the voxel-centre world point.
    pub fn from_fn(grid: Grid, kind: FieldKind, f: impl Fn(&Point3<f64>) -> Vector3<f64> + Sync) -> Result<Self> {
        let disp: Vec<[f64; 3]> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = grid.coords(idx);
                let d = f(&grid.center_of(i, j, k));
                [d.x, d.y, d.z]
            })
            .collect();
        DeformationField::new(grid, kind, disp)
    }

    /// z-only field constant within each axial slice.
    pub fn from_slice_z(grid: Grid, dz: &[f64]) -> Result<Self> {
        let [_, _, nz] = grid.dims();
        if dz.len() != nz {
            return Err(Error::InvalidVolume(format!(
                "{} slice values for {nz} slices",
                dz.len()
            )));
        }
        let n = grid.slice_len();
        let disp = dz.iter().flat_map(|&d| std::iter::repeat_n([0.0, 0.0, d], n)).collect();
        DeformationField::new(grid, FieldKind::ZOnly, disp)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.disp
    }

    pub fn max_abs(&self) -> f64 {
        self.disp
            .iter()
            .flat_map(|d| d.iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Trilinear displacement at `p` with clamp-to-edge outside the grid.
    pub fn sample(&self, p: &Point3<f64>) -> Vector3<f64> {
        let v = self.grid.world_to_voxel(p);
        let dims = self.grid.dims();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut step = [0usize; 3];
        let strides = [1, dims[0], dims[0] * dims[1]];
        for a in 0..3 {
            let c = v[a].clamp(0.0, (dims[a] - 1) as f64);
            let b = (c.floor() as usize).min(dims[a].saturating_sub(2));
            base[a] = b;
            if dims[a] > 1 {
                frac[a] = c - b as f64;
                step[a] = strides[a];
            }
        }
        let i0 = base[0] + strides[1] * base[1] + strides[2] * base[2];
        let comps: &[usize] = if self.kind == FieldKind::ZOnly { &[2] } else { &[0, 1, 2] };
        let mut out = Vector3::zeros();
        for &c in comps {
            let g = |o: usize| self.disp[i0 + o][c];
            let [tx, ty, tz] = frac;
            let c00 = g(0) + (g(step[0]) - g(0)) * tx;
            let c10 = g(step[1]) + (g(step[0] + step[1]) - g(step[1])) * tx;
            let c01 = g(step[2]) + (g(step[0] + step[2]) - g(step[2])) * tx;
            let c11 = g(step[1] + step[2]) + (g(step[0] + step[1] + step[2]) - g(step[1] + step[2])) * tx;
            let c0 = c00 + (c10 - c00) * ty;
            let c1 = c01 + (c11 - c01) * ty;
            out[c] = c0 + (c1 - c0) * tz;
        }
        out
    }

    pub fn pullback(&self, p: &Point3<f64>) -> Point3<f64> {
        p + self.sample(p)
    }

    /// Write as a 3-component float32 NIfTI volume.
    pub fn save(&self, path: &Path) -> Result<()> {
        let v: Vec<[f32; 3]> = self
            .disp
            .iter()
            .map(|d| [d[0] as f32, d[1] as f32, d[2] as f32])
            .collect();
        nifti::save_vectors(&self.grid, &v, path)
    }

    /// Read a field written by [`DeformationField::save`]; z-only when no
    /// in-plane component is set.
    pub fn load(path: &Path) -> Result<Self> {
        let (grid, v) = nifti::load_vectors(path)?;
        let disp: Vec<[f64; 3]> = v.iter().map(|d| [d[0] as f64, d[1] as f64, d[2] as f64]).collect();
        let kind = if disp.iter().all(|d| d[0] == 0.0 && d[1] == 0.0) {
            FieldKind::ZOnly
        } else {
            FieldKind::Dense3d
        };
        DeformationField::new(grid, kind, disp)
    }
}

/// Single field equivalent to pulling back through `outer` then `inner`.
///
/// `d(p) = outer(p) + inner(p + outer(p))`, on `outer`'s grid.
pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    if !outer.grid.same_space(&inner.grid) {
        return Err(Error::SpaceMismatch(format!(
            "outer field grid {:?} differs from inner field grid {:?}",
            outer.grid.dims(),
            inner.grid.dims()
        )));
    }
    let grid = &outer.grid;
    let disp: Vec<[f64; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            let p = grid.center_of(i, j, k);
            let o = Vector3::from(outer.disp[idx]);
            let d = o + inner.sample(&(p + o));
            [d.x, d.y, d.z]
        })
        .collect();
    let kind = if outer.kind == FieldKind::ZOnly && inner.kind == FieldKind::ZOnly {
        FieldKind::ZOnly
    } else {
        FieldKind::Dense3d
    };
    DeformationField::new(grid.clone(), kind, disp)
}

/// Replace every slice by the mean of its nonzero z-displacements.
pub fn symmetrize_slicewise(f: &DeformationField) -> Result<DeformationField> {
    if f.kind != FieldKind::ZOnly {
        return Err(Error::NotZOnly("slice-wise symmetrization needs a z-only field".into()));
    }
    let n = f.grid.slice_len();
    let dz: Vec<f64> = f
        .disp
        .chunks(n)
        .map(|slice| {
            // constant slices are returned untouched so the operation is exactly idempotent
            if slice.iter().all(|d| d[2] == slice[0][2]) {
                return if slice[0][2].abs() > ZERO_TOL_MM { slice[0][2] } else { 0.0 };
            }
            let (sum, count) = slice
                .iter()
                .filter(|d| d[2].abs() > ZERO_TOL_MM)
                .fold((0.0, 0usize), |(s, c), d| (s + d[2], c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect();
    DeformationField::from_slice_z(f.grid.clone(), &dz)
}

/// Increasing 1D map sampled at slice positions: `w[i] = map(z[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledZMap {
    z: Vec<f64>,
    w: Vec<f64>,
}

impl SampledZMap {
    pub fn new(z: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if z.len() != w.len() || z.len() < 2 {
            return Err(Error::InvalidParameter("z-map needs >= 2 matching samples".into()));
        }
        if z.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::InvalidParameter("z-map sample positions must increase".into()));
        }
        Ok(SampledZMap { z, w })
    }

    /// Total pullback map `z → z + d(z)` of a slice-constant z-only field.
    pub fn from_field(f: &DeformationField) -> Result<Self> {
        if f.kind != FieldKind::ZOnly {
            return Err(Error::NotZOnly("monotone inversion needs a z-only field".into()));
        }
        let n = f.grid.slice_len();
        let mut z = Vec::new();
        let mut w = Vec::new();
        for (k, slice) in f.disp.chunks(n).enumerate() {
            let d = slice[0][2];
            if slice.iter().any(|v| (v[2] - d).abs() > 1e-9) {
                return Err(Error::NotZOnly(format!(
                    "z-displacement varies within slice {k}; symmetrize first"
                )));
            }
            let zk = f.grid.slice_z(k);
            z.push(zk);
            w.push(zk + d);
        }
        if z.len() < 2 {
            return Err(Error::InvalidParameter("z-map needs at least two slices".into()));
        }
        SampledZMap::new(z, w)
    }

    pub fn positions(&self) -> &[f64] {
        &self.z
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    /// Piecewise-linear evaluation, linear extrapolation at both ends.
    pub fn eval(&self, x: f64) -> f64 {
        lerp_table(&self.z, &self.w, x)
    }

    /// Exact inverse: the piecewise-linear map with knots swapped.
    pub fn inverse(&self) -> Result<SampledZMap> {
        for (i, p) in self.w.windows(2).enumerate() {
            if !(p[1] > p[0]) {
                return Err(Error::NonInvertibleZMap {
                    z_lo: self.z[i],
                    z_hi: self.z[i + 1],
                });
            }
        }
        SampledZMap::new(self.w.clone(), self.z.clone())
    }

    /// Pullback field `d(z) = map(z) - z` on `grid`.
    pub fn to_field(&self, grid: &Grid) -> Result<DeformationField> {
        let dz: Vec<f64> = (0..grid.dims()[2])
            .map(|k| {
                let z = grid.slice_z(k);
                self.eval(z) - z
            })
            .collect();
        DeformationField::from_slice_z(grid.clone(), &dz)
    }
}

/// Linear interpolation in an increasing table with linear extrapolation.
pub(crate) fn lerp_table(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    let i = if x <= xs[0] {
        0
    } else if x >= xs[n - 1] {
        n - 2
    } else {
        xs.partition_point(|&v| v <= x).clamp(1, n - 1) - 1
    };
    let f = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + f * (ys[i + 1] - ys[i])
}

/// Inverse of a slice-constant z-only field's total map, as a field on the same grid.
pub fn invert_monotone_z(f: &DeformationField) -> Result<DeformationField> {
    SampledZMap::from_field(f)?.inverse()?.to_field(&f.grid)
}

/// One link of a warp chain.
#[derive(Clone, Debug)]
pub enum Transform {
    Field(Arc<DeformationField>),
    /// Curved → straight when `inverse` is false, straight → curved otherwise.
    Straighten {
        transform: Arc<StraightenTransform>,
        inverse: bool,
    },
}

impl Transform {
    pub fn field(f: DeformationField) -> Self {
        Transform::Field(Arc::new(f))
    }

    /// Space the transform reads from.
    pub fn source_grid(&self) -> &Grid {
        match self {
            Transform::Field(f) => f.grid(),
            Transform::Straighten { transform, inverse } => {
                if *inverse {
                    transform.straight_grid()
                } else {
                    transform.curved_grid()
                }
            }
        }
    }

    /// Space the transform writes to.
    pub fn target_grid(&self) -> &Grid {
        match self {
            Transform::Field(f) => f.grid(),
            Transform::Straighten { transform, inverse } => {
                if *inverse {
                    transform.curved_grid()
                } else {
                    transform.straight_grid()
                }
            }
        }
    }

    pub fn pullback(&self, p: &Point3<f64>) -> Point3<f64> {
        match self {
            Transform::Field(f) => f.pullback(p),
            Transform::Straighten { transform, inverse } => {
                if *inverse {
                    transform.to_straight(p)
                } else {
                    transform.to_curved(p)
                }
            }
        }
    }

    /// Short name used in error messages.
    pub fn describe(&self) -> &'static str {
        match self {
            Transform::Field(f) if f.kind() == FieldKind::ZOnly => "z-only field",
            Transform::Field(_) => "dense field",
            Transform::Straighten { inverse: false, .. } => "straightening (curved to straight)",
            Transform::Straighten { inverse: true, .. } => "straightening (straight to curved)",
        }
    }
}

/// Ordered source → target list of transforms.
#[derive(Clone, Debug, Default)]
pub struct WarpChain {
    transforms: Vec<Transform>,
}

impl WarpChain {
    pub fn new(transforms: Vec<Transform>) -> Result<Self> {
        for (i, pair) in transforms.windows(2).enumerate() {
            if !pair[0].target_grid().same_space(pair[1].source_grid()) {
                return Err(Error::IncompatibleChain {
                    boundary: i,
                    message: format!(
                        "{} writes grid {:?} but {} reads grid {:?}",
                        pair[0].describe(),
                        pair[0].target_grid().dims(),
                        pair[1].describe(),
                        pair[1].source_grid().dims()
                    ),
                });
            }
        }
        Ok(WarpChain { transforms })
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &WarpChain) -> Result<WarpChain> {
        let mut all = self.transforms.clone();
        all.extend(next.transforms.iter().cloned());
        WarpChain::new(all)
    }

    /// Source point read for output point `p`.
    pub fn pullback(&self, p: &Point3<f64>) -> Point3<f64> {
        self.transforms.iter().rev().fold(*p, |q, t| t.pullback(&q))
    }

    /// Output grid of the last transform, if any.
    pub fn target_grid(&self) -> Option<&Grid> {
        self.transforms.last().map(|t| t.target_grid())
    }
}

/// Resample `v` through `chain` onto `out_grid`.
pub fn apply_warp(v: &Image, chain: &WarpChain, out_grid: &Grid, is_label: bool) -> Image {
    if chain.is_empty() && v.grid().same_space(out_grid) {
        return v.clone().with_grid(out_grid.clone()).expect("same dims");
    }
    let interp = if is_label { Interp::Nearest } else { Interp::Linear };
    resample(v, out_grid, interp, |p| chain.pullback(p))
}

/// Label-map convenience: nearest-neighbour resampling, values preserved.
pub fn apply_warp_labels(v: &LabelMap, chain: &WarpChain, out_grid: &Grid) -> LabelMap {
    apply_warp(&Image::from_labels(v), chain, out_grid, true).map(|x| x as u8)
}

/// Binary mask warped with trilinear weights and re-thresholded at 0.5.
pub fn apply_warp_mask(v: &LabelMap, chain: &WarpChain, out_grid: &Grid) -> LabelMap {
    let soft = apply_warp(&Image::from_labels(&v.binarize()), chain, out_grid, false);
    soft.map(|x| u8::from(x >= 0.5))
}
