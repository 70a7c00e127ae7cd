//! In-memory 3D volumes and point sampling.
//!
//! A [`Grid`] ties voxel indices to world millimetres through a 4×4 affine.
//! Axis convention: x right–left, y anterior–posterior, z superior–inferior
//! with z increasing superiorly. Data are stored x-fastest, matching NIfTI.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel-index → world-mm geometry of a volume.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GridDesc", into = "GridDesc")]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
    inverse: Matrix4<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridDesc {
    dims: [usize; 3],
    affine: [[f64; 4]; 4],
}

impl TryFrom<GridDesc> for Grid {
    type Error = Error;

    fn try_from(d: GridDesc) -> Result<Self> {
        let affine = Matrix4::from_fn(|r, c| d.affine[r][c]);
        Grid::new(d.dims, affine)
    }
}

impl From<Grid> for GridDesc {
    fn from(g: Grid) -> Self {
        let mut affine = [[0.0; 4]; 4];
        for (r, row) in affine.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = g.affine[(r, c)];
            }
        }
        GridDesc {
            dims: g.dims,
            affine,
        }
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.same_space(other)
    }
}

impl Grid {
    pub fn new(dims: [usize; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be >= 1, got {dims:?}")));
        }
        if affine.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonInvertibleAffine);
        }
        let inverse = affine.try_inverse().ok_or(Error::NonInvertibleAffine)?;
        let linear: Matrix3<f64> = affine.fixed_view::<3, 3>(0, 0).into();
        if linear.determinant().abs() < 1e-12 {
            return Err(Error::NonInvertibleAffine);
        }
        let spacing = [
            linear.column(0).norm(),
            linear.column(1).norm(),
            linear.column(2).norm(),
        ];
        Ok(Grid {
            dims,
            spacing,
            affine,
            inverse,
        })
    }

    /// Axis-aligned grid with voxel (0,0,0) centred at `origin`.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidVolume(format!("spacing must be > 0, got {spacing:?}")));
        }
        let mut affine = Matrix4::identity();
        for a in 0..3 {
            affine[(a, a)] = spacing[a];
            affine[(a, 3)] = origin[a];
        }
        Grid::new(dims, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// Voxels per axial slice.
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn voxel_to_world(&self, v: [f64; 3]) -> Point3<f64> {
        let w = self.affine * Vector4::new(v[0], v[1], v[2], 1.0);
        Point3::new(w.x, w.y, w.z)
    }

    #[inline]
    pub fn world_to_voxel(&self, p: &Point3<f64>) -> [f64; 3] {
        let v = self.inverse * Vector4::new(p.x, p.y, p.z, 1.0);
        [v.x, v.y, v.z]
    }

    pub fn center_of(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        self.voxel_to_world([i as f64, j as f64, k as f64])
    }

    /// True when the affine is diagonal with positive entries (canonical orientation).
    pub fn is_canonical(&self) -> bool {
        let tol = 1e-6 * self.spacing.iter().cloned().fold(0.0, f64::max);
        (0..3).all(|r| {
            (0..3).all(|c| {
                let v = self.affine[(r, c)];
                if r == c {
                    v > 0.0
                } else {
                    v.abs() <= tol
                }
            })
        })
    }

    /// World z of the centre of axial slice `k` (canonical grids).
    pub fn slice_z(&self, k: usize) -> f64 {
        self.affine[(2, 2)] * k as f64 + self.affine[(2, 3)]
    }

    /// Continuous slice index of world z (canonical grids).
    pub fn z_to_slice(&self, z: f64) -> f64 {
        (z - self.affine[(2, 3)]) / self.affine[(2, 2)]
    }

    pub fn origin(&self) -> Point3<f64> {
        Point3::new(self.affine[(0, 3)], self.affine[(1, 3)], self.affine[(2, 3)])
    }

    /// World extent (min, max) of voxel centres along `axis` for canonical grids.
    pub fn axis_range(&self, axis: usize) -> (f64, f64) {
        let lo = self.affine[(axis, 3)];
        let hi = lo + self.affine[(axis, axis)] * (self.dims[axis] - 1) as f64;
        (lo.min(hi), lo.max(hi))
    }

    /// Same dims and affine (entries within 1e-5).
    pub fn same_space(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self
                .affine
                .iter()
                .zip(other.affine.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-5)
    }

    /// Same grid translated by `t` mm.
    pub fn translated(&self, t: Vector3<f64>) -> Grid {
        let mut affine = self.affine;
        for a in 0..3 {
            affine[(a, 3)] += t[a];
        }
        Grid::new(self.dims, affine).expect("translation keeps the affine invertible")
    }
}

/// A scalar 3D image on a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    grid: Grid,
    data: Vec<T>,
}

/// Intensity image.
pub type Image = Volume<f32>;
/// Integer label map (cord mask, rootlet levels, disc indices).
pub type LabelMap = Volume<u8>;

impl<T: Copy + Default> Volume<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims()
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: T) -> Self {
        let data = vec![value; grid.len()];
        Volume { grid, data }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::filled(grid, T::default())
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let [nx, ny, nz] = grid.dims();
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = v;
    }

    /// Axial slice `k` as a contiguous x-fastest slice.
    pub fn slice(&self, k: usize) -> &[T] {
        let n = self.grid.slice_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data with a replaced geometry (dims must match).
    pub fn with_grid(self, grid: Grid) -> Result<Self> {
        Volume::new(grid, self.data)
    }

    /// Nearest-neighbour lookup; out of bounds yields `T::default()`.
    pub fn sample_nearest(&self, p: &Point3<f64>) -> T {
        let v = self.grid.world_to_voxel(p);
        let dims = self.grid.dims();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = v[a].round();
            if !(r >= 0.0 && r <= (dims[a] - 1) as f64) {
                return T::default();
            }
            idx[a] = r as usize;
        }
        self.get(idx[0], idx[1], idx[2])
    }
}

impl Volume<f32> {
    /// Trilinear interpolation in voxel space.
    ///
    /// Points within half a voxel of the outer voxel centres are sampled with
    /// edge replication; anything further out returns 0.
    pub fn sample_trilinear(&self, p: &Point3<f64>) -> f64 {
        let v = self.grid.world_to_voxel(p);
        trilinear(&self.data, self.grid.dims(), v)
    }

    pub fn from_labels(labels: &LabelMap) -> Image {
        labels.map(|v| v as f32)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

impl Volume<u8> {
    /// Voxels with nonzero label become 1.
    pub fn binarize(&self) -> LabelMap {
        self.map(|v| u8::from(v != 0))
    }

    /// Voxels equal to `label` become 1.
    pub fn select(&self, label: u8) -> LabelMap {
        self.map(|v| u8::from(v == label))
    }

    /// Distinct nonzero labels, ascending.
    pub fn labels_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Trilinear interpolation on raw x-fastest data at continuous voxel coordinates.
#[inline]
pub(crate) fn trilinear(data: &[f32], dims: [usize; 3], v: [f64; 3]) -> f64 {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let n = dims[a] as f64;
        if !(v[a] >= -0.5 && v[a] <= n - 0.5) {
            return 0.0;
        }
        let c = v[a].clamp(0.0, n - 1.0);
        let f = c.floor();
        let mut b = f as usize;
        let mut t = c - f;
        if b + 1 >= dims[a] {
            // upper edge or single-voxel axis
            b = dims[a] - 1;
            t = 0.0;
        }
        base[a] = b;
        frac[a] = t;
    }
    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let step = [
        usize::from(base[0] + 1 < dims[0]),
        usize::from(base[1] + 1 < dims[1]) * nx,
        usize::from(base[2] + 1 < dims[2]) * nxy,
    ];
    let i0 = base[0] + nx * base[1] + nxy * base[2];
    let c000 = data[i0] as f64;
    let c100 = data[i0 + step[0]] as f64;
    let c010 = data[i0 + step[1]] as f64;
    let c110 = data[i0 + step[0] + step[1]] as f64;
    let c001 = data[i0 + step[2]] as f64;
    let c101 = data[i0 + step[0] + step[2]] as f64;
    let c011 = data[i0 + step[1] + step[2]] as f64;
    let c111 = data[i0 + step[0] + step[1] + step[2]] as f64;
    let [tx, ty, tz] = frac;
    let c00 = c000 + (c100 - c000) * tx;
    let c10 = c010 + (c110 - c010) * tx;
    let c01 = c001 + (c101 - c001) * tx;
    let c11 = c011 + (c111 - c011) * tx;
    let c0 = c00 + (c10 - c00) * ty;
    let c1 = c01 + (c11 - c01) * ty;
    c0 + (c1 - c0) * tz
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid(dims: [usize; 3]) -> Grid {
        Grid::axis_aligned(dims, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn voxel_to_world_matches_hand_matrix_product() {
        let grid = Grid::axis_aligned([40; 3], [0.8; 3], [0.0; 3]).unwrap();
        let p = grid.voxel_to_world([10.0, 20.0, 30.0]);
        // diag(0.8, 0.8, 0.8, 1) · (10, 20, 30, 1)
        let m = [
            [0.8, 0.0, 0.0, 0.0],
            [0.0, 0.8, 0.0, 0.0],
            [0.0, 0.0, 0.8, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let v = [10.0, 20.0, 30.0, 1.0];
        let mut w = [0.0; 4];
        for r in 0..4 {
            for c in 0..4 {
                w[r] += m[r][c] * v[c];
            }
        }
        assert!((p.x - w[0]).abs() < 1e-12 && (p.x - 8.0).abs() < 1e-12);
        assert!((p.y - w[1]).abs() < 1e-12 && (p.y - 16.0).abs() < 1e-12);
        assert!((p.z - w[2]).abs() < 1e-12 && (p.z - 24.0).abs() < 1e-12);
    }

    #[test]
    fn half_mm_spacing_puts_two_slices_per_mm() {
        let grid = Grid::axis_aligned([4, 4, 40], [0.5; 3], [0.0; 3]).unwrap();
        let a = grid.z_to_slice(10.0);
        let b = grid.z_to_slice(11.0);
        assert!((b - a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_geometry() {
        assert!(Grid::new([2, 2, 2], Matrix4::zeros()).is_err());
        assert!(Grid::axis_aligned([0, 2, 2], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::axis_aligned([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn trilinear_grid_points_and_midpoints() {
        let grid = unit_grid([3, 3, 3]);
        let vol = Image::from_fn(grid, |i, _, _| if i == 0 { 2.0 } else { 4.0 });
        assert_eq!(vol.sample_trilinear(&Point3::new(0.0, 1.0, 1.0)), 2.0);
        assert_eq!(vol.sample_trilinear(&Point3::new(1.0, 1.0, 1.0)), 4.0);
        assert!((vol.sample_trilinear(&Point3::new(0.5, 1.0, 1.0)) - 3.0).abs() < 1e-12);
        assert_eq!(vol.sample_trilinear(&Point3::new(-3.0, 1.0, 1.0)), 0.0);
        assert_eq!(vol.sample_trilinear(&Point3::new(1.0, 1.0, 9.0)), 0.0);
    }

    #[test]
    fn nearest_label_lookup() {
        let grid = unit_grid([5, 5, 5]);
        let mut labels = LabelMap::zeros(grid);
        labels.set(2, 2, 2, 3);
        assert_eq!(labels.sample_nearest(&Point3::new(2.0, 2.0, 2.0)), 3);
        // 0.2 voxel towards the label-0 neighbour still rounds to the label-3 voxel
        assert_eq!(labels.sample_nearest(&Point3::new(2.2, 2.0, 2.0)), 3);
        assert_eq!(labels.sample_nearest(&Point3::new(2.6, 2.0, 2.0)), 0);
        assert_eq!(labels.sample_nearest(&Point3::new(2.0, 2.0, 50.0)), 0);
    }

    #[test]
    fn single_slice_axis_samples() {
        let grid = unit_grid([3, 3, 1]);
        let vol = Image::filled(grid, 5.0);
        assert_eq!(vol.sample_trilinear(&Point3::new(1.3, 0.7, 0.2)), 5.0);
        assert_eq!(vol.sample_trilinear(&Point3::new(1.3, 0.7, 0.7)), 0.0);
    }

    proptest! {
        #[test]
        fn constant_volume_samples_constant(
            x in 0.0f64..7.0, y in 0.0f64..5.0, z in 0.0f64..9.0, c in -100.0f32..100.0
        ) {
            let vol = Image::filled(unit_grid([8, 6, 10]), c);
            let s = vol.sample_trilinear(&Point3::new(x, y, z));
            prop_assert!((s - c as f64).abs() < 1e-4);
        }

        #[test]
        fn trilinear_is_linear_in_data(
            seed in 0u64..1000, qa in -12i32..12, qb in -12i32..12,
            x in -1.0f64..6.0, y in -1.0f64..6.0, z in -1.0f64..6.0
        ) {
            // quarter steps keep the combined volume exact in f32
            let (a, b) = (qa as f64 / 4.0, qb as f64 / 4.0);
            let grid = unit_grid([6, 6, 6]);
            let v1 = Image::from_fn(grid.clone(), |i, j, k| ((i * 7 + j * 3 + k) as u64 ^ seed) as f32 % 11.0);
            let v2 = Image::from_fn(grid.clone(), |i, j, k| ((i + j * 5 + k * 2) as u64 * (seed + 1)) as f32 % 13.0);
            let combo = Image::new(
                grid,
                v1.data().iter().zip(v2.data()).map(|(p, q)| (a * *p as f64 + b * *q as f64) as f32).collect(),
            ).unwrap();
            let p = Point3::new(x, y, z);
            let lhs = combo.sample_trilinear(&p);
            let rhs = a * v1.sample_trilinear(&p) + b * v2.sample_trilinear(&p);
            prop_assert!((lhs - rhs).abs() < 1e-6);
        }
    }
}
