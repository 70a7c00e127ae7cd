//! Per-level landmark points from rootlet label maps and disc labels.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// Which anatomical structure a landmark set was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkKind {
    Rootlets,
    Discs,
}

impl fmt::Display for LandmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LandmarkKind::Rootlets => "rootlets",
            LandmarkKind::Discs => "discs",
        })
    }
}

impl std::str::FromStr for LandmarkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rootlets" => Ok(LandmarkKind::Rootlets),
            "discs" => Ok(LandmarkKind::Discs),
            other => Err(Error::InvalidParameter(format!(
                "landmark mode must be `rootlets` or `discs`, got `{other}`"
            ))),
        }
    }
}

/// Level index → world point (mm), ordered by level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLandmarks {
    pub kind: LandmarkKind,
    entries: BTreeMap<u8, Point3<f64>>,
    pub source_dims: [usize; 3],
    pub source_spacing: [f64; 3],
}

impl LevelLandmarks {
    /// Build and validate: at least two levels, z decreasing with level.
    pub fn new(
        kind: LandmarkKind,
        entries: BTreeMap<u8, Point3<f64>>,
        source_dims: [usize; 3],
        source_spacing: [f64; 3],
    ) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::InsufficientLandmarks {
                found: entries.len(),
            });
        }
        for ((&upper, pu), (&lower, pl)) in entries.iter().zip(entries.iter().skip(1)) {
            if !(pu.z > pl.z) {
                return Err(Error::NonAnatomicalOrdering {
                    upper,
                    upper_z: pu.z,
                    lower,
                    lower_z: pl.z,
                });
            }
        }
        Ok(LevelLandmarks {
            kind,
            entries,
            source_dims,
            source_spacing,
        })
    }

    pub fn entries(&self) -> &BTreeMap<u8, Point3<f64>> {
        &self.entries
    }

    pub fn get(&self, level: u8) -> Option<&Point3<f64>> {
        self.entries.get(&level)
    }

    pub fn levels(&self) -> Vec<u8> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Interior levels missing between the first and last present level.
    pub fn gaps(&self) -> Vec<u8> {
        let levels = self.levels();
        match (levels.first(), levels.last()) {
            (Some(&lo), Some(&hi)) => (lo..=hi).filter(|l| !self.entries.contains_key(l)).collect(),
            _ => Vec::new(),
        }
    }

    /// Apply `f` to every point (e.g. a transform into straightened space).
    pub fn map_points(&self, mut f: impl FnMut(&Point3<f64>) -> Result<Point3<f64>>) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|(&l, p)| Ok((l, f(p)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        LevelLandmarks::new(self.kind, entries, self.source_dims, self.source_spacing)
    }

    /// Write `level,x,y,z` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            kind: LandmarkKind,
            level: u8,
            x_mm: f64,
            y_mm: f64,
            z_mm: f64,
        }
        let rows: Vec<Row> = self
            .entries
            .iter()
            .map(|(&level, p)| Row {
                kind: self.kind,
                level,
                x_mm: p.x,
                y_mm: p.y,
                z_mm: p.z,
            })
            .collect();
        crate::io_util::write_csv(path, &rows)
    }
}

/// Unweighted centre of mass of every nonzero label value, in world mm.
pub fn label_centers(labels: &LabelMap) -> BTreeMap<u8, Point3<f64>> {
    let grid = labels.grid();
    let mut sums: BTreeMap<u8, ([f64; 3], usize)> = BTreeMap::new();
    for (idx, &v) in labels.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let [i, j, k] = grid.coords(idx);
        let e = sums.entry(v).or_insert(([0.0; 3], 0));
        e.0[0] += i as f64;
        e.0[1] += j as f64;
        e.0[2] += k as f64;
        e.1 += 1;
    }
    // averaging indices then mapping is exact because the affine is linear
    sums.into_iter()
        .map(|(l, (s, n))| {
            let n = n as f64;
            (l, grid.voxel_to_world([s[0] / n, s[1] / n, s[2] / n]))
        })
        .collect()
}

/// Rootlet level centres of mass (levels 2..=8).
pub fn level_centers_of_mass(labels: &LabelMap) -> Result<LevelLandmarks> {
    let centers = label_centers(labels);
    if let Some(&bad) = centers.keys().find(|&&l| !(2..=8).contains(&l)) {
        return Err(Error::InvalidVolume(format!(
            "rootlet label map contains value {bad}; expected 0 or 2..=8"
        )));
    }
    LevelLandmarks::new(
        LandmarkKind::Rootlets,
        centers,
        labels.dims(),
        labels.grid().spacing(),
    )
}

/// Single-voxel disc labels read off as points.
pub fn disc_landmarks(labels: &LabelMap) -> Result<LevelLandmarks> {
    let grid = labels.grid();
    let mut found: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for (idx, &v) in labels.data().iter().enumerate() {
        if v != 0 {
            let e = found.entry(v).or_insert((idx, 0));
            e.1 += 1;
        }
    }
    if let Some((&value, &(_, count))) = found.iter().find(|(_, (_, c))| *c > 1) {
        return Err(Error::DuplicateDisc { value, count });
    }
    let entries = found
        .into_iter()
        .map(|(l, (idx, _))| {
            let [i, j, k] = grid.coords(idx);
            (l, grid.center_of(i, j, k))
        })
        .collect();
    LevelLandmarks::new(LandmarkKind::Discs, entries, labels.dims(), grid.spacing())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::axis_aligned(dims, [1.0; 3], [0.0; 3]).unwrap()
    }

    fn with_voxels(dims: [usize; 3], vox: &[([usize; 3], u8)]) -> LabelMap {
        let mut m = LabelMap::zeros(grid(dims));
        for &([i, j, k], v) in vox {
            m.set(i, j, k, v);
        }
        m
    }

    #[test]
    fn single_voxel_center() {
        let m = with_voxels([20, 20, 20], &[([10, 10, 10], 2), ([10, 10, 2], 3)]);
        let lm = level_centers_of_mass(&m).unwrap();
        assert_eq!(lm.get(2).unwrap(), &Point3::new(10.0, 10.0, 10.0));
        assert_eq!(lm.kind, LandmarkKind::Rootlets);
    }

    #[test]
    fn symmetric_pair_midpoint() {
        let m = with_voxels(
            [4, 4, 60],
            &[([1, 1, 40], 3), ([1, 1, 44], 3), ([1, 1, 10], 4)],
        );
        let lm = level_centers_of_mass(&m).unwrap();
        assert_eq!(lm.get(3).unwrap().z, 42.0);
    }

    #[test]
    fn matches_brute_force_mean() {
        let vox = [([2usize, 1, 30usize], 4u8), ([3, 1, 31], 4), ([2, 2, 35], 4), ([0, 0, 50], 3)];
        let m = with_voxels([5, 5, 60], &vox);
        let lm = level_centers_of_mass(&m).unwrap();
        let pts: Vec<[f64; 3]> = vox
            .iter()
            .filter(|(_, v)| *v == 4)
            .map(|(c, _)| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        let mean = |a: usize| pts.iter().map(|p| p[a]).sum::<f64>() / pts.len() as f64;
        let c = lm.get(4).unwrap();
        assert!((c.x - mean(0)).abs() < 1e-12);
        assert!((c.y - mean(1)).abs() < 1e-12);
        assert!((c.z - 32.0).abs() < 1e-12 && (c.z - mean(2)).abs() < 1e-12);
    }

    #[test]
    fn fewer_than_two_levels_is_an_error() {
        let m = with_voxels([5, 5, 5], &[([1, 1, 1], 2)]);
        assert!(matches!(
            level_centers_of_mass(&m),
            Err(Error::InsufficientLandmarks { found: 1 })
        ));
    }

    #[test]
    fn inverted_ordering_is_an_error() {
        // C3 above C2
        let m = with_voxels([5, 5, 30], &[([1, 1, 5], 2), ([1, 1, 20], 3)]);
        assert!(matches!(
            level_centers_of_mass(&m),
            Err(Error::NonAnatomicalOrdering { upper: 2, lower: 3, .. })
        ));
    }

    #[test]
    fn foreign_rootlet_value_is_rejected() {
        let m = with_voxels([5, 5, 30], &[([1, 1, 20], 2), ([1, 1, 5], 9)]);
        assert!(level_centers_of_mass(&m).is_err());
    }

    #[test]
    fn discs_read_off_directly() {
        let m = with_voxels([20, 20, 60], &[([8, 9, 50], 3), ([8, 9, 38], 4)]);
        let lm = disc_landmarks(&m).unwrap();
        assert_eq!(lm.kind, LandmarkKind::Discs);
        assert_eq!(lm.get(3).unwrap(), &Point3::new(8.0, 9.0, 50.0));
        assert_eq!(lm.get(4).unwrap(), &Point3::new(8.0, 9.0, 38.0));
    }

    #[test]
    fn empty_disc_map_is_insufficient() {
        let m = LabelMap::zeros(grid([4, 4, 4]));
        assert!(matches!(
            disc_landmarks(&m),
            Err(Error::InsufficientLandmarks { found: 0 })
        ));
    }

    #[test]
    fn duplicated_disc_names_value() {
        let m = with_voxels([10, 10, 60], &[([1, 1, 50], 3), ([2, 1, 50], 3), ([1, 1, 30], 4)]);
        let err = disc_landmarks(&m).unwrap_err();
        assert!(matches!(err, Error::DuplicateDisc { value: 3, count: 2 }));
        assert!(err.to_string().contains("disc label 3"));
    }

    #[test]
    fn gaps_lists_missing_interior_levels() {
        let m = with_voxels(
            [4, 4, 60],
            &[([1, 1, 50], 2), ([1, 1, 40], 3), ([1, 1, 20], 5)],
        );
        let lm = level_centers_of_mass(&m).unwrap();
        assert_eq!(lm.gaps(), vec![4]);
    }

    fn random_levels() -> impl Strategy<Value = Vec<([usize; 3], u8)>> {
        // each level owns a z-band so ordering is always anatomical
        proptest::collection::vec((0usize..6, 0usize..6, 0usize..5), 1..6).prop_flat_map(|vox| {
            let n = vox.len();
            proptest::collection::vec(Just(vox.clone()), 7).prop_map(move |bands| {
                let mut out = Vec::new();
                for (li, band) in bands.iter().enumerate() {
                    for (t, &(i, j, dz)) in band.iter().enumerate().take(n) {
                        let level = li as u8 + 2;
                        let k = 60 - 8 * li - dz - (t % 2);
                        out.push(([i, j, k], level));
                    }
                }
                out
            })
        })
    }

    proptest! {
        #[test]
        fn translation_equivariant(vox in random_levels(), tx in -50.0f64..50.0, ty in -50.0f64..50.0, tz in -50.0f64..50.0) {
            let m = with_voxels([6, 6, 64], &vox);
            let t = Vector3::new(tx, ty, tz);
            let shifted = m.clone().with_grid(m.grid().translated(t)).unwrap();
            let a = level_centers_of_mass(&m).unwrap();
            let b = level_centers_of_mass(&shifted).unwrap();
            for (l, p) in a.entries() {
                let q = b.get(*l).unwrap();
                prop_assert!((q - (p + t)).norm() < 1e-9);
            }
        }

        #[test]
        fn deleting_a_level_removes_only_that_entry(vox in random_levels(), drop in 2u8..=8) {
            let m = with_voxels([6, 6, 64], &vox);
            let removed = m.map(|v| if v == drop { 0 } else { v });
            let a = level_centers_of_mass(&m).unwrap();
            let b = level_centers_of_mass(&removed).unwrap();
            prop_assert!(b.get(drop).is_none());
            prop_assert_eq!(b.len(), a.len() - 1);
            for (l, p) in b.entries() {
                prop_assert_eq!(a.get(*l).unwrap(), p);
            }
        }

        #[test]
        fn center_inside_bounding_box(vox in random_levels()) {
            let m = with_voxels([6, 6, 64], &vox);
            let lm = level_centers_of_mass(&m).unwrap();
            for (l, c) in lm.entries() {
                let pts: Vec<_> = vox.iter().filter(|(_, v)| v == l).map(|(p, _)| *p).collect();
                for a in 0..3 {
                    let lo = pts.iter().map(|p| p[a]).min().unwrap() as f64;
                    let hi = pts.iter().map(|p| p[a]).max().unwrap() as f64;
                    prop_assert!(c[a] >= lo - 1e-9 && c[a] <= hi + 1e-9);
                }
            }
        }
    }
}
