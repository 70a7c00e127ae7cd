//! Monotone z-mapping from subject landmark heights to template landmark heights.
//!
//! Anchors are joined with a Fritsch–Carlson monotone cubic; beyond the
//! outermost anchors the map continues linearly with the boundary secant
//! slope, clamped to [`MIN_EXTRAP_SLOPE`, `MAX_EXTRAP_SLOPE`].

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkKind, LevelLandmarks};
use crate::volume::Grid;
use crate::warpfield::DeformationField;

pub const MIN_EXTRAP_SLOPE: f64 = 0.2;
pub const MAX_EXTRAP_SLOPE: f64 = 5.0;
/// Spacing of the strict-monotonicity check.
pub const CHECK_STEP_MM: f64 = 0.1;

/// One matched landmark height pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Anchor {
    pub level: u8,
    pub z_subject: f64,
    pub z_template: f64,
}

/// Increasing map subject z → template z.
#[derive(Clone, Debug)]
pub struct MonotoneZMap {
    kind: LandmarkKind,
    anchors: Vec<Anchor>,
    tangents: Vec<f64>,
    slope_lo: f64,
    slope_hi: f64,
}

impl MonotoneZMap {
    /// Build from explicit anchors (any order); heights must increase together.
    pub fn from_anchors(kind: LandmarkKind, mut anchors: Vec<Anchor>) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::InsufficientLandmarks {
                found: anchors.len(),
            });
        }
        anchors.sort_by(|a, b| a.z_subject.total_cmp(&b.z_subject));
        for pair in anchors.windows(2) {
            if !(pair[1].z_subject > pair[0].z_subject) || !(pair[1].z_template > pair[0].z_template) {
                return Err(Error::CrossingLandmarks {
                    level: pair[1].level.min(pair[0].level),
                });
            }
        }
        let n = anchors.len();
        let secant: Vec<f64> = anchors
            .windows(2)
            .map(|p| (p[1].z_template - p[0].z_template) / (p[1].z_subject - p[0].z_subject))
            .collect();
        let mut m = vec![0.0; n];
        m[0] = secant[0];
        m[n - 1] = secant[n - 2];
        for k in 1..n - 1 {
            m[k] = 0.5 * (secant[k - 1] + secant[k]);
        }
        for k in 0..n - 1 {
            let a = m[k] / secant[k];
            let b = m[k + 1] / secant[k];
            let r = a * a + b * b;
            if r > 9.0 {
                let tau = 3.0 / r.sqrt();
                m[k] = tau * a * secant[k];
                m[k + 1] = tau * b * secant[k];
            }
        }
        let map = MonotoneZMap {
            kind,
            anchors,
            tangents: m,
            slope_lo: secant[0].clamp(MIN_EXTRAP_SLOPE, MAX_EXTRAP_SLOPE),
            slope_hi: secant[n - 2].clamp(MIN_EXTRAP_SLOPE, MAX_EXTRAP_SLOPE),
        };
        map.check_strictly_increasing()?;
        Ok(map)
    }

    pub fn kind(&self) -> LandmarkKind {
        self.kind
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    /// Template z for subject z.
    pub fn eval(&self, z: f64) -> f64 {
        let a = &self.anchors;
        let n = a.len();
        if z <= a[0].z_subject {
            return a[0].z_template + self.slope_lo * (z - a[0].z_subject);
        }
        if z >= a[n - 1].z_subject {
            return a[n - 1].z_template + self.slope_hi * (z - a[n - 1].z_subject);
        }
        let k = a.partition_point(|x| x.z_subject <= z).clamp(1, n - 1) - 1;
        let h = a[k + 1].z_subject - a[k].z_subject;
        let t = (z - a[k].z_subject) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * a[k].z_template + h10 * h * self.tangents[k] + h01 * a[k + 1].z_template + h11 * h * self.tangents[k + 1]
    }

    /// Subject z for template z, by bisection.
    pub fn inverse(&self, w: f64) -> f64 {
        let a = &self.anchors;
        let n = a.len();
        if w <= a[0].z_template {
            return a[0].z_subject + (w - a[0].z_template) / self.slope_lo;
        }
        if w >= a[n - 1].z_template {
            return a[n - 1].z_subject + (w - a[n - 1].z_template) / self.slope_hi;
        }
        let k = a.partition_point(|x| x.z_template <= w).clamp(1, n - 1) - 1;
        let (mut lo, mut hi) = (a[k].z_subject, a[k + 1].z_subject);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) < w {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    fn check_strictly_increasing(&self) -> Result<()> {
        let a = &self.anchors;
        let lo = a[0].z_subject - 10.0;
        let hi = a[a.len() - 1].z_subject + 10.0;
        let steps = ((hi - lo) / CHECK_STEP_MM).ceil() as usize;
        let mut prev = self.eval(lo);
        for i in 1..=steps {
            let z = lo + i as f64 * CHECK_STEP_MM;
            let v = self.eval(z);
            if !(v > prev) {
                return Err(Error::NonInvertibleZMap {
                    z_lo: z - CHECK_STEP_MM,
                    z_hi: z,
                });
            }
            prev = v;
        }
        Ok(())
    }

    /// Write `kind,level,z_subject,z_template` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            kind: LandmarkKind,
            level: u8,
            z_subject: f64,
            z_template: f64,
        }
        let rows: Vec<Row> = self
            .anchors
            .iter()
            .map(|a| Row {
                kind: self.kind,
                level: a.level,
                z_subject: a.z_subject,
                z_template: a.z_template,
            })
            .collect();
        crate::io_util::write_csv(path, &rows)
    }
}

/// Map matching the common levels of two landmark sets (z in straightened space).
pub fn build_monotone_z_map(subject: &LevelLandmarks, template: &LevelLandmarks) -> Result<MonotoneZMap> {
    let anchors: Vec<Anchor> = subject
        .entries()
        .iter()
        .filter_map(|(&level, p)| {
            template.get(level).map(|q| Anchor {
                level,
                z_subject: p.z,
                z_template: q.z,
            })
        })
        .collect();
    if anchors.len() < 2 {
        return Err(Error::InsufficientLandmarks {
            found: anchors.len(),
        });
    }
    // level order must agree on both sides
    for pair in anchors.windows(2) {
        let subj_down = pair[1].z_subject < pair[0].z_subject;
        let tmpl_down = pair[1].z_template < pair[0].z_template;
        if subj_down != tmpl_down {
            return Err(Error::CrossingLandmarks { level: pair[0].level });
        }
    }
    MonotoneZMap::from_anchors(subject.kind, anchors)
}

/// Pullback field subject → template: template z reads subject at `m⁻¹(z)`.
pub fn zmap_to_field(m: &MonotoneZMap, grid: &Grid) -> Result<DeformationField> {
    let dz: Vec<f64> = (0..grid.dims()[2])
        .map(|k| {
            let z = grid.slice_z(k);
            m.inverse(z) - z
        })
        .collect();
    DeformationField::from_slice_z(grid.clone(), &dz)
}

/// Pullback field template → subject: subject z reads template at `m(z)`.
pub fn zmap_to_inverse_field(m: &MonotoneZMap, grid: &Grid) -> Result<DeformationField> {
    let dz: Vec<f64> = (0..grid.dims()[2])
        .map(|k| {
            let z = grid.slice_z(k);
            m.eval(z) - z
        })
        .collect();
    DeformationField::from_slice_z(grid.clone(), &dz)
}
