//! Slice-wise isotropic in-plane scaling of the cord about its centroid.

use std::path::Path;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io_util::write_csv;
use crate::volume::{Grid, LabelMap};
use crate::warpfield::{DeformationField, FieldKind};

pub const DEFAULT_WINDOW: usize = 15;
pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;
/// Largest relative change of the smoothed scale between adjacent slices.
pub const MAX_JUMP: f64 = 0.10;
/// Slices whose area is below this fraction of the median are unreliable.
const MIN_AREA_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SliceScale {
    pub slice: usize,
    pub z: f64,
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub scale: f64,
}

/// Smoothed per-slice scale factors over a contiguous slice range.
#[derive(Clone, Debug)]
pub struct SliceScaleProfile {
    grid: Grid,
    slices: Vec<SliceScale>,
}

impl SliceScaleProfile {
    pub fn slices(&self) -> &[SliceScale] {
        &self.slices
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Profile entry for slice `k`, clamped to the ends of the range.
    pub fn at(&self, k: usize) -> &SliceScale {
        let first = self.slices[0].slice;
        let i = k.saturating_sub(first).min(self.slices.len() - 1);
        &self.slices[i]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            z: f64,
            centroid_x: f64,
            centroid_y: f64,
            scale: f64,
        }
        let rows: Vec<Row> = self
            .slices
            .iter()
            .map(|s| Row {
                z: s.z,
                centroid_x: s.centroid_x,
                centroid_y: s.centroid_y,
                scale: s.scale,
            })
            .collect();
        write_csv(path, &rows)
    }
}

/// Area (voxel count) and centroid of every axial slice.
fn slice_stats(m: &LabelMap) -> Vec<(usize, [f64; 2])> {
    let [nx, ny, nz] = m.dims();
    let g = m.grid();
    (0..nz)
        .map(|k| {
            let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
            for j in 0..ny {
                for i in 0..nx {
                    if m.get(i, j, k) != 0 {
                        let p = g.center_of(i, j, k);
                        n += 1;
                        sx += p.x;
                        sy += p.y;
                    }
                }
            }
            let c = if n > 0 { [sx / n as f64, sy / n as f64] } else { [0.0; 2] };
            (n, c)
        })
        .collect()
}

/// Centred moving average whose window shrinks at the ends.
fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let w = half.min(i).min(n - 1 - i);
            let s = &values[i - w..=i + w];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scale profile with the default 15-slice smoothing window.
pub fn compute_scale_profile(subject_cord: &LabelMap, template_cord: &LabelMap) -> Result<SliceScaleProfile> {
    compute_scale_profile_with(subject_cord, template_cord, DEFAULT_WINDOW)
}

pub fn compute_scale_profile_with(
    subject_cord: &LabelMap,
    template_cord: &LabelMap,
    window: usize,
) -> Result<SliceScaleProfile> {
    let grid = template_cord.grid().clone();
    if !grid.same_space(subject_cord.grid()) {
        return Err(Error::SpaceMismatch("subject and template cord masks differ in grid".into()));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidParameter(format!("smoothing window must be odd, got {window}")));
    }
    let subj = slice_stats(subject_cord);
    let tmpl = slice_stats(template_cord);
    let both: Vec<usize> = (0..subj.len()).filter(|&k| subj[k].0 > 0 && tmpl[k].0 > 0).collect();
    if both.is_empty() {
        return Err(Error::EmptyRange("subject and template cords share no axial slice".into()));
    }
    let med_s = median(both.iter().map(|&k| subj[k].0 as f64).collect());
    let med_t = median(both.iter().map(|&k| tmpl[k].0 as f64).collect());
    let ok = |k: usize| {
        subj[k].0 as f64 >= MIN_AREA_FRACTION * med_s && tmpl[k].0 as f64 >= MIN_AREA_FRACTION * med_t
    };
    // longest contiguous run of reliable slices
    let (mut best, mut start) = ((0usize, 0usize), None);
    for k in 0..=subj.len() {
        match (k < subj.len() && ok(k), start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                if k - s > best.1 - best.0 {
                    best = (s, k);
                }
                start = None;
            }
            _ => {}
        }
    }
    let (mut lo, mut hi) = best;
    // the cord is cut obliquely at the ends of the field of view
    let trim = window / 2;
    if hi - lo > 4 * trim {
        lo += trim;
        hi -= trim;
    }
    if hi <= lo {
        return Err(Error::EmptyRange("no reliable slices in common cord range".into()));
    }
    let raw: Vec<f64> = (lo..hi).map(|k| (tmpl[k].0 as f64 / subj[k].0 as f64).sqrt()).collect();
    let cx: Vec<f64> = (lo..hi).map(|k| subj[k].1[0]).collect();
    let cy: Vec<f64> = (lo..hi).map(|k| subj[k].1[1]).collect();
    let (s, cx, cy) = (smooth(&raw, window), smooth(&cx, window), smooth(&cy, window));

    let mut slices = Vec::with_capacity(hi - lo);
    for (i, k) in (lo..hi).enumerate() {
        let z = grid.slice_z(k);
        if !(MIN_SCALE..=MAX_SCALE).contains(&s[i]) {
            return Err(Error::ScaleOutOfBounds { z, scale: s[i] });
        }
        if i > 0 {
            let jump = (s[i] / s[i - 1] - 1.0).abs();
            if jump > MAX_JUMP {
                return Err(Error::ScaleDiscontinuity { z, jump: 100.0 * jump });
            }
        }
        slices.push(SliceScale {
            slice: k,
            z,
            centroid_x: cx[i],
            centroid_y: cy[i],
            scale: s[i],
        });
    }
    Ok(SliceScaleProfile { grid, slices })
}

/// Field that scales the subject cord by `s(z)` about its centroid.
///
/// Output point `p` reads the subject at `c + (p - c)/s`, so a subject radius
/// `r` appears as `s·r` on output.
pub fn scale_profile_to_field(p: &SliceScaleProfile, grid: &Grid) -> Result<DeformationField> {
    rasterize(p, grid, |s| 1.0 / s - 1.0)
}

/// Exact inverse of [`scale_profile_to_field`]: reads at `c + s·(p - c)`.
pub fn scale_profile_to_inverse_field(p: &SliceScaleProfile, grid: &Grid) -> Result<DeformationField> {
    rasterize(p, grid, |s| s - 1.0)
}

fn rasterize(p: &SliceScaleProfile, grid: &Grid, gain: impl Fn(f64) -> f64 + Sync) -> Result<DeformationField> {
    let pg = p.grid();
    DeformationField::from_fn(grid.clone(), FieldKind::Dense3d, |q| {
        let k = pg.z_to_slice(q.z).round().clamp(0.0, (pg.dims()[2] - 1) as f64) as usize;
        let e = p.at(k);
        let g = gain(e.scale);
        Vector3::new(g * (q.x - e.centroid_x), g * (q.y - e.centroid_y), 0.0)
    })
}
