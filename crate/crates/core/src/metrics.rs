//! Validation measurements: per-level rootlet overlap, slice-wise CSA with
//! normalisation and enlargement detection, and cohort summaries.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io_util::write_csv;
use crate::volume::LabelMap;

pub const DEFAULT_SMOOTH_WINDOW: usize = 45;
/// Slices below / above the C2–C3 disc slice used for normalisation.
pub const NORM_BELOW: i64 = 10;
pub const NORM_ABOVE: i64 = 9;

/// Denominator of the overlap fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapConvention {
    /// `|slice_inf - slice_sup|`
    Literal,
    /// `|slice_inf - slice_sup| + 1`
    Inclusive,
}

impl fmt::Display for OverlapConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OverlapConvention::Literal => "literal",
            OverlapConvention::Inclusive => "inclusive",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOverlap {
    pub level: u8,
    /// Most superior subject slice of the level (None when absent).
    pub slice_sup: Option<usize>,
    pub slice_inf: Option<usize>,
    pub length_overlap: usize,
    /// Undefined when the level is missing from either volume or the
    /// denominator is zero.
    pub overlap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    pub convention: OverlapConvention,
    pub levels: Vec<LevelOverlap>,
}

impl OverlapReport {
    pub fn level(&self, level: u8) -> Option<&LevelOverlap> {
        self.levels.iter().find(|l| l.level == level)
    }

    /// Mean of the defined per-level overlaps.
    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.levels.iter().filter_map(|l| l.overlap).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Set of axial slices that contain `label`, per label.
fn slices_per_label(m: &LabelMap) -> std::collections::BTreeMap<u8, BTreeSet<usize>> {
    let n = m.grid().slice_len();
    let mut out: std::collections::BTreeMap<u8, BTreeSet<usize>> = Default::default();
    for (idx, &v) in m.data().iter().enumerate() {
        if v != 0 {
            out.entry(v).or_default().insert(idx / n);
        }
    }
    out
}

/// Per-level slice overlap of subject rootlets (in template space) with the template rootlets.
pub fn overlap_per_level(
    subject: &LabelMap,
    template: &LabelMap,
    convention: OverlapConvention,
) -> Result<OverlapReport> {
    if !subject.grid().same_space(template.grid()) {
        return Err(Error::SpaceMismatch("overlap needs both label maps on the template grid".into()));
    }
    let s = slices_per_label(subject);
    let t = slices_per_label(template);
    let all: BTreeSet<u8> = s.keys().chain(t.keys()).copied().collect();
    let levels = all
        .into_iter()
        .map(|level| {
            let (Some(ss), Some(ts)) = (s.get(&level), t.get(&level)) else {
                let own = s.get(&level);
                return LevelOverlap {
                    level,
                    slice_sup: own.and_then(|x| x.last().copied()),
                    slice_inf: own.and_then(|x| x.first().copied()),
                    length_overlap: 0,
                    overlap: None,
                };
            };
            let sup = *ss.last().expect("nonempty");
            let inf = *ss.first().expect("nonempty");
            let length = ss.intersection(ts).count();
            let denom = match convention {
                OverlapConvention::Literal => sup - inf,
                OverlapConvention::Inclusive => sup - inf + 1,
            };
            LevelOverlap {
                level,
                slice_sup: Some(sup),
                slice_inf: Some(inf),
                length_overlap: length,
                overlap: (denom > 0).then(|| length as f64 / denom as f64),
            }
        })
        .collect();
    Ok(OverlapReport { convention, levels })
}

/// Cord cross-sectional area (mm²) of every axial slice.
pub fn csa_slicewise(cord: &LabelMap) -> Vec<f64> {
    let [sx, sy, _] = cord.grid().spacing();
    let n = cord.grid().slice_len();
    cord.data()
        .chunks(n)
        .map(|s| s.iter().filter(|&&v| v != 0).count() as f64 * sx * sy)
        .collect()
}

/// Divide by the mean over slices `[c23 - 10, c23 + 9]`.
pub fn normalize_csa(profile: &[f64], c23_slice: i64) -> Result<Vec<f64>> {
    let (lo, hi) = (c23_slice - NORM_BELOW, c23_slice + NORM_ABOVE);
    if lo < 0 || hi >= profile.len() as i64 {
        return Err(Error::WindowOutOfRange {
            lo,
            hi,
            len: profile.len(),
        });
    }
    let w = &profile[lo as usize..=hi as usize];
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    if mean == 0.0 {
        return Err(Error::ZeroWindowMean);
    }
    Ok(profile.iter().map(|v| v / mean).collect())
}

/// Centred moving average; the window shrinks symmetrically near the ends.
pub fn moving_average(profile: &[f64], window: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 {
        return Err(Error::InvalidParameter(format!("smoothing window must be odd, got {window}")));
    }
    let half = window / 2;
    let n = profile.len();
    Ok((0..n)
        .map(|i| {
            let w = half.min(i).min(n - 1 - i);
            let s = &profile[i - w..=i + w];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect())
}

/// Smooth and locate the maximum within `search` (inclusive slice range).
/// Ties resolve to the most superior (highest) slice.
pub fn smooth_and_find_enlargement(
    profile: &[f64],
    window: usize,
    search: (usize, usize),
) -> Result<(Vec<f64>, usize)> {
    let smoothed = moving_average(profile, window)?;
    let (lo, hi) = search;
    if lo > hi || hi >= profile.len() {
        return Err(Error::EmptyRange(format!(
            "enlargement search range [{lo}, {hi}] in profile of {} slices",
            profile.len()
        )));
    }
    let mut best = lo;
    for k in lo..=hi {
        if smoothed[k] >= smoothed[best] {
            best = k;
        }
    }
    Ok((smoothed, best))
}

/// Raw, normalised and smoothed CSA with the detected enlargement slice.
#[derive(Clone, Debug)]
pub struct CsaProfile {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub enlargement: usize,
}

pub fn csa_profile(cord: &LabelMap, c23_slice: i64, window: usize, search: (usize, usize)) -> Result<CsaProfile> {
    let raw = csa_slicewise(cord);
    let normalized = normalize_csa(&raw, c23_slice)?;
    let (smoothed, enlargement) = smooth_and_find_enlargement(&normalized, window, search)?;
    Ok(CsaProfile {
        raw,
        normalized,
        smoothed,
        enlargement,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub level: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl SummaryRow {
    pub fn from_values(metric: &str, level: &str, v: &[f64]) -> Option<Self> {
        mean_std(v).map(|(mean, std)| SummaryRow {
            metric: metric.to_string(),
            level: level.to_string(),
            mean,
            std,
            n: v.len(),
        })
    }
}

/// Per-level and pooled overlap statistics across subjects.
pub fn cohort_stats(metric: &str, reports: &[OverlapReport]) -> Vec<SummaryRow> {
    let levels: BTreeSet<u8> = reports.iter().flat_map(|r| r.levels.iter().map(|l| l.level)).collect();
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for level in levels {
        let v: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.level(level).and_then(|l| l.overlap))
            .collect();
        all.extend_from_slice(&v);
        rows.extend(SummaryRow::from_values(metric, &format!("C{level}"), &v));
    }
    rows.extend(SummaryRow::from_values(metric, "all", &all));
    rows
}

#[derive(Serialize)]
struct OverlapRow<'a> {
    subject: &'a str,
    level: u8,
    slice_sup: Option<usize>,
    slice_inf: Option<usize>,
    length_overlap: usize,
    overlap: Option<f64>,
    convention: OverlapConvention,
}

pub fn write_overlap_csv(path: &Path, reports: &[(String, OverlapReport)]) -> Result<()> {
    let rows: Vec<OverlapRow> = reports
        .iter()
        .flat_map(|(subject, r)| {
            r.levels.iter().map(move |l| OverlapRow {
                subject,
                level: l.level,
                slice_sup: l.slice_sup,
                slice_inf: l.slice_inf,
                length_overlap: l.length_overlap,
                overlap: l.overlap,
                convention: r.convention,
            })
        })
        .collect();
    write_csv(path, &rows)
}

#[derive(Serialize)]
struct CsaRow<'a> {
    subject: &'a str,
    slice: usize,
    csa_mm2: f64,
    csa_norm: f64,
    csa_smooth: f64,
}

pub fn write_csa_csv(path: &Path, profiles: &[(String, CsaProfile)]) -> Result<()> {
    let rows: Vec<CsaRow> = profiles
        .iter()
        .flat_map(|(subject, p)| {
            (0..p.raw.len()).map(move |k| CsaRow {
                subject,
                slice: k,
                csa_mm2: p.raw[k],
                csa_norm: p.normalized[k],
                csa_smooth: p.smoothed[k],
            })
        })
        .collect();
    write_csv(path, &rows)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows)
}
