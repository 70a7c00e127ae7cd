//! Cohort runs: both landmark modes per subject, overlap and CSA reports,
//! per-mode mean images and summary statistics.

use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io_util::write_csv;
use crate::landmarks::LandmarkKind;
use crate::metrics::{
    csa_profile, cohort_stats, overlap_per_level, write_csa_csv, write_overlap_csv, write_summary_csv, CsaProfile,
    OverlapConvention, OverlapReport, SummaryRow, DEFAULT_SMOOTH_WINDOW,
};
use crate::nifti::{load_volume, save_volume};
use crate::phantom::{generate_phantom, make_cohort, CohortModel, PhantomSpec, FILES};
use crate::pipeline::{register, PipelineConfig, SubjectInputs, TemplateInputs};
use crate::si_refine::SIRegParams;
use crate::volume::{Image, LabelMap};
use crate::warpfield::apply_warp_mask;

pub const MODES: [LandmarkKind; 2] = [LandmarkKind::Rootlets, LandmarkKind::Discs];

#[derive(Clone, Debug)]
pub struct CohortConfig {
    pub si: SIRegParams,
    pub skip_xy_scale: bool,
    pub convention: OverlapConvention,
    /// Template slices searched for the enlargement maximum (inclusive).
    pub search: (usize, usize),
    pub smooth_window: usize,
    pub jobs: usize,
}

impl CohortConfig {
    pub fn new(search: (usize, usize)) -> Self {
        CohortConfig {
            si: SIRegParams::default(),
            skip_xy_scale: false,
            convention: OverlapConvention::Inclusive,
            search,
            smooth_window: DEFAULT_SMOOTH_WINDOW,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CohortSubject {
    pub name: String,
    pub inputs: SubjectInputs,
}

#[derive(Clone, Debug)]
pub struct ModeOutcome {
    pub overlap: OverlapReport,
    /// Cord CSA in template space without the in-plane scaling step.
    pub csa: CsaProfile,
    pub warped_t2: Image,
}

#[derive(Clone, Debug)]
pub struct Failure {
    pub message: String,
    pub numerical: bool,
}

#[derive(Clone, Debug)]
pub struct SubjectOutcome {
    pub name: String,
    /// Indexed like [`MODES`].
    pub modes: [std::result::Result<ModeOutcome, Failure>; 2],
}

#[derive(Clone, Debug)]
pub struct CohortReport {
    pub convention: OverlapConvention,
    pub subjects: Vec<SubjectOutcome>,
    pub summary: Vec<SummaryRow>,
}

fn mode_index(mode: LandmarkKind) -> usize {
    MODES.iter().position(|&m| m == mode).expect("known mode")
}

/// Template slice of the C2–C3 disc (label 3).
pub fn c23_slice(template: &TemplateInputs) -> Result<i64> {
    let n = template.discs.grid().slice_len();
    template
        .discs
        .data()
        .iter()
        .position(|&v| v == 3)
        .map(|idx| (idx / n) as i64)
        .ok_or_else(|| Error::InvalidVolume("template has no C2-C3 disc label (value 3)".into()))
}

fn run_mode(
    subject: &SubjectInputs,
    template: &TemplateInputs,
    cfg: &CohortConfig,
    mode: LandmarkKind,
    c23: i64,
) -> Result<ModeOutcome> {
    let pcfg = PipelineConfig {
        mode,
        skip_xy_scale: cfg.skip_xy_scale,
        si: cfg.si.clone(),
    };
    let reg = register(subject, template, &pcfg)?;
    let rootlets = subject
        .rootlets
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("overlap needs subject rootlet labels".into()))?;
    let warped = reg.labels_to_template(rootlets);
    let overlap = overlap_per_level(&warped, &template.rootlets, cfg.convention)?;
    let cord = apply_warp_mask(&subject.cord, &reg.forward_without_xy(), template.grid());
    let csa = csa_profile(&cord, c23, cfg.smooth_window, cfg.search)?;
    Ok(ModeOutcome {
        overlap,
        csa,
        warped_t2: reg.image_to_template(&subject.t2),
    })
}

/// Register every subject in both modes; per-subject failures are recorded.
pub fn run_cohort(template: &TemplateInputs, subjects: &[CohortSubject], cfg: &CohortConfig) -> Result<CohortReport> {
    if subjects.is_empty() {
        return Err(Error::InvalidParameter("cohort has no subjects".into()));
    }
    let c23 = c23_slice(template)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let outcomes: Vec<SubjectOutcome> = pool.install(|| {
        subjects
            .par_iter()
            .map(|s| {
                let modes = MODES.map(|mode| {
                    run_mode(&s.inputs, template, cfg, mode, c23).map_err(|e| {
                        warn!("{} ({mode}): {e}", s.name);
                        Failure {
                            message: e.to_string(),
                            numerical: e.is_numerical(),
                        }
                    })
                });
                info!("{} done", s.name);
                SubjectOutcome {
                    name: s.name.clone(),
                    modes,
                }
            })
            .collect()
    });
    let mut summary = Vec::new();
    for mode in MODES {
        let i = mode_index(mode);
        let ok: Vec<&ModeOutcome> = outcomes.iter().filter_map(|o| o.modes[i].as_ref().ok()).collect();
        let reports: Vec<OverlapReport> = ok.iter().map(|m| m.overlap.clone()).collect();
        summary.extend(cohort_stats(&format!("overlap_{}_{mode}", cfg.convention), &reports));
        let z: Vec<f64> = ok.iter().map(|m| m.csa.enlargement as f64).collect();
        summary.extend(SummaryRow::from_values(&format!("enlargement_slice_{mode}"), "all", &z));
    }
    Ok(CohortReport {
        convention: cfg.convention,
        subjects: outcomes,
        summary,
    })
}

#[derive(Serialize)]
struct FailureRow<'a> {
    subject: &'a str,
    mode: LandmarkKind,
    numerical: bool,
    error: &'a str,
}

#[derive(Serialize)]
struct EnlargementRow<'a> {
    subject: &'a str,
    mode: LandmarkKind,
    slice: usize,
}

impl CohortReport {
    pub fn ok(&self, mode: LandmarkKind) -> impl Iterator<Item = (&str, &ModeOutcome)> {
        let i = mode_index(mode);
        self.subjects
            .iter()
            .filter_map(move |s| s.modes[i].as_ref().ok().map(|m| (s.name.as_str(), m)))
    }

    pub fn failures(&self) -> Vec<(&str, LandmarkKind, &Failure)> {
        let mut out = Vec::new();
        for s in &self.subjects {
            for (mode, r) in MODES.iter().zip(&s.modes) {
                if let Err(f) = r {
                    out.push((s.name.as_str(), *mode, f));
                }
            }
        }
        out
    }

    pub fn summary_row(&self, metric: &str, level: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.metric == metric && r.level == level)
    }

    /// Overlap summary row of `mode` at `level` ("all" or "C2".."C8").
    pub fn overlap(&self, mode: LandmarkKind, level: &str) -> Option<&SummaryRow> {
        self.summary_row(&format!("overlap_{}_{mode}", self.convention), level)
    }

    pub fn enlargement(&self, mode: LandmarkKind) -> Option<&SummaryRow> {
        self.summary_row(&format!("enlargement_slice_{mode}"), "all")
    }

    /// Voxel-wise mean of the warped images of `mode`.
    pub fn mean_image(&self, mode: LandmarkKind) -> Option<Image> {
        let mut it = self.ok(mode);
        let (_, first) = it.next()?;
        let mut acc: Vec<f64> = first.warped_t2.data().iter().map(|&v| v as f64).collect();
        let mut n = 1.0;
        for (_, m) in it {
            acc.iter_mut().zip(m.warped_t2.data()).for_each(|(a, &v)| *a += v as f64);
            n += 1.0;
        }
        let grid = first.warped_t2.grid().clone();
        Image::new(grid, acc.into_iter().map(|v| (v / n) as f32).collect()).ok()
    }

    /// Write overlap, CSA, enlargement, failure and summary CSVs plus mean images.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for mode in MODES {
            let overlaps: Vec<(String, OverlapReport)> =
                self.ok(mode).map(|(n, m)| (n.to_string(), m.overlap.clone())).collect();
            write_overlap_csv(&dir.join(format!("overlap_{mode}.csv")), &overlaps)?;
            let csa: Vec<(String, CsaProfile)> = self.ok(mode).map(|(n, m)| (n.to_string(), m.csa.clone())).collect();
            write_csa_csv(&dir.join(format!("csa_{mode}.csv")), &csa)?;
            if let Some(img) = self.mean_image(mode) {
                save_volume(&img, &dir.join(format!("mean_t2_{mode}.nii.gz")))?;
            }
        }
        let enl: Vec<EnlargementRow> = MODES
            .iter()
            .flat_map(|&mode| {
                self.ok(mode).map(move |(subject, m)| EnlargementRow {
                    subject,
                    mode,
                    slice: m.csa.enlargement,
                })
            })
            .collect();
        write_csv(&dir.join("enlargement.csv"), &enl)?;
        let fails: Vec<FailureRow> = self
            .failures()
            .into_iter()
            .map(|(subject, mode, f)| FailureRow {
                subject,
                mode,
                numerical: f.numerical,
                error: &f.message,
            })
            .collect();
        write_csv(&dir.join("failures.csv"), &fails)?;
        write_summary_csv(&dir.join("summary.csv"), &self.summary)
    }
}

/// Phantom subjects named `sub-01`, `sub-02`, ...
pub fn generate_subjects(base: &PhantomSpec, n: usize, model: &CohortModel, seed: u64) -> Result<Vec<CohortSubject>> {
    let specs = make_cohort(base, n, model, seed)?;
    specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let set = generate_phantom(spec)?;
            Ok(CohortSubject {
                name: format!("sub-{:02}", i + 1),
                inputs: SubjectInputs {
                    t2: set.t2,
                    cord: set.cord,
                    rootlets: Some(set.rootlets),
                    discs: Some(set.discs),
                },
            })
        })
        .collect()
}

fn load_optional(path: &Path) -> Result<Option<LabelMap>> {
    if path.exists() {
        load_volume(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Subject directory in the layout written by the phantom generator.
pub fn load_subject_dir(dir: &Path) -> Result<SubjectInputs> {
    Ok(SubjectInputs {
        t2: load_volume(&dir.join(FILES[0]))?,
        cord: load_volume(&dir.join(FILES[1]))?,
        rootlets: load_optional(&dir.join(FILES[2]))?,
        discs: load_optional(&dir.join(FILES[3]))?,
    })
}

pub fn load_template_dir(dir: &Path) -> Result<TemplateInputs> {
    Ok(TemplateInputs {
        t2: load_volume(&dir.join(FILES[0]))?,
        cord: load_volume(&dir.join(FILES[1]))?,
        rootlets: load_volume(&dir.join(FILES[2]))?,
        discs: load_volume(&dir.join(FILES[3]))?,
    })
}

/// Every subdirectory of `dir`, in name order.
pub fn load_cohort_dir(dir: &Path) -> Result<Vec<CohortSubject>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let inputs = load_subject_dir(&dir.join(&name))?;
            Ok(CohortSubject { name, inputs })
        })
        .collect()
}
