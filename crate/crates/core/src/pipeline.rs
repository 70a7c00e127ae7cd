//! Subject → template registration in seven steps:
//! landmarks, straightening, level-wise z-map, SI refinement, slice-wise
//! symmetrisation, in-plane scaling and concatenation.

use std::sync::Arc;

use log::{info, warn};

use crate::centerline::{build_straightening, extract_centerline, slice_centroids, StraightTarget, StraightenTransform};
use crate::error::{Error, Result};
use crate::landmarks::{disc_landmarks, level_centers_of_mass, LandmarkKind, LevelLandmarks};
use crate::level_align::{build_monotone_z_map, zmap_to_field, zmap_to_inverse_field, MonotoneZMap};
use crate::si_refine::{register_si, MaskedPair, SIRegParams, SIRegistration};
use crate::volume::{Grid, Image, LabelMap};
use crate::warpfield::{
    apply_warp, apply_warp_labels, apply_warp_mask, invert_monotone_z, symmetrize_slicewise, DeformationField,
    Transform, WarpChain,
};
use crate::xy_scale::{compute_scale_profile, scale_profile_to_field, scale_profile_to_inverse_field, SliceScaleProfile};

/// Subject images; the label map matching the landmark mode is required.
#[derive(Clone, Debug)]
pub struct SubjectInputs {
    pub t2: Image,
    pub cord: LabelMap,
    pub rootlets: Option<LabelMap>,
    pub discs: Option<LabelMap>,
}

/// Template images with both kinds of labels.
#[derive(Clone, Debug)]
pub struct TemplateInputs {
    pub t2: Image,
    pub cord: LabelMap,
    pub rootlets: LabelMap,
    pub discs: LabelMap,
}

impl TemplateInputs {
    pub fn grid(&self) -> &Grid {
        self.t2.grid()
    }

    pub fn labels(&self, kind: LandmarkKind) -> &LabelMap {
        match kind {
            LandmarkKind::Rootlets => &self.rootlets,
            LandmarkKind::Discs => &self.discs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub mode: LandmarkKind,
    pub skip_xy_scale: bool,
    pub si: SIRegParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: LandmarkKind::Rootlets,
            skip_xy_scale: false,
            si: SIRegParams::default(),
        }
    }
}

/// Every intermediate of one registration.
#[derive(Clone, Debug)]
pub struct Registration {
    pub mode: LandmarkKind,
    pub subject_landmarks: LevelLandmarks,
    pub template_landmarks: LevelLandmarks,
    pub straighten: Arc<StraightenTransform>,
    pub zmap: MonotoneZMap,
    pub zmap_field: Arc<DeformationField>,
    pub zmap_inverse: Arc<DeformationField>,
    /// Present in rootlets mode.
    pub si: Option<SIRegistration>,
    pub si_field: Option<Arc<DeformationField>>,
    pub si_inverse: Option<Arc<DeformationField>>,
    pub scale: Option<SliceScaleProfile>,
    pub xy_field: Option<Arc<DeformationField>>,
    pub xy_inverse: Option<Arc<DeformationField>>,
    /// Subject → template.
    pub forward: WarpChain,
    /// Template → subject.
    pub backward: WarpChain,
}

fn step<T>(n: u8, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_step(n))
}

fn landmarks_of(kind: LandmarkKind, labels: &LabelMap) -> Result<LevelLandmarks> {
    match kind {
        LandmarkKind::Rootlets => level_centers_of_mass(labels),
        LandmarkKind::Discs => disc_landmarks(labels),
    }
}

/// Straight-axis placement read off the template cord.
pub fn template_target(template: &TemplateInputs) -> Result<StraightTarget> {
    let c = slice_centroids(&template.cord);
    if c.is_empty() {
        return Err(Error::EmptyMask("template cord".into()));
    }
    let n = c.len() as f64;
    let axis = [c.iter().map(|p| p.x).sum::<f64>() / n, c.iter().map(|p| p.y).sum::<f64>() / n];
    let z_top = c.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    Ok(StraightTarget {
        grid: template.grid().clone(),
        axis,
        z_top,
    })
}

pub fn register(subject: &SubjectInputs, template: &TemplateInputs, cfg: &PipelineConfig) -> Result<Registration> {
    let mode = cfg.mode;
    let tgrid = template.grid().clone();

    // 1: landmarks
    let subject_labels = step(
        1,
        match mode {
            LandmarkKind::Rootlets => subject.rootlets.as_ref(),
            LandmarkKind::Discs => subject.discs.as_ref(),
        }
        .ok_or_else(|| Error::InvalidParameter(format!("subject has no {mode} labels"))),
    )?;
    let subject_landmarks = step(1, landmarks_of(mode, subject_labels))?;
    let template_landmarks = step(1, landmarks_of(mode, template.labels(mode)))?;
    let gaps = subject_landmarks.gaps();
    if !gaps.is_empty() {
        warn!("subject {mode} labels skip interior levels {gaps:?}; the z-map has fewer anchors");
    }

    // 2: straightening
    let straighten = step(2, (|| {
        let cl = extract_centerline(&subject.cord)?;
        let target = template_target(template)?;
        build_straightening(&cl, subject.t2.grid(), &target)
    })())?;
    let straighten = Arc::new(straighten);
    let s_fwd = Transform::Straighten {
        transform: straighten.clone(),
        inverse: false,
    };
    let s_inv = Transform::Straighten {
        transform: straighten.clone(),
        inverse: true,
    };

    // 3: level-wise z alignment
    let (zmap, zmap_field, zmap_inverse) = step(3, (|| {
        let straight_landmarks = subject_landmarks.map_points(|p| Ok(straighten.to_straight(p)))?;
        let m = build_monotone_z_map(&straight_landmarks, &template_landmarks)?;
        let f = zmap_to_field(&m, &tgrid)?;
        let fi = zmap_to_inverse_field(&m, &tgrid)?;
        Ok((m, Arc::new(f), Arc::new(fi)))
    })())?;
    let mut forward = vec![s_fwd, Transform::Field(zmap_field.clone())];
    let chain_so_far = |t: &[Transform]| WarpChain::new(t.to_vec());

    // 4 + 5: SI refinement and symmetrisation (needs rootlet masks)
    let (mut si, mut si_field, mut si_inverse) = (None, None, None);
    if mode == LandmarkKind::Rootlets {
        let reg = step(4, (|| {
            let chain = chain_so_far(&forward)?;
            let moving = apply_warp(&subject.t2, &chain, &tgrid, false);
            let moving_mask = apply_warp_labels(subject_labels, &chain, &tgrid);
            let pair = MaskedPair::new(template.t2.clone(), template.rootlets.clone(), moving, moving_mask)?;
            register_si(&pair, &cfg.si)
        })())?;
        info!(
            "SI refinement: NCC {:.4} -> {:.4}{}",
            reg.ncc_identity,
            reg.ncc_final,
            if reg.fell_back { " (identity kept)" } else { "" }
        );
        let (sym, inv) = step(5, (|| {
            let sym = symmetrize_slicewise(&reg.field)?;
            let inv = invert_monotone_z(&sym)?;
            Ok((Arc::new(sym), Arc::new(inv)))
        })())?;
        forward.push(Transform::Field(sym.clone()));
        si = Some(reg);
        si_field = Some(sym);
        si_inverse = Some(inv);
    }

    // 6: in-plane scaling
    let (mut scale, mut xy_field, mut xy_inverse) = (None, None, None);
    if !cfg.skip_xy_scale {
        let (p, f, fi) = step(6, (|| {
            let chain = chain_so_far(&forward)?;
            let warped_cord = apply_warp_mask(&subject.cord, &chain, &tgrid);
            let p = compute_scale_profile(&warped_cord, &template.cord)?;
            let f = scale_profile_to_field(&p, &tgrid)?;
            let fi = scale_profile_to_inverse_field(&p, &tgrid)?;
            Ok((p, Arc::new(f), Arc::new(fi)))
        })())?;
        forward.push(Transform::Field(f.clone()));
        scale = Some(p);
        xy_field = Some(f);
        xy_inverse = Some(fi);
    }

    // 7: concatenation
    let mut backward = Vec::new();
    if let Some(f) = &xy_inverse {
        backward.push(Transform::Field(f.clone()));
    }
    if let Some(f) = &si_inverse {
        backward.push(Transform::Field(f.clone()));
    }
    backward.push(Transform::Field(zmap_inverse.clone()));
    backward.push(s_inv);
    let forward = step(7, WarpChain::new(forward))?;
    let backward = step(7, WarpChain::new(backward))?;

    Ok(Registration {
        mode,
        subject_landmarks,
        template_landmarks,
        straighten,
        zmap,
        zmap_field,
        zmap_inverse,
        si,
        si_field,
        si_inverse,
        scale,
        xy_field,
        xy_inverse,
        forward,
        backward,
    })
}

impl Registration {
    pub fn template_grid(&self) -> &Grid {
        self.straighten.straight_grid()
    }

    pub fn subject_grid(&self) -> &Grid {
        self.straighten.curved_grid()
    }

    /// Forward chain without the in-plane scaling step.
    pub fn forward_without_xy(&self) -> WarpChain {
        let t = self.forward.transforms();
        let n = if self.xy_field.is_some() { t.len() - 1 } else { t.len() };
        WarpChain::new(t[..n].to_vec()).expect("prefix of a valid chain")
    }

    pub fn image_to_template(&self, v: &Image) -> Image {
        apply_warp(v, &self.forward, self.template_grid(), false)
    }

    pub fn labels_to_template(&self, v: &LabelMap) -> LabelMap {
        apply_warp_labels(v, &self.forward, self.template_grid())
    }

    pub fn image_to_subject(&self, v: &Image) -> Image {
        apply_warp(v, &self.backward, self.subject_grid(), false)
    }
}
