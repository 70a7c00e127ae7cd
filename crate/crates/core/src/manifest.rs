//! On-disk warp chains: field files plus a JSON manifest per direction.
//!
//! Manifests are written last, each with write-then-rename, so a reader that
//! finds a manifest also finds every file it references.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::centerline::StraightenTransform;
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::landmarks::LandmarkKind;
use crate::pipeline::Registration;
use crate::volume::Grid;
use crate::warpfield::{DeformationField, Transform, WarpChain};

pub const FORWARD_MANIFEST: &str = "forward.json";
pub const BACKWARD_MANIFEST: &str = "backward.json";
const STRAIGHTEN_FILE: &str = "straighten.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn manifest_name(self) -> &'static str {
        match self {
            Direction::Forward => FORWARD_MANIFEST,
            Direction::Backward => BACKWARD_MANIFEST,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Straighten,
    Field,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: EntryKind,
    pub inverse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainManifest {
    pub mode: LandmarkKind,
    pub direction: Direction,
    pub output_grid: Grid,
    pub transforms: Vec<ManifestEntry>,
}

fn field_entry(file: &str) -> ManifestEntry {
    ManifestEntry {
        file: file.to_string(),
        kind: EntryKind::Field,
        inverse: false,
    }
}

fn straighten_entry(inverse: bool) -> ManifestEntry {
    ManifestEntry {
        file: STRAIGHTEN_FILE.to_string(),
        kind: EntryKind::Straighten,
        inverse,
    }
}

/// Write every transform of `reg` and both manifests into `dir`.
pub fn save_registration(reg: &Registration, dir: &Path) -> Result<()> {
    let json = serde_json::to_vec(&*reg.straighten).map_err(|e| Error::json("straightening", e))?;
    write_atomic(&dir.join(STRAIGHTEN_FILE), &json)?;
    let mut fwd = vec![straighten_entry(false)];
    let mut bwd = Vec::new();
    let mut pairs: Vec<(&str, &str, &Arc<DeformationField>, &Arc<DeformationField>)> =
        vec![("zmap_forward.nii.gz", "zmap_inverse.nii.gz", &reg.zmap_field, &reg.zmap_inverse)];
    if let (Some(f), Some(i)) = (&reg.si_field, &reg.si_inverse) {
        pairs.push(("si_forward.nii.gz", "si_inverse.nii.gz", f, i));
    }
    if let (Some(f), Some(i)) = (&reg.xy_field, &reg.xy_inverse) {
        pairs.push(("xy_forward.nii.gz", "xy_inverse.nii.gz", f, i));
    }
    for (fname, iname, f, i) in &pairs {
        f.save(&dir.join(fname))?;
        i.save(&dir.join(iname))?;
        fwd.push(field_entry(fname));
        bwd.insert(0, field_entry(iname));
    }
    bwd.push(straighten_entry(true));
    for (direction, transforms, grid) in [
        (Direction::Forward, fwd, reg.template_grid()),
        (Direction::Backward, bwd, reg.subject_grid()),
    ] {
        let m = ChainManifest {
            mode: reg.mode,
            direction,
            output_grid: grid.clone(),
            transforms,
        };
        let bytes = serde_json::to_vec_pretty(&m).map_err(|e| Error::json("chain manifest", e))?;
        write_atomic(&dir.join(direction.manifest_name()), &bytes)?;
    }
    Ok(())
}

/// Read a manifest and every transform it references.
pub fn load_chain(manifest: &Path) -> Result<(ChainManifest, WarpChain)> {
    let text = std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: ChainManifest = serde_json::from_slice(&text).map_err(|e| Error::json(manifest.display().to_string(), e))?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut straighten: HashMap<PathBuf, Arc<StraightenTransform>> = HashMap::new();
    let mut transforms = Vec::with_capacity(m.transforms.len());
    for e in &m.transforms {
        let path = base.join(&e.file);
        let t = match e.kind {
            EntryKind::Field => {
                if e.inverse {
                    return Err(Error::InvalidParameter(format!(
                        "{}: stored fields are already oriented; `inverse` must be false",
                        e.file
                    )));
                }
                Transform::field(DeformationField::load(&path)?)
            }
            EntryKind::Straighten => {
                let s = match straighten.get(&path) {
                    Some(s) => s.clone(),
                    None => {
                        let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
                        let s: StraightenTransform = serde_json::from_slice(&bytes)
                            .map_err(|err| Error::json(path.display().to_string(), err))?;
                        let s = Arc::new(s);
                        straighten.insert(path.clone(), s.clone());
                        s
                    }
                };
                Transform::Straighten {
                    transform: s,
                    inverse: e.inverse,
                }
            }
        };
        transforms.push(t);
    }
    let chain = WarpChain::new(transforms)?;
    Ok((m, chain))
}
