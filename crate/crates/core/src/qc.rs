//! Static QC renderings: mid-sagittal and mid-coronal planes of the template
//! and the warped subject side by side, with landmark ticks on the margins.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::landmarks::{LandmarkKind, LevelLandmarks};
use crate::volume::Image;

const MARGIN: usize = 6;
const TEMPLATE_TICK: [u8; 3] = [230, 60, 40];
const SUBJECT_TICK: [u8; 3] = [40, 200, 80];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// y horizontal at the middle x
    Sagittal,
    /// x horizontal at the middle y
    Coronal,
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { w, h, rgb: vec![0; w * h * 3] }
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.w && y < self.h {
            let i = 3 * (x + self.w * y);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.w as u32, self.h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            w.write_image_data(&self.rgb).map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(out)
    }
}

/// Paint one plane of `v` with superior at the top.
fn paint(c: &mut Canvas, v: &Image, plane: Plane, x0: usize) {
    let [nx, ny, nz] = v.dims();
    let (lo, hi) = v.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = if plane == Plane::Sagittal { ny } else { nx };
    for k in 0..nz {
        for a in 0..width {
            let val = match plane {
                Plane::Sagittal => v.get(nx / 2, a, k),
                Plane::Coronal => v.get(a, ny / 2, k),
            };
            let g = (((val - lo) / span).clamp(0.0, 1.0) * 255.0) as u8;
            c.put(x0 + a, nz - 1 - k, [g; 3]);
        }
    }
}

fn ticks(c: &mut Canvas, v: &Image, lm: &LevelLandmarks, x0: usize, color: [u8; 3]) {
    let g = v.grid();
    let nz = g.dims()[2];
    for p in lm.entries().values() {
        let k = g.z_to_slice(p.z).round();
        if k >= 0.0 && (k as usize) < nz {
            for dx in 0..MARGIN - 1 {
                c.put(x0 + dx, nz - 1 - k as usize, color);
            }
        }
    }
}

/// Render `template` and `warped` (same grid) into one PNG.
pub fn render_plane(
    template: &Image,
    warped: &Image,
    template_lm: &LevelLandmarks,
    warped_lm: &LevelLandmarks,
    plane: Plane,
) -> Result<Vec<u8>> {
    if !template.grid().same_space(warped.grid()) {
        return Err(Error::SpaceMismatch("QC images must share the template grid".into()));
    }
    let [nx, ny, nz] = template.dims();
    let width = if plane == Plane::Sagittal { ny } else { nx };
    let mut c = Canvas::new(2 * width + 3 * MARGIN, nz);
    ticks(&mut c, template, template_lm, 0, TEMPLATE_TICK);
    paint(&mut c, template, plane, MARGIN);
    paint(&mut c, warped, plane, 2 * MARGIN + width);
    ticks(&mut c, warped, warped_lm, 2 * MARGIN + 2 * width + 1, SUBJECT_TICK);
    c.encode()
}

/// Write sagittal and coronal QC images named after the landmark mode.
pub fn write_qc(
    dir: &Path,
    mode: LandmarkKind,
    template: &Image,
    warped: &Image,
    template_lm: &LevelLandmarks,
    warped_lm: &LevelLandmarks,
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (plane, name) in [(Plane::Sagittal, "sagittal"), (Plane::Coronal, "coronal")] {
        let png = render_plane(template, warped, template_lm, warped_lm, plane)?;
        let path = dir.join(format!("qc_{mode}_{name}.png"));
        write_atomic(&path, &png)?;
        out.push(path);
    }
    Ok(out)
}
