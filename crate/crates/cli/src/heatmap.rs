//! Archive heatmaps as binary PPM images.
//!
//! Column `i` of the image is cell `i` of the first measure, and row `j`
//! counted from the bottom is cell `j` of the second, so cell `(0, 0)` sits
//! in the lower-left corner.

use std::io::Write;

use dsage_core::Archive;
use serde::Serialize;

use crate::CliError;

pub type Rgb = [u8; 3];

pub const BACKGROUND: Rgb = [0, 0, 0];
/// Colors of objective 0 and of the archive maximum.
pub const RAMP: [Rgb; 2] = [[48, 18, 96], [255, 255, 255]];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Axis {
    pub measure: usize,
    pub lower: f64,
    pub upper: f64,
    pub cells: usize,
}

/// Sidecar describing how to read the image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapMeta {
    pub width: usize,
    pub height: usize,
    pub origin: &'static str,
    pub x: Axis,
    pub y: Axis,
    pub max_objective: f64,
    pub elites: usize,
    pub background: Rgb,
    pub ramp: [Rgb; 2],
}

fn shade(t: f64) -> Rgb {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let (a, b) = (RAMP[0][k] as f64, RAMP[1][k] as f64);
        *o = (a + (b - a) * t).round() as u8;
    }
    out
}

/// Pixels in row-major order, top row first.
pub fn render(archive: &Archive) -> Result<(Vec<Rgb>, HeatmapMeta), CliError> {
    let spec = archive.spec();
    if spec.dims() != 2 {
        return Err(CliError::Runtime(format!(
            "heatmaps need a 2-D archive, this one has {} measures",
            spec.dims()
        )));
    }
    let (w, h) = (spec.cells()[0], spec.cells()[1]);
    let max = archive.iter().map(|e| e.objective).fold(0.0_f64, f64::max);
    let mut pixels = vec![BACKGROUND; w * h];
    for elite in archive.iter() {
        let t = if max > 0.0 { elite.objective.max(0.0) / max } else { 0.0 };
        pixels[(h - 1 - elite.cell[1]) * w + elite.cell[0]] = shade(t);
    }
    let axis = |d: usize| Axis {
        measure: d,
        lower: spec.lower()[d],
        upper: spec.upper()[d],
        cells: spec.cells()[d],
    };
    let meta = HeatmapMeta {
        width: w,
        height: h,
        origin: "lower-left",
        x: axis(0),
        y: axis(1),
        max_objective: max,
        elites: archive.len(),
        background: BACKGROUND,
        ramp: RAMP,
    };
    Ok((pixels, meta))
}

pub fn write_ppm<W: Write>(mut out: W, width: usize, height: usize, pixels: &[Rgb]) -> std::io::Result<()> {
    write!(out, "P6\n{width} {height}\n255\n")?;
    for p in pixels {
        out.write_all(p)?;
    }
    out.flush()
}
