//! Figure-style PNG rows: input, attention map, synthetic HTC image, target.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

/// One montage row.
#[derive(Debug, Clone, Copy)]
pub struct MontageCase<'a> {
    pub source: &'a Image,
    pub attention: &'a Image,
    pub synthetic: &'a Image,
    pub target: &'a Image,
}

/// Separator intensity between panels and rows.
const SEPARATOR: u8 = 255;

fn quantize(v: f32) -> u8 {
    // NaN maps to 0
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays the cases out as 8-bit rows of four panels with 1-px separators.
pub fn montage_grid(cases: &[MontageCase]) -> Result<Grid<u8>> {
    let first = cases
        .first()
        .ok_or_else(|| Error::Argument("montage needs at least one case".into()))?;
    let (h, w) = first.source.dims();
    for c in cases {
        for p in [c.source, c.attention, c.synthetic, c.target] {
            if p.dims() != (h, w) {
                return Err(Error::Argument(format!(
                    "montage panels must share one size: {h}x{w} vs {}x{}",
                    p.rows(),
                    p.cols()
                )));
            }
        }
    }
    let rows = cases.len() * h + cases.len() - 1;
    let cols = 4 * w + 3;
    let mut out = Grid::filled(rows, cols, SEPARATOR);
    for (i, c) in cases.iter().enumerate() {
        let r0 = i * (h + 1);
        for (j, panel) in [c.source, c.attention, c.synthetic, c.target].into_iter().enumerate() {
            let c0 = j * (w + 1);
            for r in 0..h {
                for col in 0..w {
                    out.set(r0 + r, c0 + col, quantize(*panel.get(r, col)));
                }
            }
        }
    }
    Ok(out)
}

pub fn write_png(grid: &Grid<u8>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), grid.cols() as u32, grid.rows() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(grid.data())?;
    writer.finish()?;
    Ok(())
}

/// Writes the montage of `cases` to `out` as an 8-bit grayscale PNG.
pub fn montage(cases: &[MontageCase], out: &Path) -> Result<()> {
    write_png(&montage_grid(cases)?, out)
}
