use super::{BBox, LabeledSlice, Volume};
use crate::error::{shape_check, Error, Result};
use crate::grid::{Grid, Image, Mask};

/// Standardises intensities over the brain mask (mean 0, std 1) and zeroes
/// every voxel outside it. The mask itself is carried over unchanged.
pub fn normalize_volume(vol: &Volume) -> Result<Volume> {
    let brain: Vec<f64> = vol
        .data
        .iter()
        .zip(&vol.brain_mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    if brain.is_empty() {
        return Err(Error::DegenerateVolume("empty brain mask".into()));
    }
    let n = brain.len() as f64;
    let mean = brain.iter().sum::<f64>() / n;
    let var = brain.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateVolume("zero variance over the brain mask".into()));
    }
    let std = var.sqrt();
    let data = vol
        .data
        .iter()
        .zip(&vol.brain_mask)
        .map(|(&v, &m)| if m { ((v as f64 - mean) / std) as f32 } else { 0.0 })
        .collect();
    Ok(Volume {
        data,
        ..vol.clone()
    })
}

/// Offset of a centred `patch`-long window on a `size`-long axis; negative
/// when the window is larger and the axis gets zero-padded.
pub fn center_offset(size: usize, patch: usize) -> isize {
    (size as isize - patch as isize) / 2
}

/// Axial slices whose nonzero-pixel fraction reaches `min_nonzero_frac`,
/// centre-cropped (or zero-padded) to `patch x patch`.
pub fn extract_slices(
    vol: &Volume,
    labels: &Volume,
    min_nonzero_frac: f64,
    patch: usize,
) -> Result<Vec<LabeledSlice>> {
    if vol.dims != labels.dims {
        return Err(Error::Shape(format!(
            "image {:?} vs labels {:?}",
            vol.dims, labels.dims
        )));
    }
    if !(0.0..=1.0).contains(&min_nonzero_frac) {
        return Err(Error::Argument(format!(
            "min_nonzero_frac {min_nonzero_frac} outside [0, 1]"
        )));
    }
    let [nx, ny, nz] = vol.dims;
    let (r0, c0) = (center_offset(ny, patch), center_offset(nx, patch));
    let mut out = Vec::new();
    for z in 0..nz {
        let image = vol.axial(z);
        let nonzero = image.data().iter().filter(|&&v| v != 0.0).count();
        if (nonzero as f64) < min_nonzero_frac * image.len() as f64 {
            continue;
        }
        let lab = labels.axial(z).map(|&v| v.round().clamp(0.0, 255.0) as u8);
        out.push(LabeledSlice {
            image: image.window(r0, c0, patch, patch, 0.0),
            labels: lab.window(r0, c0, patch, patch, 0),
            spacing: [vol.spacing[1], vol.spacing[0]],
            modality: vol.modality,
        });
    }
    Ok(out)
}

/// Min-max rescale to `[0, 1]`; constant images map to zero.
pub fn to_unit_range(image: &Image) -> Image {
    let (lo, hi) = image.min_max();
    let span = hi - lo;
    if !(span > 0.0) {
        return image.map(|_| 0.0);
    }
    image.map(|&v| (v - lo) / span)
}

/// Placement of a square crop inside its source image. The origin may be
/// negative when the source is smaller than the crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub row0: isize,
    pub col0: isize,
    pub size: usize,
    pub source_rows: usize,
    pub source_cols: usize,
}

impl CropWindow {
    /// Identity window over a whole `size x size` image.
    pub fn identity(size: usize) -> Self {
        Self {
            row0: 0,
            col0: 0,
            size,
            source_rows: size,
            source_cols: size,
        }
    }

    pub fn to_global(&self, r: usize, c: usize) -> (isize, isize) {
        (self.row0 + r as isize, self.col0 + c as isize)
    }

    pub fn to_local(&self, r: usize, c: usize) -> Option<(usize, usize)> {
        let (lr, lc) = (r as isize - self.row0, c as isize - self.col0);
        (lr >= 0 && lc >= 0 && (lr as usize) < self.size && (lc as usize) < self.size)
            .then_some((lr as usize, lc as usize))
    }

    pub fn extract<T: Clone>(&self, grid: &Grid<T>, fill: T) -> Grid<T> {
        grid.window(self.row0, self.col0, self.size, self.size, fill)
    }

    /// Maps a local mask back into source coordinates; pixels outside the
    /// window (or in the padding) are false.
    pub fn paste_mask(&self, local: &Mask) -> Mask {
        Mask::from_fn(self.source_rows, self.source_cols, |r, c| {
            self.to_local(r, c).is_some_and(|(lr, lc)| *local.get(lr, lc))
        })
    }

    /// Composes `inner` (a window inside this window's crop) into a window
    /// on this window's source.
    pub fn compose(&self, inner: &CropWindow) -> CropWindow {
        CropWindow {
            row0: self.row0 + inner.row0,
            col0: self.col0 + inner.col0,
            size: inner.size,
            source_rows: self.source_rows,
            source_cols: self.source_cols,
        }
    }
}

/// A cropped slice together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub slice: LabeledSlice,
    pub window: CropWindow,
}

/// Expands `bbox` by `margin` (clipped), then cuts an `out_size` square
/// centred on it, shifted to stay inside the image, or zero-padded
/// symmetrically when the image is smaller than `out_size`.
pub fn crop_to_bbox(slice: &LabeledSlice, bbox: &BBox, out_size: usize, margin: usize) -> Result<Crop> {
    if out_size == 0 {
        return Err(Error::Argument("crop size must be positive".into()));
    }
    let (rows, cols) = slice.dims();
    shape_check("image vs labels", slice.image.dims(), slice.labels.dims())?;
    if !bbox.fits(rows, cols) {
        return Err(Error::Argument(format!("bbox {bbox:?} outside {rows}x{cols} image")));
    }
    let b = bbox.expand(margin, rows, cols);
    let place = |lo: usize, hi: usize, size: usize| -> isize {
        if size < out_size {
            return center_offset(size, out_size);
        }
        let center = ((lo + hi) / 2) as isize;
        (center - (out_size / 2) as isize).clamp(0, (size - out_size) as isize)
    };
    let window = CropWindow {
        row0: place(b.row_min, b.row_max, rows),
        col0: place(b.col_min, b.col_max, cols),
        size: out_size,
        source_rows: rows,
        source_cols: cols,
    };
    Ok(Crop {
        slice: LabeledSlice {
            image: window.extract(&slice.image, 0.0),
            labels: window.extract(&slice.labels, 0),
            spacing: slice.spacing,
            modality: slice.modality,
        },
        window,
    })
}
