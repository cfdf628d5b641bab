//! Volume and slice ingestion: NIfTI-1 and raw phantom datasets,
//! brain-region normalisation, slice extraction, bounding-box crops and
//! synthetic phantom generation.

mod nifti;
mod phantom;
mod raw;
mod slices;

use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::grid::{Image, LabelMap, Mask};

pub use nifti::{load_nifti, write_nifti, NiftiStorage};
pub use phantom::{generate_phantom, PhantomGeometry, PhantomSample, PhantomSpec};
pub use raw::{
    image_file, label_file, read_f32_image, read_raw_dataset, read_raw_meta, write_f32_image,
    write_raw_dataset, RawDataset, RawMeta,
};
pub use slices::{
    center_offset, crop_to_bbox, extract_slices, normalize_volume, to_unit_range, Crop, CropWindow,
};

/// Acquisition contrast of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Flair,
    T1,
    T1c,
    T2,
    Phantom,
    Htc,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Flair => "FLAIR",
            Modality::T1 => "T1",
            Modality::T1c => "T1C",
            Modality::T2 => "T2",
            Modality::Phantom => "PHANTOM",
            Modality::Htc => "HTC",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag.to_ascii_uppercase().as_str() {
            "FLAIR" => Modality::Flair,
            "T1" => Modality::T1,
            "T1C" => Modality::T1c,
            "T2" => Modality::T2,
            "PHANTOM" => Modality::Phantom,
            "HTC" => Modality::Htc,
            _ => return None,
        })
    }
}

/// 3-D scan; `data[x + nx * (y + ny * z)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
    pub spacing: [f32; 3],
    pub modality: Modality,
    pub brain_mask: Vec<bool>,
}

impl Volume {
    /// Builds a volume whose brain mask is its nonzero region.
    pub fn new(dims: [usize; 3], data: Vec<f32>, spacing: [f32; 3], modality: Modality) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "volume {dims:?} needs {} voxels, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Argument(format!("spacing must be positive, got {spacing:?}")));
        }
        let brain_mask = data.iter().map(|&v| v != 0.0).collect();
        Ok(Self {
            dims,
            data,
            spacing,
            modality,
            brain_mask,
        })
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Axial slice `z` as a `ny x nx` image (row = y, column = x).
    pub fn axial(&self, z: usize) -> Image {
        let [nx, ny, _] = self.dims;
        let start = nx * ny * z;
        Image::new(ny, nx, self.data[start..start + nx * ny].to_vec()).expect("slice size")
    }
}

/// One 2-D training/evaluation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub image: Image,
    pub labels: LabelMap,
    pub spacing: [f32; 2],
    pub modality: Modality,
}

impl LabeledSlice {
    pub fn new(image: Image, labels: LabelMap, spacing: [f32; 2], modality: Modality) -> Result<Self> {
        shape_check("image vs labels", image.dims(), labels.dims())?;
        Ok(Self {
            image,
            labels,
            spacing,
            modality,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Result<Self> {
        if row_min > row_max || col_min > col_max {
            return Err(Error::Argument(format!(
                "inverted bbox ({row_min},{col_min})..({row_max},{col_max})"
            )));
        }
        Ok(Self {
            row_min,
            col_min,
            row_max,
            col_max,
        })
    }

    /// Whole-image box.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            row_min: 0,
            col_min: 0,
            row_max: rows - 1,
            col_max: cols - 1,
        }
    }

    pub fn fits(&self, rows: usize, cols: usize) -> bool {
        self.row_max < rows && self.col_max < cols
    }

    /// Grows by `margin` on every side, clipped to a `rows x cols` image.
    pub fn expand(&self, margin: usize, rows: usize, cols: usize) -> Self {
        Self {
            row_min: self.row_min.saturating_sub(margin),
            col_min: self.col_min.saturating_sub(margin),
            row_max: (self.row_max + margin).min(rows - 1),
            col_max: (self.col_max + margin).min(cols - 1),
        }
    }

    /// Tight box around the true pixels of `mask`.
    pub fn of_mask(mask: &Mask) -> Option<Self> {
        let mut b: Option<Self> = None;
        for r in 0..mask.rows() {
            for c in 0..mask.cols() {
                if *mask.get(r, c) {
                    b = Some(match b {
                        None => Self {
                            row_min: r,
                            col_min: c,
                            row_max: r,
                            col_max: c,
                        },
                        Some(b) => Self {
                            row_min: b.row_min.min(r),
                            col_min: b.col_min.min(c),
                            row_max: b.row_max.max(r),
                            col_max: b.col_max.max(c),
                        },
                    });
                }
            }
        }
        b
    }
}
