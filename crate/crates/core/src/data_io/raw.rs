use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{LabeledSlice, Modality};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    /// `[rows, cols]` of every image.
    pub shape: [usize; 2],
    pub spacing: [f32; 2],
    pub label_set: Vec<u8>,
    pub seed: Option<u64>,
    pub modality: Modality,
    pub count: usize,
    /// Echo of whatever produced the dataset (phantom spec, target params).
    #[serde(default)]
    pub spec: serde_json::Value,
    /// Unpaired target-pool index per image, when the dataset has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_index: Option<Vec<Option<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub meta: RawMeta,
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

impl RawDataset {
    /// Wraps slices sharing one shape; the label set is what actually occurs.
    pub fn from_slices(
        slices: &[LabeledSlice],
        seed: Option<u64>,
        spec: serde_json::Value,
        target_index: Option<Vec<Option<usize>>>,
    ) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Argument("empty dataset".into()))?;
        let (rows, cols) = first.dims();
        let mut present = [false; 256];
        for s in slices {
            if s.dims() != (rows, cols) {
                return Err(Error::Shape(format!("mixed slice sizes {:?} and {:?}", (rows, cols), s.dims())));
            }
            for &l in s.labels.data() {
                present[l as usize] = true;
            }
        }
        Ok(Self {
            meta: RawMeta {
                shape: [rows, cols],
                spacing: first.spacing,
                label_set: (0..=255u8).filter(|&l| present[l as usize]).collect(),
                seed,
                modality: first.modality,
                count: slices.len(),
                spec,
                target_index,
            },
            images: slices.iter().map(|s| s.image.clone()).collect(),
            labels: slices.iter().map(|s| s.labels.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn slice(&self, i: usize) -> LabeledSlice {
        LabeledSlice {
            image: self.images[i].clone(),
            labels: self.labels[i].clone(),
            spacing: self.meta.spacing,
            modality: self.meta.modality,
        }
    }

    pub fn slices(&self) -> Vec<LabeledSlice> {
        (0..self.len()).map(|i| self.slice(i)).collect()
    }
}

pub fn image_file(i: usize) -> String {
    format!("img_{i:04}.raw")
}

pub fn label_file(i: usize) -> String {
    format!("lbl_{i:04}.raw")
}

pub fn write_f32_image(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = vec![0u8; image.len() * 4];
    LittleEndian::write_f32_into(image.data(), &mut bytes);
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn read_f32_image(path: &Path, rows: usize, cols: usize) -> Result<Image> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::CorruptFile(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            rows * cols * 4,
            bytes.len()
        )));
    }
    let mut data = vec![0f32; rows * cols];
    LittleEndian::read_f32_into(&bytes, &mut data);
    Image::new(rows, cols, data)
}

pub fn write_raw_dataset(dir: &Path, ds: &RawDataset) -> Result<()> {
    if ds.images.len() != ds.labels.len() || ds.images.len() != ds.meta.count {
        return Err(Error::Argument(format!(
            "{} images, {} label maps, meta count {}",
            ds.images.len(),
            ds.labels.len(),
            ds.meta.count
        )));
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&ds.meta)?).map_err(Error::io(&meta_path))?;
    let [rows, cols] = ds.meta.shape;
    for (i, (img, lbl)) in ds.images.iter().zip(&ds.labels).enumerate() {
        if img.dims() != (rows, cols) || lbl.dims() != (rows, cols) {
            return Err(Error::Shape(format!("entry {i} does not match {rows}x{cols}")));
        }
        write_f32_image(&dir.join(image_file(i)), img)?;
        let path = dir.join(label_file(i));
        fs::write(&path, lbl.data()).map_err(Error::io(&path))?;
    }
    Ok(())
}

pub fn read_raw_meta(dir: &Path) -> Result<RawMeta> {
    let meta_path = dir.join("meta.json");
    let text = fs::read(&meta_path).map_err(Error::io(&meta_path))?;
    Ok(serde_json::from_slice(&text)?)
}

pub fn read_raw_dataset(dir: &Path) -> Result<RawDataset> {
    let meta = read_raw_meta(dir)?;
    let [rows, cols] = meta.shape;
    let mut images = Vec::with_capacity(meta.count);
    let mut labels = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        images.push(read_f32_image(&dir.join(image_file(i)), rows, cols)?);
        let path = dir.join(label_file(i));
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        if bytes.len() != rows * cols {
            return Err(Error::CorruptFile(format!("{}: wrong label size", path.display())));
        }
        labels.push(LabelMap::new(rows, cols, bytes)?);
    }
    Ok(RawDataset { meta, images, labels })
}
