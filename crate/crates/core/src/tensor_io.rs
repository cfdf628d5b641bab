//! Conversions between [`Image`]s and `[N, 1, H, W]` tensors.

use htc_nn::{Float, Tensor};

use crate::error::{Error, Result};
use crate::grid::Image;

pub fn images_to_tensor<T: Float>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let (rows, cols) = first.dims();
    let mut data = Vec::with_capacity(images.len() * rows * cols);
    for img in images {
        if img.dims() != (rows, cols) {
            return Err(Error::Shape(format!(
                "batch mixes {rows}x{cols} and {}x{} images",
                img.rows(),
                img.cols()
            )));
        }
        data.extend(img.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), 1, rows, cols], data)?)
}

/// Splits channel `channel` of an `[N, C, H, W]` tensor into images.
pub fn tensor_to_images<T: Float>(t: &Tensor<T>, channel: usize) -> Vec<Image> {
    let (n, c, h, w) = t.dims4();
    (0..n)
        .map(|i| {
            let start = (i * c + channel) * h * w;
            let data = t.data()[start..start + h * w].iter().map(|v| v.as_f64() as f32).collect();
            Image::new(h, w, data).expect("tensor slice size")
        })
        .collect()
}
