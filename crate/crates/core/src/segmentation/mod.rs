//! Per-stage binary segmentation with a fully convolutional DenseNet, and
//! the mask-to-box step that chains stages.

mod net;
mod train;

use htc_nn::{Float, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data_io::BBox;
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::tensor_io::{images_to_tensor, tensor_to_images};

pub use net::{DenseBlock, DenseNet, Mode, NormUpdates, SegmenterArch};
pub use train::{train_segmenter, SegEpochRecord, SegmenterConfig, SegmenterTrainer};

/// Probability floor (and `1 - ceiling`) inside the cross-entropy.
pub const CE_EPS: f64 = 1e-7;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BBOX_MARGIN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// Foreground probability per pixel.
    pub probability: Image,
    pub mask: Mask,
    pub bbox: Option<BBox>,
}

/// `(background, foreground)` weights.
pub type ClassWeights = [f64; 2];

fn check_weights(w: ClassWeights) -> Result<()> {
    if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Argument(format!("class weights must be positive, got {w:?}")));
    }
    Ok(())
}

/// Inverse class frequency over a batch, normalised so balanced classes get
/// weight 1, clipped to `[0.1, 10]`.
pub fn inverse_frequency_weights(masks: &[&Mask]) -> ClassWeights {
    let total: usize = masks.iter().map(|m| m.len()).sum();
    let fg: usize = masks.iter().map(|m| m.count()).sum();
    let w = |n: usize| {
        if n == 0 {
            10.0
        } else {
            (total as f64 / (2.0 * n as f64)).clamp(0.1, 10.0)
        }
    };
    [w(total - fg), w(fg)]
}

/// `-mean_pixels w_y log p_y` over `[N, 2, H, W]` probabilities, with `p`
/// clamped to `[CE_EPS, 1 - CE_EPS]`.
pub fn weighted_cross_entropy<'g, T: Float>(
    probs: Var<'g, T>,
    truth: &[&Mask],
    weights: ClassWeights,
) -> Result<Var<'g, T>> {
    check_weights(weights)?;
    let shape = probs.shape();
    let Some(first) = truth.first() else {
        return Err(Error::Argument("empty ground-truth batch".into()));
    };
    let (h, w) = first.dims();
    if shape != [truth.len(), 2, h, w] || truth.iter().any(|m| m.dims() != (h, w)) {
        return Err(Error::Shape(format!(
            "probabilities {shape:?} vs {} masks of {h}x{w}",
            truth.len()
        )));
    }
    let plane = h * w;
    let mut sel = vec![T::zero(); truth.len() * 2 * plane];
    let scale = 1.0 / (truth.len() * plane) as f64;
    for (n, m) in truth.iter().enumerate() {
        for (i, &fg) in m.data().iter().enumerate() {
            let c = fg as usize;
            sel[(n * 2 + c) * plane + i] = T::from_f64_lossy(-weights[c] * scale);
        }
    }
    let sel = probs.graph().constant(Tensor::new(&shape, sel)?);
    Ok(probs.clamp(CE_EPS, 1.0 - CE_EPS).ln_clamped(CE_EPS).mul(sel).sum())
}

/// [`weighted_cross_entropy`] on one foreground-probability map (background
/// probability `1 - p`).
pub fn weighted_cross_entropy_values(fg_prob: &Image, truth: &Mask, weights: ClassWeights) -> Result<f64> {
    check_weights(weights)?;
    crate::error::shape_check("probabilities vs mask", fg_prob.dims(), truth.dims())?;
    let sum: f64 = fg_prob
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &fg)| {
            let p = (p as f64).clamp(CE_EPS, 1.0 - CE_EPS);
            if fg {
                weights[1] * p.ln()
            } else {
                weights[0] * (1.0 - p).clamp(CE_EPS, 1.0 - CE_EPS).ln()
            }
        })
        .sum();
    Ok(-sum / fg_prob.len().max(1) as f64)
}

/// Tight box around the mask grown by `margin` and clipped to the image;
/// `None` for an empty mask.
pub fn mask_to_bbox(mask: &Mask, margin: usize) -> Option<BBox> {
    BBox::of_mask(mask).map(|b| b.expand(margin, mask.rows(), mask.cols()))
}

#[derive(Debug, Clone)]
pub struct SegmenterModel {
    pub arch: SegmenterArch,
    pub store: ParamStore<f32>,
    pub net: DenseNet,
    pub threshold: f64,
    pub bbox_margin: usize,
    pub epoch: usize,
}

impl SegmenterModel {
    pub fn new(arch: SegmenterArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "seg", &arch, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            arch,
            store,
            net,
            threshold: DEFAULT_THRESHOLD,
            bbox_margin: DEFAULT_BBOX_MARGIN,
            epoch: 0,
        })
    }

    pub fn check(&self, image: &Image) -> Result<()> {
        let p = self.arch.patch_size;
        if image.dims() != (p, p) {
            return Err(Error::Shape(format!(
                "segmenter expects {p}x{p} images, got {}x{}",
                image.rows(),
                image.cols()
            )));
        }
        Ok(())
    }

    /// Foreground probability maps in inference mode.
    pub fn probabilities(&self, images: &[&Image]) -> Result<Vec<Image>> {
        for img in images {
            self.check(img)?;
        }
        let g = Graph::new();
        let x = g.constant(images_to_tensor(images)?);
        // inference never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, _) = self.net.forward(&g, &self.store, x, &mut Mode { train: false, rng: &mut rng });
        let probs = tensor_to_images(&p.value(), 1);
        Ok(probs)
    }

    pub fn result_from_probability(&self, probability: Image) -> SegmentationResult {
        let t = self.threshold as f32;
        let mask = probability.map(|&p| p >= t);
        let bbox = mask_to_bbox(&mask, self.bbox_margin);
        SegmentationResult { probability, mask, bbox }
    }

    pub fn segment_batch(&self, images: &[&Image]) -> Result<Vec<SegmentationResult>> {
        Ok(self
            .probabilities(images)?
            .into_iter()
            .map(|p| self.result_from_probability(p))
            .collect())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let arch = serde_json::json!({
            "segmenter": self.arch,
            "threshold": self.threshold,
            "bbox_margin": self.bbox_margin,
            "epoch": self.epoch,
        });
        Ok(Checkpoint::from_store("segmenter", arch, meta, &self.store))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "segmenter" {
            return Err(Error::Argument(format!("expected a segmenter checkpoint, got {}", ck.header.kind)));
        }
        let a = &ck.header.arch;
        let arch: SegmenterArch = serde_json::from_value(a["segmenter"].clone())?;
        let mut model = Self::new(arch, 0)?;
        ck.load_into(&mut model.store)?;
        model.threshold = a["threshold"].as_f64().unwrap_or(DEFAULT_THRESHOLD);
        model.bbox_margin = a["bbox_margin"].as_u64().map_or(DEFAULT_BBOX_MARGIN, |m| m as usize);
        model.epoch = a["epoch"].as_u64().unwrap_or(0) as usize;
        Ok(model)
    }
}

/// Segments one image: probabilities, thresholded mask and its box.
pub fn segment(model: &SegmenterModel, image: &Image) -> Result<SegmentationResult> {
    Ok(model.segment_batch(&[image])?.remove(0))
}

/// Serialisable summary of a [`SegmentationResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub foreground_pixels: usize,
    pub bbox: Option<BBox>,
}

impl From<&SegmentationResult> for SegmentationSummary {
    fn from(r: &SegmentationResult) -> Self {
        Self {
            foreground_pixels: r.mask.count(),
            bbox: r.bbox,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(rows: usize, cols: usize, pts: &[(usize, usize)]) -> Mask {
        let mut m = Mask::filled(rows, cols, false);
        for &(r, c) in pts {
            m.set(r, c, true);
        }
        m
    }

    #[test]
    fn bbox_examples() {
        let m = mask_from(10, 10, &[(2, 3), (5, 7)]);
        assert_eq!(mask_to_bbox(&m, 0), Some(BBox::new(2, 3, 5, 7).unwrap()));
        assert_eq!(mask_to_bbox(&m, 2), Some(BBox::new(0, 1, 7, 9).unwrap()));
        assert_eq!(mask_to_bbox(&Mask::filled(10, 10, false), 3), None);
    }

    proptest! {
        #[test]
        fn zero_margin_box_is_minimal(pts in prop::collection::vec((0usize..12, 0usize..9), 1..20)) {
            let m = mask_from(12, 9, &pts);
            let b = mask_to_bbox(&m, 0).unwrap();
            for &(r, c) in &pts {
                prop_assert!(b.row_min <= r && r <= b.row_max && b.col_min <= c && c <= b.col_max);
            }
            // every edge of the box touches a true pixel
            prop_assert!(pts.iter().any(|p| p.0 == b.row_min));
            prop_assert!(pts.iter().any(|p| p.0 == b.row_max));
            prop_assert!(pts.iter().any(|p| p.1 == b.col_min));
            prop_assert!(pts.iter().any(|p| p.1 == b.col_max));
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let truth = mask_from(4, 4, &[(0, 0), (1, 2), (3, 3)]);
        let perfect = truth.map(|&f| if f { 1.0 - CE_EPS as f32 } else { CE_EPS as f32 });
        assert!(weighted_cross_entropy_values(&perfect, &truth, [1.0, 1.0]).unwrap() < 1e-6);
        let half = Image::filled(4, 4, 0.5);
        let v = weighted_cross_entropy_values(&half, &truth, [1.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-4);
        let all_fg = Mask::filled(4, 4, true);
        let v = weighted_cross_entropy_values(&half, &all_fg, [1.0, 3.0]).unwrap();
        assert!((v - 3.0 * std::f64::consts::LN_2).abs() < 1e-4);
        assert!(weighted_cross_entropy_values(&half, &all_fg, [0.0, 1.0]).is_err());
        assert!(weighted_cross_entropy_values(&half, &mask_from(3, 4, &[]), [1.0, 1.0]).is_err());
    }

    #[test]
    fn graph_loss_matches_values() {
        let truth = mask_from(3, 5, &[(0, 1), (2, 4), (1, 1)]);
        let fg = Image::from_fn(3, 5, |r, c| ((r * 5 + c) as f32 * 0.37).fract());
        let mut data = fg.data().iter().map(|&p| 1.0 - p as f64).collect::<Vec<_>>();
        data.extend(fg.data().iter().map(|&p| p as f64));
        let g = Graph::<f64>::new();
        let probs = g.constant(Tensor::new(&[1, 2, 3, 5], data).unwrap());
        let w = [0.7, 2.5];
        let lv = weighted_cross_entropy(probs, &[&truth], w).unwrap().item();
        let direct = weighted_cross_entropy_values(&fg, &truth, w).unwrap();
        assert!((lv - direct).abs() < 1e-6, "{lv} vs {direct}");
        assert!(weighted_cross_entropy(probs, &[&truth, &truth], w).is_err());
        assert!(weighted_cross_entropy(probs, &[&truth], [1.0, -1.0]).is_err());
    }

    #[test]
    fn inverse_frequency_is_clipped_and_balanced() {
        let half = Mask::from_fn(4, 4, |r, _| r < 2);
        assert_eq!(inverse_frequency_weights(&[&half]), [1.0, 1.0]);
        let one = mask_from(16, 16, &[(3, 3)]);
        let w = inverse_frequency_weights(&[&one]);
        assert_eq!(w[1], 10.0);
        assert!((w[0] - 256.0 / 510.0).abs() < 1e-12);
        assert_eq!(inverse_frequency_weights(&[&Mask::filled(4, 4, false)])[1], 10.0);
    }

    #[test]
    fn segment_outputs_are_normalised_and_empty_masks_have_no_box() {
        let mut model = SegmenterModel::new(SegmenterArch::for_patch(16), 3).unwrap();
        let img = Image::from_fn(16, 16, |r, c| ((r * c) % 5) as f32 / 5.0);
        let res = segment(&model, &img).unwrap();
        assert!(res.probability.data().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(res.mask, res.probability.map(|&p| p >= 0.5));
        model.threshold = 1.1;
        let res = segment(&model, &img).unwrap();
        assert_eq!(res.mask.count(), 0);
        assert_eq!(res.bbox, None);
        assert!(matches!(segment(&model, &Image::filled(8, 8, 0.0)), Err(Error::Shape(_))));
    }
}
