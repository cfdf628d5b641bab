//! Trains the dense segmenter on raw phantoms and prints held-out Dice and
//! HD95 after every epoch.
use htc_core::data_io::{generate_phantom, PhantomSpec};
use htc_core::metrics::{dice, hd95};
use htc_core::segmentation::{segment, SegmenterArch, SegmenterConfig, SegmenterTrainer};
use htc_core::attention_cyclegan::TrainSink;
use htc_core::{Image, Mask};

fn main() -> htc_core::Result<()> {
    let samples = generate_phantom(&PhantomSpec::evenly_spaced(80, 32, 1, 0.15, 3))?;
    let images: Vec<Image> = samples.iter().map(|s| s.source.image.clone()).collect();
    let masks: Vec<Mask> = samples.iter().map(|s| s.source.labels.at_least(1)).collect();
    let (train, test) = (64, 80);

    let cfg = SegmenterConfig {
        epochs: 5,
        ..SegmenterConfig::default()
    };
    let mut trainer = SegmenterTrainer::from_arch(SegmenterArch::for_patch(32), cfg, TrainSink::default())?;
    println!("{} parameters", trainer.model.store.num_scalars());
    for _ in 0..5 {
        let rec = trainer.run_epoch(&images[..train], &masks[..train])?;
        let (mut d, mut h) = (0.0, 0.0);
        for (img, m) in images[train..test].iter().zip(&masks[train..test]) {
            let r = segment(&trainer.model, img)?;
            d += dice(&r.mask, m)?;
            h += hd95(&r.mask, m, [1.0, 1.0])?.unwrap_or(f64::NAN);
        }
        let n = (test - train) as f64;
        println!("epoch {} loss {:.4} Dice {:.4} HD95 {:.2}", rec.epoch + 1, rec.seg, d / n, h / n);
    }
    Ok(())
}
