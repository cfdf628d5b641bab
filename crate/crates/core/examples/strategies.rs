//! Two-stage versus end-to-end training of one stage on the same phantoms.
use htc_core::data_io::{generate_phantom, LabeledSlice, PhantomSpec};
use htc_core::pipeline::{run_stage, StageConfig, Strategy};

fn main() -> htc_core::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let slices: Vec<LabeledSlice> = generate_phantom(&PhantomSpec::evenly_spaced(60, 32, 1, 0.15, 8))?
        .into_iter()
        .map(|s| s.source)
        .collect();
    let (train, val) = slices.split_at(48);
    for strategy in [Strategy::TwoStage, Strategy::EndToEnd] {
        let stage = StageConfig::nested(1, 1, 32, strategy, epochs, 0);
        let result = run_stage(&stage, train, val, None)?;
        let report = result.report.expect("validation slices given");
        println!(
            "{strategy:?}: Dice {:.4}, synthetic foreground K-S {:.3}, SSIM {:.3}",
            report.regions["region_1"].mean,
            report.regions["class_1"].ks.unwrap_or(f64::NAN),
            report.regions["image"].mean
        );
    }
    Ok(())
}
