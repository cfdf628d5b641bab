//! Three-stage coarse-to-fine cascade on nested phantoms: first with label
//! oracles standing in for the models, then with briefly trained stages.
use htc_core::data_io::{generate_phantom, LabeledSlice, PhantomSpec};
use htc_core::pipeline::{run_cascade, train_cascade, OraclePredictor, StageConfig, StagePredictor, Strategy};

fn main() -> htc_core::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let slices: Vec<LabeledSlice> = generate_phantom(&PhantomSpec::evenly_spaced(40, 64, 3, 0.1, 5))?
        .into_iter()
        .map(|s| s.source)
        .collect();
    let (train, test) = slices.split_at(32);
    let stages: Vec<StageConfig> = [64, 48, 32]
        .iter()
        .enumerate()
        .map(|(k, &patch)| {
            let mut s = StageConfig::nested(k + 1, 3, patch, Strategy::TwoStage, epochs, k as u64);
            s.training.bbox_margin = 0;
            s
        })
        .collect();

    let oracles: Vec<OraclePredictor> = stages.iter().map(|s| OraclePredictor { foreground: s.foreground.clone() }).collect();
    let refs: Vec<&dyn StagePredictor> = oracles.iter().map(|o| o as &dyn StagePredictor).collect();
    let exact = run_cascade(&stages, &refs, test)?;
    let matches = exact.cases.iter().zip(test).filter(|(c, s)| c.label_map == s.labels).count();
    println!("oracle cascade reproduces {matches}/{} label maps", test.len());

    let trained = train_cascade(&stages, train, test, None)?;
    let models: Vec<_> = trained.into_iter().filter_map(|r| r.models).collect();
    let refs: Vec<&dyn StagePredictor> = models.iter().map(|m| m as &dyn StagePredictor).collect();
    let out = run_cascade(&stages, &refs, test)?;
    for (k, r) in out.reports.iter().enumerate() {
        let region = &r.regions["region_1"];
        println!("stage {} Dice {:.4} ± {:.4}", k + 1, region.mean, region.std);
    }
    Ok(())
}
