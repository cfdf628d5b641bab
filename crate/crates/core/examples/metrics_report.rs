//! Builds a report for a deliberately imperfect prediction and prints it as
//! JSON and CSV.
use htc_core::data_io::{generate_phantom, PhantomSpec};
use htc_core::htc_target::{build_htc_dataset, TargetDistribution};
use htc_core::metrics::{evaluate_stage, MetricsConfig, StageInputs};
use htc_core::{Image, LabelMap};

fn main() -> htc_core::Result<()> {
    let samples = generate_phantom(&PhantomSpec::evenly_spaced(5, 48, 1, 0.15, 9))?;
    let truth: Vec<LabelMap> = samples.iter().map(|s| s.source.labels.clone()).collect();
    // shift every prediction two pixels right
    let preds: Vec<LabelMap> = truth
        .iter()
        .map(|l| LabelMap::from_fn(48, 48, |r, c| if c >= 2 { *l.get(r, c - 2) } else { 0 }))
        .collect();
    let sources: Vec<Image> = samples.iter().map(|s| s.source.image.clone()).collect();
    let targets = build_htc_dataset(&truth, &TargetDistribution::default(), 10)?;
    let report = evaluate_stage(
        &StageInputs {
            predictions: &preds,
            ground_truth: &truth,
            synthetic: Some(&sources),
            target: Some(&targets),
            labels: Some(&truth),
        },
        &MetricsConfig::default(),
        serde_json::json!({ "example": "metrics_report" }),
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    print!("{}", report.to_csv());
    Ok(())
}
