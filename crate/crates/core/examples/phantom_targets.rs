//! Nested phantoms and their high-tissue-contrast targets, with the class
//! overlap of each measured by K-S.
use htc_core::data_io::{generate_phantom, PhantomSpec};
use htc_core::htc_target::{build_htc_target, class_overlap_report, class_stats, stage_labels, TargetDistribution};

fn main() -> htc_core::Result<()> {
    let spec = PhantomSpec::evenly_spaced(4, 64, 3, 0.1, 7);
    println!("class means {:?}", spec.source_means);
    let dist = TargetDistribution::default();
    for (i, sample) in generate_phantom(&spec)?.iter().enumerate() {
        let s = &sample.source;
        let source = class_overlap_report(&s.image, &s.labels, None)?;
        let worst = source.pairs.iter().map(|p| p.ks).fold(1.0, f64::min);

        // stage-2 target: tumor core and enhancing region are foreground
        let labels = stage_labels(&s.labels, &[2, 3]);
        let target = build_htc_target(&labels, &dist, i as u64)?;
        let stats = class_stats(&target, &labels)?;
        let htc = class_overlap_report(&target, &labels, None)?;
        println!(
            "slice {i}: closest source classes K-S {worst:.3}; target K-S {:.3}, class means {:.3}/{:.3}",
            htc.pairs[0].ks, stats.classes[&0].mean, stats.classes[&1].mean
        );
    }
    Ok(())
}
