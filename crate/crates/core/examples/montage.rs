//! Source, attention, synthetic and target panels of an untrained model
//! written as a PNG montage.
use htc_core::attention_cyclegan::{SynthesisArch, SynthesisModel};
use htc_core::data_io::{generate_phantom, PhantomSpec};
use htc_core::htc_target::{build_htc_target, TargetDistribution};
use htc_core::montage::{montage, MontageCase};

fn main() -> htc_core::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "montage.png".into());
    let samples = generate_phantom(&PhantomSpec::evenly_spaced(3, 64, 1, 0.15, 4))?;
    let model = SynthesisModel::new(SynthesisArch::for_patch(64), 0)?;
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (synthetic, attention) = model.synthesize(&s.source.image)?;
        let target = build_htc_target(&s.source.labels, &TargetDistribution::default(), i as u64)?;
        rows.push((s.source.image.clone(), attention, synthetic, target));
    }
    let cases: Vec<MontageCase> = rows
        .iter()
        .map(|(source, attention, synthetic, target)| MontageCase { source, attention, synthetic, target })
        .collect();
    montage(&cases, out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
