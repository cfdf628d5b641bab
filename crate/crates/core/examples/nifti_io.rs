//! Writes a small scan as float32 and scaled int16 NIfTI, reads both back,
//! then standardises the volume and pulls out centred axial slices.
use htc_core::data_io::{extract_slices, load_nifti, normalize_volume, write_nifti, Modality, NiftiStorage, Volume};

fn main() -> htc_core::Result<()> {
    let dims = [24, 20, 6];
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|i| {
            let (x, y) = ((i % 24) as f32 - 12.0, ((i / 24) % 20) as f32 - 10.0);
            if x * x + y * y < 64.0 { 100.0 + x * 3.0 + y } else { 0.0 }
        })
        .collect();
    let labels: Vec<f32> = data.iter().map(|&v| if v > 105.0 { 1.0 } else { 0.0 }).collect();
    let scan = Volume::new(dims, data, [1.0, 1.0, 2.5], Modality::T2)?;
    let seg = Volume::new(dims, labels, [1.0, 1.0, 2.5], Modality::T2)?;

    let dir = std::env::temp_dir().join("htc_nifti_example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let f32_path = dir.join("scan.nii");
    let i16_path = dir.join("scan_i16.nii");
    write_nifti(&f32_path, &scan, NiftiStorage::Float32)?;
    write_nifti(&i16_path, &scan, NiftiStorage::Int16 { slope: 0.5, inter: 0.0 })?;

    let exact = load_nifti(&f32_path)?;
    let scaled = load_nifti(&i16_path)?;
    let worst = scan.data.iter().zip(&scaled.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("float32 round trip exact: {}", exact.data == scan.data);
    println!("int16 (slope 0.5) worst error: {worst}");

    let norm = normalize_volume(&scan)?;
    let slices = extract_slices(&norm, &seg, 0.1, 16)?;
    println!("{} of {} slices kept as 16x16 crops", slices.len(), dims[2]);
    Ok(())
}
