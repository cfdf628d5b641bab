//! One pass/fail line per acceptance criterion.
//!
//! `ACCEPTANCE_CRITERIA=4,6` runs a subset. Criteria 4 to 6 are training
//! outcomes: they are reported but do not fail the test run.

mod common;

use std::time::Instant;

use htc_core::attention_cyclegan::{
    adversarial_loss_values, compose_images, cycle_loss, synthesis_loss, LossWeights, SynthLossBreakdown,
    SynthesisArch, SynthesisConfig, SynthesisModel, SynthesisTrainer, TrainSink,
};
use htc_core::data_io::{
    center_offset, crop_to_bbox, extract_slices, generate_phantom, load_nifti, normalize_volume, write_nifti, BBox,
    LabeledSlice, Modality, NiftiStorage, PhantomSpec, Volume,
};
use htc_core::htc_target::{build_htc_dataset, ClassDist, build_htc_target, class_overlap_report, class_stats, TargetDistribution};
use htc_core::metrics::{
    boundary, dice, evaluate_stage, hd95, ks_statistic, psnr, ssim, MetricsConfig, SsimParams, StageInputs,
};
use htc_core::montage::{montage_grid, MontageCase};
use htc_core::pipeline::{run_cascade, run_stage, total_loss, train_cascade, StageConfig, StagePredictor, Strategy};
use htc_core::segmentation::{
    mask_to_bbox, segment, train_segmenter, weighted_cross_entropy_values, SegmenterArch,
    SegmenterModel,
};
use htc_core::{Image, LabelMap, Mask};
use htc_nn::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Named boolean checks; the outcome lists the failures.
#[derive(Default)]
struct Checks {
    total: usize,
    failed: Vec<String>,
}

impl Checks {
    fn check(&mut self, name: &str, ok: bool) {
        self.total += 1;
        if !ok {
            self.failed.push(name.to_string());
        }
    }

    fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        let ok = (got - want).abs() <= tol;
        self.check(&format!("{name} (got {got}, want {want})"), ok);
    }

    fn outcome(self, extra: String) -> Outcome {
        let detail = if self.failed.is_empty() {
            format!("{} checks{extra}", self.total)
        } else {
            format!("{}/{} checks failed: {}{extra}", self.failed.len(), self.total, self.failed.join("; "))
        };
        Outcome::new(self.failed.is_empty(), detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn images_equal_bits(a: &Image, b: &Image) -> bool {
    a.dims() == b.dims() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn tensor(values: &[f64]) -> Tensor<f64> {
    Tensor::new(&[1, 1, 1, values.len()], values.to_vec()).unwrap()
}

fn cycle_value(a: &[f64], b: &[f64]) -> f64 {
    let g = Graph::<f64>::new();
    cycle_loss(g.constant(tensor(a)), g.constant(tensor(b))).unwrap().item()
}

/// Linear-interpolated percentile, written out independently of the library.
fn oracle_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn oracle_hd95(a: &Mask, b: &Mask) -> f64 {
    let pts = |m: &Mask| -> Vec<(f64, f64)> {
        let e = boundary(m);
        (0..m.rows())
            .flat_map(|r| (0..m.cols()).map(move |c| (r, c)))
            .filter(|&(r, c)| *e.get(r, c))
            .map(|(r, c)| (r as f64, c as f64))
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|p| to.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .collect()
    };
    oracle_percentile(directed(&pa, &pb), 95.0).max(oracle_percentile(directed(&pb, &pa), 95.0))
}

/// Brute-force two-sample K-S: evaluate both ECDFs at every sample point.
fn oracle_ks(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |v: &[f64], x: f64| v.iter().filter(|&&y| y <= x).count() as f64 / v.len() as f64;
    a.iter().chain(b).map(|&x| (ecdf(a, x) - ecdf(b, x)).abs()).fold(0.0, f64::max)
}

fn square(size: usize, r0: usize, c0: usize, side: usize) -> Mask {
    Mask::from_fn(size, size, |r, c| (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c))
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dir = tempfile::tempdir().unwrap();

    // NIfTI
    let vol = Volume::new([3, 2, 2], (0..12).map(|i| i as f32 * 0.37 - 1.1).collect(), [1.0, 1.2, 2.5], Modality::T1).unwrap();
    let p = dir.path().join("v.nii");
    write_nifti(&p, &vol, NiftiStorage::Float32).unwrap();
    let back = load_nifti(&p).unwrap();
    c.check("nifti float32 round trip", back.data.iter().zip(&vol.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[344..348].copy_from_slice(b"ni1\0");
    let pair = dir.path().join("pair.nii");
    std::fs::write(&pair, &bytes).unwrap();
    c.check("two-file magic rejected", load_nifti(&pair).is_err());
    let raw: [i16; 4] = [-3, 0, 5, 7];
    let scaled = Volume::new([2, 2, 1], raw.iter().map(|&r| 2.0 * r as f32 + 1.0).collect(), [1.0; 3], Modality::T1).unwrap();
    let sp = dir.path().join("s.nii");
    write_nifti(&sp, &scaled, NiftiStorage::Int16 { slope: 2.0, inter: 1.0 }).unwrap();
    let sb = std::fs::read(&sp).unwrap();
    let off = f32::from_le_bytes(sb[108..112].try_into().unwrap()) as usize;
    let stored: Vec<i16> = (0..4).map(|i| i16::from_le_bytes([sb[off + 2 * i], sb[off + 2 * i + 1]])).collect();
    c.check("int16 payload stored raw", stored == raw);
    let loaded = load_nifti(&sp).unwrap();
    c.check("int16 scaling 2*raw+1", loaded.data.iter().zip(&raw).all(|(&v, &r)| v == 2.0 * r as f32 + 1.0));

    // normalisation
    let three = Volume::new([3, 1, 1], vec![1.0, 2.0, 3.0], [1.0; 3], Modality::T1).unwrap();
    let n = normalize_volume(&three).unwrap();
    for (got, want) in n.data.iter().zip([-1.224_744_9, 0.0, 1.224_744_9]) {
        c.close("standardised three points", *got as f64, want, 1e-4);
    }
    let noisy = Volume::new([8, 8, 2], (0..128).map(|i| if i % 5 == 0 { 0.0 } else { rng.gen_range(0.5..9.0) }).collect(), [1.0; 3], Modality::T1).unwrap();
    let n = normalize_volume(&noisy).unwrap();
    let inside: Vec<f64> = n.data.iter().zip(&n.brain_mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64).collect();
    let m = mean(&inside);
    let sd = (inside.iter().map(|v| (v - m).powi(2)).sum::<f64>() / inside.len() as f64).sqrt();
    c.close("normalised mean", m, 0.0, 1e-5);
    c.close("normalised std", sd, 1.0, 1e-5);

    // slice selection and centre crop
    let mut data = vec![0.0f32; 10 * 10 * 2];
    for (i, v) in data[100..].iter_mut().enumerate() {
        if i < 60 {
            *v = 1.0;
        }
    }
    let v2 = Volume::new([10, 10, 2], data.clone(), [1.0; 3], Modality::T1).unwrap();
    let labels = Volume::new([10, 10, 2], vec![0.0; 200], [1.0; 3], Modality::T1).unwrap();
    let kept = extract_slices(&v2, &labels, 0.5, 10).unwrap();
    c.check("empty slice dropped, 60% slice kept", kept.len() == 1 && kept[0].image.data().iter().filter(|&&x| x != 0.0).count() == 60);
    c.check("centre offset 56", center_offset(240, 128) == 56);

    // bbox crops
    let slice = |size: usize| {
        LabeledSlice::new(
            Image::from_fn(size, size, |r, c| (r * size + c) as f32),
            LabelMap::filled(size, size, 0),
            [1.0, 1.0],
            Modality::Phantom,
        )
        .unwrap()
    };
    let s64 = slice(64);
    let id = crop_to_bbox(&s64, &BBox::full(64, 64), 64, 0).unwrap();
    c.check("identity crop", id.slice.image == s64.image);
    let s128 = slice(128);
    let cr = crop_to_bbox(&s128, &BBox::new(10, 10, 20, 20).unwrap(), 96, 0).unwrap();
    c.check("crop shifted to [0,95]", cr.window.to_global(0, 0) == (0, 0) && cr.window.to_global(95, 95) == (95, 95));
    let pad = crop_to_bbox(&s64, &BBox::full(64, 64), 96, 0).unwrap();
    c.check(
        "symmetric zero padding",
        pad.slice.dims() == (96, 96) && pad.window.to_global(16, 16) == (0, 0) && *pad.slice.image.get(15, 40) == 0.0,
    );

    // phantoms
    let spec = PhantomSpec::evenly_spaced(20, 64, 1, 0.15, 3);
    let a = generate_phantom(&spec).unwrap();
    let b = generate_phantom(&spec).unwrap();
    c.check("phantom reruns identical", a.iter().zip(&b).all(|(x, y)| images_equal_bits(&x.source.image, &y.source.image) && x.source.labels == y.source.labels));
    let flat = generate_phantom(&PhantomSpec { source_stds: vec![0.0, 0.0, 0.0], ..PhantomSpec::evenly_spaced(3, 32, 2, 0.0, 4) }).unwrap();
    c.check(
        "zero-std phantom is piecewise constant",
        flat.iter().all(|s| s.source.image.data().iter().zip(s.source.labels.data()).all(|(&v, &l)| v == [0.3f64, 0.5, 0.7][l as usize] as f32)),
    );
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for s in &a {
        for (&v, &l) in s.source.image.data().iter().zip(s.source.labels.data()) {
            if l > 0 { fg.push(v as f64) } else { bg.push(v as f64) }
        }
    }
    let ks_pix = ks_statistic(&fg, &bg).unwrap();
    let draw = |m: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let d = Normal::new(m, 0.15).unwrap();
        (0..100_000).map(|_| d.sample(rng).clamp(0.0, 1.0)).collect()
    };
    let ks_oracle = ks_statistic(&draw(0.6, &mut rng), &draw(0.4, &mut rng)).unwrap();
    c.close("phantom class K-S vs sampling oracle", ks_pix, ks_oracle, 0.02);
    c.check("phantom classes overlap", ks_pix < 0.6);

    // HTC targets
    let lab = LabelMap::from_fn(16, 16, |r, _| (r >= 8) as u8);
    let exact = build_htc_target(&lab, &TargetDistribution::binary(0.75, 0.0, 0.25, 0.0), 0).unwrap();
    c.check("zero-std target exact", exact.data().iter().zip(lab.data()).all(|(&v, &l)| v == if l == 1 { 0.75 } else { 0.25 }));
    let bgmap = LabelMap::filled(100, 100, 0);
    let t = build_htc_target(&bgmap, &TargetDistribution::default(), 5).unwrap();
    let tm = mean(&t.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    c.check("background mean within 3 standard errors", (tm - 0.25).abs() <= 3.0 * 0.05 / 100.0);
    c.check("target reruns identical", images_equal_bits(&t, &build_htc_target(&bgmap, &TargetDistribution::default(), 5).unwrap()));
    let stats = class_stats(&Image::filled(16, 16, 0.3), &lab).unwrap();
    c.check("constant image stats", stats.classes.values().all(|s| s.mean as f32 == 0.3 && s.std == 0.0));
    let stats = class_stats(&exact, &lab).unwrap();
    c.check("target class means exact", stats.classes[&0].mean as f32 == 0.25 && stats.classes[&1].mean as f32 == 0.75);
    let checker = LabelMap::from_fn(8, 8, |r, c| ((r + c) % 2) as u8);
    let stats = class_stats(&checker.map(|&l| l as f32), &checker).unwrap();
    c.check("checkerboard halves", stats.classes[&0].count == 32 && stats.classes[&1].count == 32);
    let ov = class_overlap_report(&exact, &lab, None).unwrap();
    c.check("disjoint classes K-S 1", ov.pairs[0].ks == 1.0);
    let same = build_htc_target(&LabelMap::from_fn(200, 200, |r, _| (r >= 100) as u8), &TargetDistribution::binary(0.5, 0.05, 0.5, 0.05), 6).unwrap();
    let ov = class_overlap_report(&same, &LabelMap::from_fn(200, 200, |r, _| (r >= 100) as u8), None).unwrap();
    c.check("equal classes K-S near 0", ov.pairs[0].ks < 0.03);
    let sep = build_htc_target(&LabelMap::from_fn(200, 200, |r, _| (r >= 100) as u8), &TargetDistribution::default(), 7).unwrap();
    let ov = class_overlap_report(&sep, &LabelMap::from_fn(200, 200, |r, _| (r >= 100) as u8), None).unwrap();
    c.close("separated classes K-S", ov.pairs[0].ks, 1.0, 1e-5);

    // attention and composition
    let model = SynthesisModel::new(SynthesisArch::for_patch(16), 2).unwrap();
    let x1 = Image::from_fn(16, 16, |r, c| ((r * 7 + c * 3) % 11) as f32 / 10.0);
    let x2 = Image::from_fn(16, 16, |r, c| ((r + c) % 2) as f32);
    let (a1, a2) = (model.attention_forward(&x1, false).unwrap(), model.attention_forward(&x2, false).unwrap());
    c.check("attention shape and open range", a1.dims() == (16, 16) && a1.data().iter().all(|&v| v > 0.0 && v < 1.0));
    c.check("attention not constant", a1 != a2);
    let (s1, _) = model.synthesize(&x1).unwrap();
    c.check("synthetic output in [0,1]", s1.data().iter().all(|v| (0.0..=1.0).contains(v)));
    c.check("fresh generator near identity", ssim(&s1, &x1, &SsimParams { window: 7, ..SsimParams::default() }).unwrap() > 0.95);
    let (s, g) = (Image::filled(4, 4, 0.2), Image::filled(4, 4, 0.8));
    c.check("compose a=0", compose_images(&s, &Image::filled(4, 4, 0.0), &g).unwrap() == s);
    c.check("compose a=1", compose_images(&s, &Image::filled(4, 4, 1.0), &g).unwrap() == g);
    let half = compose_images(&s, &Image::filled(4, 4, 0.5), &g).unwrap();
    c.check("compose a=0.5", half.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));

    // losses
    c.close("adversarial at 0.5", adversarial_loss_values(&[0.5; 6], &[0.5; 6]).unwrap(), 2.0 * 0.5f64.ln(), 1e-4);
    c.close("adversarial perfect", adversarial_loss_values(&[1.0 - 1e-9; 3], &[1e-9; 3]).unwrap(), 0.0, 1e-4);
    let (dr, df): (Vec<f64>, Vec<f64>) = (0..50).map(|_| (rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99))).unzip();
    let oracle = dr.iter().map(|p| p.ln()).sum::<f64>() / 50.0 + df.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 50.0;
    c.close("adversarial vs elementwise oracle", adversarial_loss_values(&dr, &df).unwrap(), oracle, 1e-6);
    c.close("cycle identical", cycle_value(&[0.3, 0.7], &[0.3, 0.7]), 0.0, 0.0);
    c.close("cycle swapped", cycle_value(&[0.0, 1.0], &[1.0, 0.0]), 1.0, 1e-12);
    let oracle = dr.iter().zip(&df).map(|(a, b)| (a - b).abs()).sum::<f64>() / 50.0;
    c.close("cycle vs elementwise oracle", cycle_value(&dr, &df), oracle, 1e-6);
    let terms = SynthLossBreakdown { adv_s: 1.0, cyc_s: 2.0, adv_t: 3.0, cyc_t: 4.0, seg: None };
    let only = LossWeights { lambda1: 0.0, lambda2: 1.0, lambda3: 0.0, lambda4: 0.0, lambda5: 0.0 };
    c.close("only cyc_s weighted", synthesis_loss(&terms, &only), 2.0, 0.0);
    let ones = LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, lambda4: 1.0, lambda5: 1.0 };
    c.close("unit weights", synthesis_loss(&terms, &ones), 10.0, 1e-12);
    c.close("total loss lambda5=0", total_loss(7.5, 3.25, 0.0), 3.25, 0.0);
    c.close("total loss 2+3", total_loss(2.0, 3.0, 1.0), 5.0, 1e-12);
    c.close("total loss 0.5*4+1", total_loss(4.0, 1.0, 0.5), 3.0, 1e-12);

    // segmentation
    let truth = Mask::from_fn(4, 4, |r, _| r < 2);
    let perfect = truth.map(|&t| if t { 1.0 - 1e-9 } else { 1e-9 });
    c.close("cross-entropy perfect", weighted_cross_entropy_values(&perfect, &truth, [1.0, 1.0]).unwrap(), 0.0, 1e-6);
    let uniform = Image::filled(4, 4, 0.5);
    c.close("cross-entropy uniform", weighted_cross_entropy_values(&uniform, &truth, [1.0, 1.0]).unwrap(), 2f64.ln(), 1e-4);
    let all = Mask::filled(4, 4, true);
    c.close("cross-entropy weight 3", weighted_cross_entropy_values(&uniform, &all, [1.0, 3.0]).unwrap(), 3.0 * 2f64.ln(), 1e-4);
    let seg = SegmenterModel::new(SegmenterArch::for_patch(16), 0).unwrap();
    let prob = &seg.probabilities(&[&x1]).unwrap()[0];
    c.check("probabilities in [0,1]", prob.data().iter().all(|v| (0.0..=1.0).contains(v)));
    c.check("all-background has no box", seg.result_from_probability(Image::filled(16, 16, 0.0)).bbox.is_none());
    let two = Mask::from_fn(10, 10, |r, c| (r, c) == (2, 3) || (r, c) == (5, 7));
    c.check("bbox margin 0", mask_to_bbox(&two, 0) == Some(BBox::new(2, 3, 5, 7).unwrap()));
    c.check("bbox margin 2 clipped", mask_to_bbox(&two, 2) == Some(BBox::new(0, 1, 7, 9).unwrap()));
    c.check("empty mask has no box", mask_to_bbox(&Mask::filled(10, 10, false), 0).is_none());

    // metrics
    let ka = [0.1, 0.2, 0.3, 0.4];
    let kb = [0.15, 0.25, 0.35, 0.45];
    c.close("K-S identical", ks_statistic(&ka, &ka).unwrap(), 0.0, 0.0);
    c.close("K-S disjoint", ks_statistic(&ka, &[0.5, 0.6]).unwrap(), 1.0, 0.0);
    c.close("K-S interleaved", ks_statistic(&ka, &kb).unwrap(), oracle_ks(&ka, &kb), 1e-12);
    c.close("K-S interleaved value", ks_statistic(&ka, &kb).unwrap(), 0.25, 1e-12);
    let (ra, rb): (Vec<f64>, Vec<f64>) = (0..300).map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.2..1.0))).unzip();
    c.close("K-S random vs brute force", ks_statistic(&ra, &rb).unwrap(), oracle_ks(&ra, &rb), 1e-12);
    let img = Image::from_fn(16, 16, |r, c| ((r * 16 + c) % 9) as f32 / 10.0);
    c.check("PSNR identical is infinite", psnr(&img, &img, 1.0).unwrap() == f64::INFINITY);
    let shifted = img.map(|&v| v + 0.1);
    c.close("PSNR 20 dB", psnr(&img, &shifted, 1.0).unwrap(), 20.0, 1e-4);
    let noisy_img = img.map(|&v| v + 0.05 * ((v * 37.0).sin()));
    let mse = img.data().iter().zip(noisy_img.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / 256.0;
    c.close("PSNR vs formula", psnr(&img, &noisy_img, 1.0).unwrap(), 10.0 * (1.0 / mse).log10(), 1e-6);
    let p = SsimParams::default();
    c.check("SSIM identical", ssim(&img, &img, &p).unwrap() == 1.0);
    c.check("SSIM equal constants", ssim(&Image::filled(16, 16, 0.4), &Image::filled(16, 16, 0.4), &p).unwrap() == 1.0);
    let want = (2.0 * 0.16 + 1e-4) / (0.04 + 0.64 + 1e-4);
    c.close("SSIM constants 0.2 vs 0.8", ssim(&Image::filled(16, 16, 0.2), &Image::filled(16, 16, 0.8), &p).unwrap(), want, 1e-3);
    let sq = square(10, 2, 2, 3);
    c.close("Dice identical", dice(&sq, &sq).unwrap(), 1.0, 0.0);
    c.close("Dice disjoint", dice(&sq, &square(10, 6, 6, 3)).unwrap(), 0.0, 0.0);
    let da = Mask::from_fn(4, 4, |r, c| r == 0 && c < 4);
    let db = Mask::from_fn(4, 4, |r, c| (r == 0 && c < 2) || (r == 1 && c < 2));
    c.close("Dice half", dice(&da, &db).unwrap(), 0.5, 1e-12);
    c.close("HD95 identical", hd95(&sq, &sq, [1.0, 1.0]).unwrap().unwrap(), 0.0, 0.0);
    let dot = |r, c| Mask::from_fn(12, 12, move |y, x| (y, x) == (r, c));
    c.close("HD95 single pixels", hd95(&dot(2, 2), &dot(2, 7), [1.0, 1.0]).unwrap().unwrap(), 5.0, 1e-9);
    let (qa, qb) = (square(10, 2, 2, 3), square(10, 4, 2, 3));
    c.close("HD95 vs brute force", hd95(&qa, &qb, [1.0, 1.0]).unwrap().unwrap(), oracle_hd95(&qa, &qb), 1e-9);
    let gt = vec![LabelMap::from_fn(16, 16, |r, c| ((r / 4 + c / 4) % 3) as u8); 2];
    let imgs = vec![img.clone(), shifted.clone()];
    let rep = evaluate_stage(
        &StageInputs { predictions: &gt, ground_truth: &gt, synthetic: Some(&imgs), target: Some(&imgs), labels: Some(&gt) },
        &MetricsConfig::default(),
        serde_json::Value::Null,
    )
    .unwrap();
    c.check("report Dice 1 per region", rep.regions["region_1"].dice == Some(1.0) && rep.regions["region_2"].dice == Some(1.0));
    c.check(
        "report synthetic=target identities",
        rep.regions["image"].ssim == Some(1.0) && rep.regions["image"].psnr == Some(f64::INFINITY) && rep.regions["class_1"].ks == Some(0.0),
    );

    // montage
    let panel = Image::filled(64, 64, 1.7);
    let case = MontageCase { source: &panel, attention: &panel, synthetic: &panel, target: &panel };
    c.check("montage one row", montage_grid(&[case]).unwrap().dims() == (64, 4 * 64 + 3));
    c.check("montage three rows", montage_grid(&[case; 3]).unwrap().rows() == 3 * 64 + 2);
    c.check("montage clamps", montage_grid(&[case]).unwrap().get(0, 0) == &255);

    let secs = t0.elapsed().as_secs_f64();
    c.check(&format!("runtime {secs:.1}s < 10s"), secs < 10.0);
    c.outcome(format!(", {secs:.1}s"))
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let runs = [("adversarial", common::adversarial_gradcheck(3)), ("cycle", common::cycle_gradcheck(5)), ("cross-entropy", common::wce_gradcheck(11))];
    let secs = t0.elapsed().as_secs_f64();
    let pass = runs.iter().all(|(_, r)| r.params <= 500 && r.relative_error < 1e-3) && secs < 60.0;
    let detail = runs
        .iter()
        .map(|(n, r)| format!("{n} rel {:.2e} ({} params)", r.relative_error, r.params))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("{detail}, {secs:.1}s"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut model = SynthesisModel::new(SynthesisArch::for_patch(16), 9).unwrap();
    model.make_generators_identity();
    let mut failures = 0;
    for _ in 0..100 {
        let s = Image::from_fn(16, 16, |_, _| rng.gen::<f32>());
        let a = Image::from_fn(16, 16, |_, _| rng.gen::<f32>());
        let g = Image::from_fn(16, 16, |_, _| rng.gen::<f32>());
        let ok = compose_images(&s, &Image::filled(16, 16, 0.0), &g).unwrap() == s
            && compose_images(&s, &Image::filled(16, 16, 1.0), &g).unwrap() == g
            && compose_images(&s, &a, &s).unwrap() == s
            && model.synthesize(&s).unwrap().0 == s;
        failures += usize::from(!ok);
    }
    Outcome::new(failures == 0, format!("{failures}/100 random inputs broke an identity"))
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let spec = PhantomSpec::evenly_spaced(200, 64, 1, 0.15, 40);
    let samples = generate_phantom(&spec).unwrap();
    let labels: Vec<LabelMap> = samples.iter().map(|s| s.source.labels.clone()).collect();
    let sources: Vec<Image> = samples.iter().map(|s| s.source.image.clone()).collect();
    let dist = TargetDistribution::binary(0.75, 0.05, 0.25, 0.05);
    let pool = build_htc_dataset(&labels, &dist, 41).unwrap();
    let targets: Vec<Image> = samples.iter().map(|s| pool[s.target_index.unwrap()].clone()).collect();

    let held = generate_phantom(&PhantomSpec { count: 40, seed: 42, ..spec.clone() }).unwrap();
    let held_labels: Vec<LabelMap> = held.iter().map(|s| s.source.labels.clone()).collect();
    let held_targets = build_htc_dataset(&held_labels, &dist, 43).unwrap();

    let cfg = SynthesisConfig { epochs: 30, switch_epoch: 10, seed: 44, ..SynthesisConfig::default() };
    let mut tr = SynthesisTrainer::from_arch(SynthesisArch::for_patch(64), cfg, TrainSink::default()).unwrap();
    let evaluate = |m: &SynthesisModel| {
        let (mut syn, mut inside, mut outside) = (Vec::new(), Vec::new(), Vec::new());
        for (s, l) in held.iter().zip(&held_labels) {
            let (img, att) = m.synthesize(&s.source.image).unwrap();
            for (&a, &lab) in att.data().iter().zip(l.data()) {
                if lab > 0 { inside.push(a as f64) } else { outside.push(a as f64) }
            }
            syn.push(img);
        }
        let rep = evaluate_stage(
            &StageInputs {
                predictions: &held_labels,
                ground_truth: &held_labels,
                synthetic: Some(&syn),
                target: Some(&held_targets),
                labels: Some(&held_labels),
            },
            &MetricsConfig::default(),
            serde_json::Value::Null,
        )
        .unwrap();
        (rep.regions["class_1"].ks.unwrap(), mean(&inside) / mean(&outside), rep.regions["image"].ssim.unwrap())
    };
    let (ks0, _, ssim0) = evaluate(&tr.model);
    tr.train(&sources, &targets, None).unwrap();
    let (ks, ratio, ssim1) = evaluate(&tr.model);
    let secs = t0.elapsed().as_secs_f64();
    let parts = [ks <= 0.35, ratio >= 2.0, ssim1 - ssim0 >= 0.15, secs <= 1800.0];
    Outcome::new(
        parts.iter().all(|&p| p),
        format!(
            "(a) pooled K-S {ks:.3} (epoch 0 {ks0:.3}) <= 0.35 {}, (b) attention ratio {ratio:.2} >= 2 {}, \
             (c) SSIM {ssim0:.3} -> {ssim1:.3} gain {:.3} >= 0.15 {}, {secs:.0}s <= 1800s {}",
            parts[0], parts[1], ssim1 - ssim0, parts[2], parts[3]
        ),
    )
}

fn held_out_dice(model: &SegmenterModel, images: &[Image], masks: &[Mask]) -> f64 {
    mean(&images.iter().zip(masks).map(|(i, m)| dice(&segment(model, i).unwrap().mask, m).unwrap()).collect::<Vec<_>>())
}

fn criterion_5() -> Outcome {
    const EPOCHS: usize = 8;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let spec = PhantomSpec::evenly_spaced(96, 32, 1, 0.15, 500 + seed);
        let slices: Vec<LabeledSlice> = generate_phantom(&spec).unwrap().into_iter().map(|s| s.source).collect();
        let (train, test) = slices.split_at(64);
        let stage = |strategy| {
            let mut s = StageConfig::nested(1, 1, 32, strategy, EPOCHS, seed);
            s.training.samples = 0;
            s
        };
        let dice_of = |strategy| {
            let st = stage(strategy);
            let r = run_stage(&st, train, test, None).unwrap();
            r.report.unwrap().regions["region_1"].mean
        };
        let two = dice_of(Strategy::TwoStage);
        let e2e = dice_of(Strategy::EndToEnd);
        let st = stage(Strategy::TwoStage);
        let images: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
        let masks: Vec<Mask> = train.iter().map(|s| s.labels.at_least(1)).collect();
        let (raw_model, _) = train_segmenter(&images, &masks, st.segmenter_arch(), st.segmenter_config(), None).unwrap();
        let test_images: Vec<Image> = test.iter().map(|s| s.image.clone()).collect();
        let test_masks: Vec<Mask> = test.iter().map(|s| s.labels.at_least(1)).collect();
        let raw = held_out_dice(&raw_model, &test_images, &test_masks);
        let ok = two >= raw && e2e >= two - 0.02;
        wins += usize::from(ok);
        lines.push(format!("seed {seed}: synthetic {two:.4} raw {raw:.4} end-to-end {e2e:.4} {}", if ok { "ok" } else { "no" }));
    }
    Outcome::new(wins >= 3, format!("{wins}/5 seeds satisfy both [{}]", lines.join("; ")))
}

fn criterion_6() -> Outcome {
    const EPOCHS: usize = 10;
    let spec = PhantomSpec::evenly_spaced(100, 64, 3, 0.1, 600);
    let slices: Vec<LabeledSlice> = generate_phantom(&spec).unwrap().into_iter().map(|s| s.source).collect();
    let (train, test) = slices.split_at(80);
    let stages: Vec<StageConfig> = [64, 48, 32]
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let mut s = StageConfig::nested(k + 1, 3, p, Strategy::TwoStage, EPOCHS, 600 + k as u64);
            s.training.bbox_margin = 0;
            s.training.samples = 0;
            s
        })
        .collect();
    let results = train_cascade(&stages, train, test, None).unwrap();
    let models: Vec<_> = results.into_iter().map(|r| r.models.unwrap()).collect();
    let predictors: Vec<&dyn StagePredictor> = models.iter().map(|m| m as &dyn StagePredictor).collect();
    let out = run_cascade(&stages, &predictors, test).unwrap();
    let nested = out.cases.iter().all(|case| {
        case.stages.windows(2).all(|w| match (&w[0], &w[1]) {
            (Some(outer), Some(inner)) => inner.region.data().iter().zip(outer.region.data()).all(|(&i, &o)| !i || o),
            (None, Some(_)) => false,
            _ => true,
        })
    });
    let dices: Vec<f64> = out.reports.iter().map(|r| r.regions["region_1"].mean).collect();
    let pass = nested && dices.iter().all(|&d| d >= 0.85);
    Outcome::new(
        pass,
        format!(
            "nesting holds for all {} cases: {nested}, held-out Dice per stage {:?} >= 0.85 after {EPOCHS} epochs",
            out.cases.len(),
            dices.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn criterion_7() -> Outcome {
    let spec = PhantomSpec::evenly_spaced(100, 16, 1, 0.15, 70);
    let slices: Vec<LabeledSlice> = generate_phantom(&spec).unwrap().into_iter().map(|s| s.source).collect();
    let stage = |strategy| {
        let mut s = StageConfig::nested(1, 1, 16, strategy, 2, 71);
        s.switch_epoch = 1;
        s.weights.lambda5 = 0.0;
        s.training.segmenter_epochs = Some(0);
        s.training.samples = 0;
        s
    };
    let mut e2e_stage = stage(Strategy::EndToEnd);
    e2e_stage.training.segmenter_epochs = None;
    let a = run_stage(&stage(Strategy::TwoStage), &slices, &[], None).unwrap();
    let b = run_stage(&e2e_stage, &slices, &[], None).unwrap();
    let key = |s: &htc_core::attention_cyclegan::StepRecord| {
        [s.losses.adv_s, s.losses.adv_t, s.losses.cyc_s, s.losses.cyc_t, s.d_loss].map(f64::to_bits)
    };
    let n = a.synthesis_steps.len();
    let same = n == b.synthesis_steps.len() && a.synthesis_steps.iter().zip(&b.synthesis_steps).all(|(x, y)| key(x) == key(y));
    Outcome::new(same && n >= 50, format!("{n} synthesis steps compared, bit-identical: {same}"))
}

fn criterion_8() -> Outcome {
    let mut c = Checks::default();
    let spec = PhantomSpec::evenly_spaced(12, 48, 3, 0.1, 80);
    let (a, b) = (generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
    c.check(
        "phantom",
        a.iter().zip(&b).all(|(x, y)| images_equal_bits(&x.source.image, &y.source.image) && x.source.labels == y.source.labels && x.target_index == y.target_index),
    );
    let labels: Vec<LabelMap> = a.iter().map(|s| s.source.labels.map(|&l| (l > 0) as u8)).collect();
    let (ta, tb) = (build_htc_dataset(&labels, &TargetDistribution::default(), 81).unwrap(), build_htc_dataset(&labels, &TargetDistribution::default(), 81).unwrap());
    c.check("targets", ta.iter().zip(&tb).all(|(x, y)| images_equal_bits(x, y)));
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let vol = Volume::new([17, 13, 5], (0..17 * 13 * 5).map(|_| rng.gen_range(-3.0f32..40.0)).collect(), [0.9, 1.1, 3.0], Modality::Flair).unwrap();
    let (p1, p2) = (dir.path().join("a.nii"), dir.path().join("b.nii"));
    write_nifti(&p1, &vol, NiftiStorage::Float32).unwrap();
    write_nifti(&p2, &vol, NiftiStorage::Float32).unwrap();
    let back = load_nifti(&p1).unwrap();
    c.check(
        "nifti round trip",
        back.dims == vol.dims && back.spacing == vol.spacing && back.data.iter().zip(&vol.data).all(|(x, y)| x.to_bits() == y.to_bits()),
    );
    c.check("nifti writes identical", std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap());
    let p3 = dir.path().join("c.nii");
    write_nifti(&p3, &back, NiftiStorage::Float32).unwrap();
    c.check("nifti rewrite identical", std::fs::read(&p1).unwrap() == std::fs::read(&p3).unwrap());
    c.outcome(String::new())
}

fn criterion_9() -> Outcome {
    let mut c = Checks::default();
    let samples = generate_phantom(&PhantomSpec::evenly_spaced(6, 32, 2, 0.1, 90)).unwrap();
    let gt: Vec<LabelMap> = samples.iter().map(|s| s.source.labels.clone()).collect();
    // predictions: ground truth with the first rows erased
    let pred: Vec<LabelMap> = gt
        .iter()
        .enumerate()
        .map(|(i, l)| LabelMap::from_fn(32, 32, |r, col| if r < 10 + i { 0 } else { *l.get(r, col) }))
        .collect();
    let syn: Vec<Image> = samples.iter().map(|s| s.source.image.clone()).collect();
    let three = TargetDistribution {
        classes: [(0, 0.2), (1, 0.5), (2, 0.8)].into_iter().map(|(c, mean)| (c, ClassDist { mean, std: 0.05 })).collect(),
    };
    let tgt = build_htc_dataset(&gt, &three, 91).unwrap();
    let cfg = MetricsConfig { spacing: [1.0, 1.5], ..MetricsConfig::default() };
    let rep = evaluate_stage(
        &StageInputs { predictions: &pred, ground_truth: &gt, synthetic: Some(&syn), target: Some(&tgt), labels: Some(&gt) },
        &cfg,
        serde_json::json!({ "run": "acceptance" }),
    )
    .unwrap();
    for k in 1..=2u8 {
        let r = &rep.regions[&format!("region_{k}")];
        let d: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| dice(&p.at_least(k), &g.at_least(k)).unwrap()).collect();
        let h: Vec<f64> = pred.iter().zip(&gt).filter_map(|(p, g)| hd95(&p.at_least(k), &g.at_least(k), cfg.spacing).unwrap()).collect();
        c.close(&format!("region {k} Dice"), r.dice.unwrap(), mean(&d), 1e-9);
        c.close(&format!("region {k} HD95"), r.hd95.unwrap(), mean(&h), 1e-9);
    }
    let ssims: Vec<f64> = syn.iter().zip(&tgt).map(|(a, b)| ssim(a, b, &cfg.ssim).unwrap()).collect();
    let psnrs: Vec<f64> = syn.iter().zip(&tgt).map(|(a, b)| psnr(a, b, cfg.psnr_peak).unwrap()).collect();
    c.close("SSIM", rep.regions["image"].ssim.unwrap(), mean(&ssims), 1e-9);
    c.close("PSNR", rep.regions["image"].psnr.unwrap(), mean(&psnrs), 1e-9);
    for class in 0..=2u8 {
        let pick = |imgs: &[Image]| -> Vec<f64> {
            imgs.iter()
                .zip(&gt)
                .flat_map(|(i, l)| i.data().iter().zip(l.data()).filter(|(_, &lab)| lab == class).map(|(&v, _)| v as f64).collect::<Vec<_>>())
                .collect()
        };
        c.close(&format!("class {class} pooled K-S"), rep.regions[&format!("class_{class}")].ks.unwrap(), ks_statistic(&pick(&syn), &pick(&tgt)).unwrap(), 1e-9);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    rep.save(&path).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let regions = json["regions"].as_object().unwrap();
    let names: Vec<&str> = regions.keys().map(String::as_str).collect();
    c.check("report entries", names == ["class_0", "class_1", "class_2", "image", "region_1", "region_2"]);
    c.check("K-S rows", (0..=2).all(|k| regions[&format!("class_{k}")]["ks"].is_number()));
    c.check("image row", regions["image"]["psnr"].is_number() && regions["image"]["ssim"].is_number());
    c.check(
        "Dice rows",
        (1..=2).all(|k| {
            let r = &regions[&format!("region_{k}")];
            r["dice"].is_number() && r["hd95"].is_number() && r["mean"].is_number() && r["std"].is_number() && r["n"] == 6
        }),
    );
    c.check("config and timestamp", json["config"]["metrics"].is_object() && json["timestamp"].is_string());
    c.check("csv export", path.with_extension("csv").is_file());
    c.outcome(String::new())
}

#[test]
fn acceptance() {
    let wanted: Option<Vec<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome, bool); 9] = [
        (1, "metric exactness", criterion_1, true),
        (2, "gradient fidelity", criterion_2, true),
        (3, "composition identities", criterion_3, true),
        (4, "desk-scale synthesis", criterion_4, false),
        (5, "segmentation benefit", criterion_5, false),
        (6, "cascade correctness", criterion_6, false),
        (7, "strategy equivalence", criterion_7, true),
        (8, "determinism and I/O", criterion_8, true),
        (9, "reporting", criterion_9, true),
    ];
    let mut hard_failures = Vec::new();
    for (n, name, run, strict) in criteria {
        if wanted.as_ref().is_some_and(|w| !w.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let o = run();
        println!(
            "criterion {n} ({name}): {} | {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        if strict && !o.pass {
            hard_failures.push(n);
        }
    }
    assert!(hard_failures.is_empty(), "criteria {hard_failures:?} failed");
}
