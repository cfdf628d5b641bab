//! Helpers shared by the integration tests.
#![allow(dead_code)]

use htc_core::attention_cyclegan::{
    adversarial_loss, compose_translation, cycle_loss, AttentionConfig, AttentionNet, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig,
};
use htc_core::segmentation::{weighted_cross_entropy, DenseNet, Mode, SegmenterArch};
use htc_core::Mask;
use htc_nn::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the whole
    /// parameter vector.
    pub relative_error: f64,
    pub params: usize,
}

/// Central finite differences (step `h`) against reverse mode for every
/// scalar of every parameter in `ps`.
pub fn gradcheck<F>(ps: &mut ParamStore<f64>, h: f64, loss: F) -> GradCheck
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let l = loss(&g, ps);
    let grads = g.backward(l);
    let mut analytic = Vec::new();
    for i in 0..ps.len() {
        match grads.param(ps, i) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(ps.get(i).len())),
        }
    }
    drop(grads);
    let eval = |ps: &ParamStore<f64>| {
        let g = Graph::new();
        loss(&g, ps).item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..ps.len() {
        for k in 0..ps.get(i).len() {
            let orig = ps.get(i).data()[k];
            ps.get_mut(i).data_mut()[k] = orig + h;
            let up = eval(ps);
            ps.get_mut(i).data_mut()[k] = orig - h;
            let down = eval(ps);
            ps.get_mut(i).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    GradCheck {
        relative_error: if scale == 0.0 { diff } else { diff / scale },
        params: analytic.len(),
    }
}

const FD_STEP: f64 = 1e-6;

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 1,
        res_blocks: 0,
        output_gain: 1.0,
        outer_kernel: 3,
    }
}

/// Adversarial loss of a one-channel patch discriminator scoring real
/// target images against generator outputs composed with a fixed attention
/// map; gradients over discriminator and generator together.
pub fn adversarial_gradcheck(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::<f64>::new();
    let gen = Generator::new(&mut ps, "g", &tiny_generator(), &mut rng);
    let disc = Discriminator::new(
        &mut ps,
        "d",
        &DiscriminatorConfig {
            base_channels: 1,
            strided_layers: 1,
        },
        &mut rng,
    );
    let s = random_tensor(&[2, 1, 16, 16], 0.2, 0.8, seed + 1);
    let t = random_tensor(&[2, 1, 16, 16], 0.2, 0.8, seed + 2);
    let a = random_tensor(&[2, 1, 16, 16], 0.0, 1.0, seed + 3);
    gradcheck(&mut ps, FD_STEP, |g, ps| {
        let s = g.constant(s.clone());
        let fake = compose_translation(s, g.constant(a.clone()), gen.forward(g, ps, s)).unwrap();
        adversarial_loss(disc.forward(g, ps, g.constant(t.clone())), disc.forward(g, ps, fake))
    })
}

/// Cycle loss `|s - s''|` with `s' = compose(s, A(s), G(s))` and
/// `s'' = compose(s', A(s'), G(s'))`, one generator and one attention
/// network shared by both halves.
pub fn cycle_gradcheck(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::<f64>::new();
    let gen = Generator::new(&mut ps, "g", &tiny_generator(), &mut rng);
    let att = AttentionNet::new(&mut ps, "a", &AttentionConfig { base_channels: 1 }, &mut rng);
    let s = random_tensor(&[2, 1, 8, 8], 0.2, 0.8, seed + 1);
    gradcheck(&mut ps, FD_STEP, |g, ps| {
        let s = g.constant(s.clone());
        let s1 = compose_translation(s, att.forward(g, ps, s), gen.forward(g, ps, s)).unwrap();
        let s2 = compose_translation(s1, att.forward(g, ps, s1), gen.forward(g, ps, s1)).unwrap();
        cycle_loss(s, s2).unwrap()
    })
}

/// Weighted cross-entropy of a small dense segmenter without dropout.
pub fn wce_gradcheck(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::<f64>::new();
    let arch = SegmenterArch {
        patch_size: 8,
        first_channels: 2,
        growth: 2,
        layers_per_block: 1,
        transitions: 1,
        dropout: 0.0,
    };
    let net = DenseNet::new(&mut ps, "seg", &arch, &mut rng);
    let x = random_tensor(&[2, 1, 8, 8], 0.0, 1.0, seed + 1);
    let masks: Vec<Mask> = (0..2)
        .map(|i| Mask::from_fn(8, 8, |r, c| (r + c + i) % 3 == 0))
        .collect();
    gradcheck(&mut ps, FD_STEP, |g, ps| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let mut mode = Mode {
            train: true,
            rng: &mut drop_rng,
        };
        let (probs, _) = net.forward(g, ps, g.constant(x.clone()), &mut mode);
        let refs: Vec<&Mask> = masks.iter().collect();
        weighted_cross_entropy(probs, &refs, [1.0, 2.5]).unwrap()
    })
}
