use htc_nn::{Float, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;

/// Probability floor/ceiling applied before every log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 1.0,
            lambda4: 10.0,
            lambda5: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Argument(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Argument("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Scalar values of the synthesis terms. `adv_s`/`cyc_s` belong to the
/// path that starts from a source image (s -> s' -> s''), `adv_t`/`cyc_t`
/// to the path that starts from a target image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthLossBreakdown {
    pub adv_s: f64,
    pub adv_t: f64,
    pub cyc_s: f64,
    pub cyc_t: f64,
    pub seg: Option<f64>,
}

impl SynthLossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.adv_s, self.adv_t, self.cyc_s, self.cyc_t, self.seg.unwrap_or(0.0)]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `λ1·adv_s + λ2·cyc_s + λ3·adv_t + λ4·cyc_t`.
pub fn synthesis_loss(b: &SynthLossBreakdown, w: &LossWeights) -> f64 {
    w.lambda1 * b.adv_s + w.lambda2 * b.cyc_s + w.lambda3 * b.adv_t + w.lambda4 * b.cyc_t
}

/// Graph version of [`synthesis_loss`].
pub fn synthesis_loss_var<'g, T: Float>(
    adv_s: Var<'g, T>,
    cyc_s: Var<'g, T>,
    adv_t: Var<'g, T>,
    cyc_t: Var<'g, T>,
    w: &LossWeights,
) -> Var<'g, T> {
    adv_s
        .scale(w.lambda1)
        .add(cyc_s.scale(w.lambda2))
        .add(adv_t.scale(w.lambda3))
        .add(cyc_t.scale(w.lambda4))
}

/// `λ5·seg + synth`.
pub fn total_loss(seg: f64, synth: f64, lambda5: f64) -> f64 {
    lambda5 * seg + synth
}

/// How the adversarial game is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanObjective {
    /// Log loss; the generator side minimises `-log D(fake)`.
    #[default]
    Log,
    /// Log loss; the generator side minimises `log(1 - D(fake))` as written
    /// in the minimax objective.
    LogMinimax,
    /// Least squares: D regresses real to 1 and fake to 0.
    LeastSquares,
}

/// `mean log D(real) + mean log(1 - D(fake))` with probabilities clamped to
/// `[ε, 1-ε]`. The discriminator ascends this value.
pub fn adversarial_loss<'g, T: Float>(d_real: Var<'g, T>, d_fake: Var<'g, T>) -> Var<'g, T> {
    let real = d_real.clamp(0.0, 1.0 - PROB_EPS).ln_clamped(PROB_EPS).mean();
    let fake = d_fake.clamp(PROB_EPS, 1.0).one_minus().ln_clamped(PROB_EPS).mean();
    real.add(fake)
}

/// Plain-number version of [`adversarial_loss`].
pub fn adversarial_loss_values(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Argument("adversarial loss of empty score arrays".into()));
    }
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(clamp(p))).sum::<f64>() / v.len() as f64;
    Ok(mean(d_real, &|p| p.ln()) + mean(d_fake, &|p| (1.0 - p).ln()))
}

/// Discriminator objective to minimise.
pub fn discriminator_loss<'g, T: Float>(obj: GanObjective, d_real: Var<'g, T>, d_fake: Var<'g, T>) -> Var<'g, T> {
    match obj {
        GanObjective::Log | GanObjective::LogMinimax => adversarial_loss(d_real, d_fake).scale(-1.0),
        GanObjective::LeastSquares => {
            let r = d_real.add_scalar(-1.0);
            r.mul(r).mean().add(d_fake.mul(d_fake).mean())
        }
    }
}

/// Generator-side adversarial term to minimise, from the fake scores only.
pub fn generator_adversarial<'g, T: Float>(obj: GanObjective, d_fake: Var<'g, T>) -> Var<'g, T> {
    match obj {
        GanObjective::Log => d_fake.clamp(0.0, 1.0 - PROB_EPS).ln_clamped(PROB_EPS).mean().scale(-1.0),
        GanObjective::LogMinimax => d_fake.clamp(PROB_EPS, 1.0).one_minus().ln_clamped(PROB_EPS).mean(),
        GanObjective::LeastSquares => {
            let r = d_fake.add_scalar(-1.0);
            r.mul(r).mean()
        }
    }
}

fn same_shape<T: Float>(what: &str, vars: &[Var<'_, T>]) -> Result<()> {
    let s = vars[0].shape();
    for v in &vars[1..] {
        if v.shape() != s {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", s, v.shape())));
        }
    }
    Ok(())
}

/// Mean absolute difference per pixel.
pub fn cycle_loss<'g, T: Float>(original: Var<'g, T>, reconstructed: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape("cycle_loss", &[original, reconstructed])?;
    Ok(original.sub(reconstructed).abs().mean())
}

/// `attention ⊙ generated + (1 - attention) ⊙ image`, exact when the
/// attention is 0 or 1 or the generator returns its input.
pub fn compose_translation<'g, T: Float>(
    image: Var<'g, T>,
    attention: Var<'g, T>,
    generated: Var<'g, T>,
) -> Result<Var<'g, T>> {
    same_shape("compose_translation", &[image, attention, generated])?;
    Ok(image.lerp(attention, generated))
}

/// [`compose_translation`] on plain images.
pub fn compose_images(image: &Image, attention: &Image, generated: &Image) -> Result<Image> {
    crate::error::shape_check("compose_translation", image.dims(), attention.dims())?;
    crate::error::shape_check("compose_translation", image.dims(), generated.dims())?;
    let data = image
        .data()
        .iter()
        .zip(attention.data())
        .zip(generated.data())
        .map(|((&s, &a), &g)| htc_nn::lerp_scalar(s, a, g))
        .collect();
    Image::new(image.rows(), image.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use htc_nn::{Graph, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c<'g>(g: &'g Graph<f64>, v: Vec<f64>) -> Var<'g, f64> {
        let n = v.len();
        g.constant(Tensor::new(&[1, 1, 1, n], v).unwrap())
    }

    #[test]
    fn adversarial_examples() {
        let g = Graph::new();
        let half = adversarial_loss(c(&g, vec![0.5; 6]), c(&g, vec![0.5; 6])).item();
        assert!((half - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((half + 1.3863).abs() < 1e-4);
        let best = adversarial_loss(c(&g, vec![1.0 - PROB_EPS; 3]), c(&g, vec![PROB_EPS; 3])).item();
        assert!(best.abs() < 1e-6 && best <= 0.0);
        // out-of-range scores are clamped, never NaN
        assert!(adversarial_loss(c(&g, vec![0.0, 1.5]), c(&g, vec![1.0, -0.2])).item().is_finite());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r: Vec<f64> = (0..50).map(|_| rng.gen_range(0.01..0.99)).collect();
        let f: Vec<f64> = (0..40).map(|_| rng.gen_range(0.01..0.99)).collect();
        let oracle = r.iter().map(|p| p.ln()).sum::<f64>() / 50.0 + f.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 40.0;
        let got = adversarial_loss(c(&g, r.clone()), c(&g, f.clone())).item();
        assert!((got - oracle).abs() < 1e-6);
        assert!((adversarial_loss_values(&r, &f).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cycle_examples() {
        let g = Graph::new();
        assert_eq!(cycle_loss(c(&g, vec![0.3, 0.7]), c(&g, vec![0.3, 0.7])).unwrap().item(), 0.0);
        assert_eq!(cycle_loss(c(&g, vec![0.0, 1.0]), c(&g, vec![1.0, 0.0])).unwrap().item(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let oracle = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 30.0;
        assert!((cycle_loss(c(&g, a), c(&g, b)).unwrap().item() - oracle).abs() < 1e-6);
        assert!(matches!(cycle_loss(c(&g, vec![0.0]), c(&g, vec![0.0, 1.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn composition_examples() {
        let g = Graph::new();
        let s = vec![0.1, 0.4, 0.9];
        let gen = vec![0.7, 0.2, 0.3];
        assert_eq!(compose_translation(c(&g, s.clone()), c(&g, vec![0.0; 3]), c(&g, gen.clone())).unwrap().value().data(), &s[..]);
        assert_eq!(compose_translation(c(&g, s.clone()), c(&g, vec![1.0; 3]), c(&g, gen.clone())).unwrap().value().data(), &gen[..]);
        let mid = compose_translation(c(&g, vec![0.2; 3]), c(&g, vec![0.5; 3]), c(&g, vec![0.8; 3])).unwrap();
        assert!(mid.value().data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(compose_translation(c(&g, s), c(&g, vec![0.0; 2]), c(&g, gen)).is_err());
    }

    #[test]
    fn synthesis_loss_examples() {
        let b = SynthLossBreakdown { adv_s: 1.0, cyc_s: 2.0, adv_t: 3.0, cyc_t: 4.0, seg: None };
        let w = |a, b, c, d| LossWeights { lambda1: a, lambda2: b, lambda3: c, lambda4: d, lambda5: 0.0 };
        assert_eq!(synthesis_loss(&b, &w(1.0, 10.0, 1.0, 10.0)), 1.0 + 20.0 + 3.0 + 40.0);
        assert_eq!(synthesis_loss(&b, &w(0.0, 1.0, 0.0, 0.0)), 2.0);
        assert_eq!(synthesis_loss(&b, &w(1.0, 1.0, 1.0, 1.0)), 10.0);
        // linear in each weight
        let base = synthesis_loss(&b, &w(1.0, 3.0, 1.0, 1.0)) - synthesis_loss(&b, &w(1.0, 0.0, 1.0, 1.0));
        let doubled = synthesis_loss(&b, &w(1.0, 6.0, 1.0, 1.0)) - synthesis_loss(&b, &w(1.0, 0.0, 1.0, 1.0));
        assert_eq!(doubled, 2.0 * base);
        assert!(w(0.0, 0.0, 0.0, 0.0).validate().is_err());
        assert!(w(-1.0, 0.0, 0.0, 1.0).validate().is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(123.0, 3.5, 0.0), 3.5);
        assert_eq!(total_loss(2.0, 3.0, 1.0), 5.0);
        assert_eq!(total_loss(4.0, 1.0, 0.5), 3.0);
    }
}
