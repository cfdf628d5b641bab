use htc_nn::{Float, Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::compose_translation;
use super::nets::{AttentionConfig, AttentionNet, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::tensor_io::{images_to_tensor, tensor_to_images};

/// Architecture hyperparameters of all six networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisArch {
    pub patch_size: usize,
    pub generator: GeneratorConfig,
    pub attention: AttentionConfig,
    pub discriminator: DiscriminatorConfig,
}

impl SynthesisArch {
    pub fn for_patch(patch_size: usize) -> Self {
        Self {
            patch_size,
            generator: GeneratorConfig::for_patch(patch_size),
            attention: AttentionConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            return Err(Error::Argument(format!(
                "patch size {} must be a positive multiple of 4",
                self.patch_size
            )));
        }
        let min = 1 << (self.discriminator.strided_layers + 2);
        if self.patch_size < min {
            return Err(Error::Argument(format!(
                "patch size {} too small for the discriminator (needs {min})",
                self.patch_size
            )));
        }
        if self.generator.base_channels == 0 || self.attention.base_channels == 0 || self.discriminator.base_channels == 0 {
            return Err(Error::Argument("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter-index handles of G_{S→T}, G_{T→S}, A_S, A_T, D_S and D_T.
#[derive(Debug, Clone)]
pub struct SynthesisNets {
    pub g_st: Generator,
    pub g_ts: Generator,
    pub a_s: AttentionNet,
    pub a_t: AttentionNet,
    pub d_s: Discriminator,
    pub d_t: Discriminator,
}

impl SynthesisNets {
    pub fn new<T: Float>(ps: &mut ParamStore<T>, arch: &SynthesisArch, rng: &mut ChaCha8Rng) -> Self {
        Self {
            g_st: Generator::new(ps, "g_st", &arch.generator, rng),
            g_ts: Generator::new(ps, "g_ts", &arch.generator, rng),
            a_s: AttentionNet::new(ps, "a_s", &arch.attention, rng),
            a_t: AttentionNet::new(ps, "a_t", &arch.attention, rng),
            d_s: Discriminator::new(ps, "d_s", &arch.discriminator, rng),
            d_t: Discriminator::new(ps, "d_t", &arch.discriminator, rng),
        }
    }

    /// Parameters trained by the generator-side objective.
    pub fn generator_params<T: Float>(ps: &ParamStore<T>) -> Vec<usize> {
        ["g_st.", "g_ts.", "a_s.", "a_t."]
            .iter()
            .flat_map(|p| ps.indices_with_prefix(p))
            .collect()
    }

    pub fn discriminator_params<T: Float>(ps: &ParamStore<T>) -> Vec<usize> {
        ["d_s.", "d_t."].iter().flat_map(|p| ps.indices_with_prefix(p)).collect()
    }

    /// Parameters that see segmentation gradients in joint training.
    pub fn forward_path_params<T: Float>(ps: &ParamStore<T>) -> Vec<usize> {
        ["g_st.", "a_s."].iter().flat_map(|p| ps.indices_with_prefix(p)).collect()
    }
}

/// Every intermediate of one forward and one backward cycle.
#[derive(Clone, Copy)]
pub struct CycleForward<'g, T: Float> {
    pub s: Var<'g, T>,
    pub t: Var<'g, T>,
    /// `A_S(s)`.
    pub s_a: Var<'g, T>,
    /// `s' = s_a ⊙ G_{S→T}(s) + (1 - s_a) ⊙ s`.
    pub s1: Var<'g, T>,
    /// `s'' = A_T(s') ⊙ G_{T→S}(s') + (1 - A_T(s')) ⊙ s'`.
    pub s2: Var<'g, T>,
    /// `A_T(t)`.
    pub t_a: Var<'g, T>,
    pub t1: Var<'g, T>,
    pub t2: Var<'g, T>,
}

/// The source-to-target half: `(s_a, s')`.
pub fn translate_forward<'g, T: Float>(
    g: &'g Graph<T>,
    ps: &ParamStore<T>,
    nets: &SynthesisNets,
    s: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let s_a = nets.a_s.forward(g, ps, s);
    let s1 = compose_translation(s, s_a, nets.g_st.forward(g, ps, s))?;
    Ok((s_a, s1))
}

pub fn cycle_forward<'g, T: Float>(
    g: &'g Graph<T>,
    ps: &ParamStore<T>,
    nets: &SynthesisNets,
    s: Var<'g, T>,
    t: Var<'g, T>,
) -> Result<CycleForward<'g, T>> {
    let (s_a, s1) = translate_forward(g, ps, nets, s)?;
    let s2 = compose_translation(s1, nets.a_t.forward(g, ps, s1), nets.g_ts.forward(g, ps, s1))?;
    let t_a = nets.a_t.forward(g, ps, t);
    let t1 = compose_translation(t, t_a, nets.g_ts.forward(g, ps, t))?;
    let t2 = compose_translation(t1, nets.a_s.forward(g, ps, t1), nets.g_st.forward(g, ps, t1))?;
    Ok(CycleForward { s, t, s_a, s1, s2, t_a, t1, t2 })
}

/// What the discriminators are shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscMode {
    Whole,
    Masked,
}

impl DiscMode {
    pub fn for_epoch(epoch: usize, switch_epoch: usize) -> Self {
        if epoch < switch_epoch {
            DiscMode::Whole
        } else {
            DiscMode::Masked
        }
    }
}

/// `(real, fake)` inputs of D_T and of D_S. Masked mode filters every image
/// with the attention map of the domain it came from: `t ⊙ A_T(t)` against
/// `s' ⊙ A_S(s)`, and `s ⊙ A_S(s)` against `t' ⊙ A_T(t)`.
pub struct DiscInputs<'g, T: Float> {
    pub real_t: Var<'g, T>,
    pub fake_t: Var<'g, T>,
    pub real_s: Var<'g, T>,
    pub fake_s: Var<'g, T>,
}

pub fn disc_inputs<'g, T: Float>(f: &CycleForward<'g, T>, mode: DiscMode) -> DiscInputs<'g, T> {
    match mode {
        DiscMode::Whole => DiscInputs {
            real_t: f.t,
            fake_t: f.s1,
            real_s: f.s,
            fake_s: f.t1,
        },
        DiscMode::Masked => DiscInputs {
            real_t: f.t.mul(f.t_a),
            fake_t: f.s1.mul(f.s_a),
            real_s: f.s.mul(f.s_a),
            fake_s: f.t1.mul(f.t_a),
        },
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisModel {
    pub arch: SynthesisArch,
    pub store: ParamStore<f32>,
    pub nets: SynthesisNets,
    /// Completed training epochs.
    pub epoch: usize,
}

impl SynthesisModel {
    pub fn new(arch: SynthesisArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let nets = SynthesisNets::new(&mut store, &arch, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { arch, store, nets, epoch: 0 })
    }

    /// Sets both generators to the exact identity map.
    pub fn make_generators_identity(&mut self) {
        self.nets.g_st.make_identity(&mut self.store);
        self.nets.g_ts.make_identity(&mut self.store);
    }

    fn check(&self, image: &Image) -> Result<()> {
        let p = self.arch.patch_size;
        if image.dims() != (p, p) {
            return Err(Error::Shape(format!(
                "model expects {p}x{p} images, got {}x{}",
                image.rows(),
                image.cols()
            )));
        }
        Ok(())
    }

    fn batch<'g>(&self, g: &'g Graph<f32>, images: &[&Image]) -> Result<Var<'g, f32>> {
        for img in images {
            self.check(img)?;
        }
        Ok(g.constant(images_to_tensor(images)?))
    }

    /// `A_S(image)` (source side) or `A_T(image)` (target side).
    pub fn attention_forward(&self, image: &Image, target_side: bool) -> Result<Image> {
        let g = Graph::new();
        let x = self.batch(&g, &[image])?;
        let net = if target_side { &self.nets.a_t } else { &self.nets.a_s };
        Ok(tensor_to_images(&net.forward(&g, &self.store, x).value(), 0).remove(0))
    }

    /// Source-to-HTC translation of a batch: `(s', s_a)` per image.
    pub fn synthesize_batch(&self, images: &[&Image], hard_attention: bool) -> Result<Vec<(Image, Image)>> {
        let g = Graph::new();
        let s = self.batch(&g, images)?;
        let s_a = self.nets.a_s.forward(&g, &self.store, s);
        let s_a = if hard_attention { hard(&g, s_a) } else { s_a };
        let s1 = compose_translation(s, s_a, self.nets.g_st.forward(&g, &self.store, s))?;
        Ok(tensor_to_images(&s1.value(), 0)
            .into_iter()
            .zip(tensor_to_images(&s_a.value(), 0))
            .collect())
    }

    pub fn synthesize(&self, image: &Image) -> Result<(Image, Image)> {
        Ok(self.synthesize_batch(&[image], false)?.remove(0))
    }

    /// Target-to-source translation: `(s'', t_a)` with `t_a = A_T(s')`.
    pub fn reconstruct(&self, translated: &Image) -> Result<(Image, Image)> {
        let g = Graph::new();
        let s1 = self.batch(&g, &[translated])?;
        let t_a = self.nets.a_t.forward(&g, &self.store, s1);
        let s2 = compose_translation(s1, t_a, self.nets.g_ts.forward(&g, &self.store, s1))?;
        Ok((
            tensor_to_images(&s2.value(), 0).remove(0),
            tensor_to_images(&t_a.value(), 0).remove(0),
        ))
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let arch = serde_json::json!({ "synthesis": self.arch, "epoch": self.epoch });
        Ok(Checkpoint::from_store("synthesis", arch, meta, &self.store))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "synthesis" {
            return Err(Error::Argument(format!("expected a synthesis checkpoint, got {}", ck.header.kind)));
        }
        let arch: SynthesisArch = serde_json::from_value(ck.header.arch["synthesis"].clone())?;
        let mut model = Self::new(arch, 0)?;
        ck.load_into(&mut model.store)?;
        model.epoch = ck.header.arch["epoch"].as_u64().unwrap_or(0) as usize;
        Ok(model)
    }
}

/// Thresholds an attention map at 0.5 (inference option).
fn hard<'g>(g: &'g Graph<f32>, a: Var<'g, f32>) -> Var<'g, f32> {
    g.constant(a.value().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}
