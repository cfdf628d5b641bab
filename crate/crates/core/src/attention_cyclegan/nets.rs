//! Generator, attention network and patch discriminator.

use htc_nn::layers::{Conv2d, ConvTranspose2d, InstanceNorm};
use htc_nn::{Float, Graph, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub res_blocks: usize,
    /// Scale of the output convolution's initial weights; small values start
    /// the generator close to the identity map.
    pub output_gain: f64,
    /// Kernel size of the full-resolution stem and head convolutions (odd).
    pub outer_kernel: usize,
}

impl GeneratorConfig {
    /// Desk-scale defaults: 4 residual blocks and 3x3 outer kernels up to
    /// 64 px, 6 blocks and 7x7 kernels above.
    pub fn for_patch(patch: usize) -> Self {
        let large = patch > 64;
        Self {
            base_channels: 8,
            res_blocks: if large { 6 } else { 4 },
            output_gain: 0.05,
            outer_kernel: if large { 7 } else { 3 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub base_channels: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { base_channels: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Number of stride-2 layers before the two stride-1 layers.
    pub strided_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            strided_layers: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvNorm {
    conv: Conv2d,
    norm: InstanceNorm,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, k, stride, k / 2, false, 1.0, rng),
            norm: InstanceNorm::new(ps, &format!("{name}.norm"), cout),
        }
    }

    fn forward<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        self.norm.forward(g, ps, self.conv.forward(g, ps, x))
    }
}

#[derive(Debug, Clone)]
struct UpNorm {
    conv: ConvTranspose2d,
    norm: InstanceNorm,
}

impl UpNorm {
    fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv: ConvTranspose2d::new(ps, &format!("{name}.conv"), cin, cout, 3, 2, 1, 1, false, rng),
            norm: InstanceNorm::new(ps, &format!("{name}.norm"), cout),
        }
    }

    fn forward<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        self.norm.forward(g, ps, self.conv.forward(g, ps, x)).relu()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: ConvNorm,
    b: ConvNorm,
}

impl ResBlock {
    fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut R) -> Self {
        Self {
            a: ConvNorm::new(ps, &format!("{name}.a"), ch, ch, 3, 1, rng),
            b: ConvNorm::new(ps, &format!("{name}.b"), ch, ch, 3, 1, rng),
        }
    }

    fn forward<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.a.forward(g, ps, x).relu();
        x.add(self.b.forward(g, ps, h))
    }
}

/// Encoder (two stride-2 blocks), residual core, decoder (two transposed
/// blocks). The head predicts a residual: `clamp(x + tanh(z), 0, 1)`, so a
/// zero head is exactly the identity on `[0, 1]` images.
#[derive(Debug, Clone)]
pub struct Generator {
    stem: ConvNorm,
    down: [ConvNorm; 2],
    res: Vec<ResBlock>,
    up: [UpNorm; 2],
    head: Conv2d,
}

impl Generator {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let b = cfg.base_channels;
        let k = cfg.outer_kernel;
        Self {
            stem: ConvNorm::new(ps, &format!("{name}.stem"), 1, b, k, 1, rng),
            down: [
                ConvNorm::new(ps, &format!("{name}.down0"), b, 2 * b, 3, 2, rng),
                ConvNorm::new(ps, &format!("{name}.down1"), 2 * b, 4 * b, 3, 2, rng),
            ],
            res: (0..cfg.res_blocks)
                .map(|i| ResBlock::new(ps, &format!("{name}.res{i}"), 4 * b, rng))
                .collect(),
            up: [
                UpNorm::new(ps, &format!("{name}.up0"), 4 * b, 2 * b, rng),
                UpNorm::new(ps, &format!("{name}.up1"), 2 * b, b, rng),
            ],
            head: Conv2d::new(ps, &format!("{name}.head"), b, 1, k, 1, k / 2, true, cfg.output_gain, rng),
        }
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.stem.forward(g, ps, x).relu();
        for d in &self.down {
            h = d.forward(g, ps, h).relu();
        }
        for r in &self.res {
            h = r.forward(g, ps, h);
        }
        for u in &self.up {
            h = u.forward(g, ps, h);
        }
        x.add(self.head.forward(g, ps, h).tanh()).clamp(0.0, 1.0)
    }

    /// Zeroes the head so the generator is the exact identity.
    pub fn make_identity<T: Float>(&self, ps: &mut ParamStore<T>) {
        ps.get_mut(self.head.weight).data_mut().fill(T::zero());
        if let Some(b) = self.head.bias {
            ps.get_mut(b).data_mut().fill(T::zero());
        }
    }
}

/// Conv, strided conv, conv, one residual block, one transposed conv, then
/// a two-channel per-pixel softmax; the foreground channel is the map.
#[derive(Debug, Clone)]
pub struct AttentionNet {
    stem: ConvNorm,
    down: ConvNorm,
    mid: ConvNorm,
    res: ResBlock,
    up: UpNorm,
    head: Conv2d,
}

impl AttentionNet {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let b = cfg.base_channels;
        Self {
            stem: ConvNorm::new(ps, &format!("{name}.stem"), 1, b, 7, 1, rng),
            down: ConvNorm::new(ps, &format!("{name}.down"), b, 2 * b, 3, 2, rng),
            mid: ConvNorm::new(ps, &format!("{name}.mid"), 2 * b, 2 * b, 3, 1, rng),
            res: ResBlock::new(ps, &format!("{name}.res"), 2 * b, rng),
            up: UpNorm::new(ps, &format!("{name}.up"), 2 * b, b, rng),
            head: Conv2d::new(ps, &format!("{name}.head"), b, 2, 3, 1, 1, true, 1.0, rng),
        }
    }

    /// Both softmax channels, `[N, 2, H, W]` (background, foreground).
    pub fn scores<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.stem.forward(g, ps, x).relu();
        let h = self.down.forward(g, ps, h).relu();
        let h = self.mid.forward(g, ps, h).relu();
        let h = self.res.forward(g, ps, h);
        let h = self.up.forward(g, ps, h);
        self.head.forward(g, ps, h).softmax_channels()
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        self.scores(g, ps, x).slice_channels(1, 1)
    }
}

/// Patch discriminator emitting one probability per overlapping patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    first: Conv2d,
    body: Vec<ConvNorm>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: &DiscriminatorConfig,
        rng: &mut R,
    ) -> Self {
        let b = cfg.base_channels;
        let first = Conv2d::new(ps, &format!("{name}.c0"), 1, b, 4, 2, 1, true, 1.0, rng);
        let mut body = Vec::new();
        let mut ch = b;
        for i in 1..cfg.strided_layers {
            body.push(ConvNorm::new_k4(ps, &format!("{name}.c{i}"), ch, 2 * ch, 2, rng));
            ch *= 2;
        }
        body.push(ConvNorm::new_k4(ps, &format!("{name}.c{}", cfg.strided_layers), ch, 2 * ch, 1, rng));
        ch *= 2;
        let head = Conv2d::new(ps, &format!("{name}.head"), ch, 1, 4, 1, 1, true, 1.0, rng);
        Self { first, body, head }
    }

    /// Patch probabilities `[N, 1, h, w]`.
    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.first.forward(g, ps, x).leaky_relu(0.2);
        for l in &self.body {
            h = l.forward(g, ps, h).leaky_relu(0.2);
        }
        self.head.forward(g, ps, h).sigmoid()
    }
}

impl ConvNorm {
    fn new_k4<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, 4, stride, 1, false, 1.0, rng),
            norm: InstanceNorm::new(ps, &format!("{name}.norm"), cout),
        }
    }
}
