//! Fully convolutional DenseNet for per-pixel binary segmentation.

use htc_nn::layers::{dropout, BatchNorm2d, BatchStats, Conv2d, ConvTranspose2d};
use htc_nn::{concat_channels, Float, Graph, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterArch {
    pub patch_size: usize,
    /// Channels of the first 3x3 convolution.
    pub first_channels: usize,
    /// Feature maps added by each dense layer.
    pub growth: usize,
    pub layers_per_block: usize,
    /// Number of transition-down (and transition-up) steps.
    pub transitions: usize,
    pub dropout: f64,
}

impl SegmenterArch {
    /// 3 transitions at 128 px and above, 2 from 64 px, 1 below.
    pub fn for_patch(patch_size: usize) -> Self {
        let transitions = if patch_size >= 128 {
            3
        } else if patch_size >= 64 {
            2
        } else {
            1
        };
        Self {
            patch_size,
            first_channels: 16,
            growth: 12,
            layers_per_block: 4,
            transitions,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.first_channels == 0 || self.growth == 0 || self.layers_per_block == 0 {
            return Err(Error::Argument("segmenter widths must be positive".into()));
        }
        let div = 1usize << self.transitions;
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return Err(Error::Argument(format!(
                "patch size {} must be a positive multiple of {div}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Channels a dense block adds to its input.
    pub fn block_growth(&self) -> usize {
        self.growth * self.layers_per_block
    }
}

/// Forward-pass mode: batch statistics and dropout in training, running
/// statistics and no dropout otherwise.
pub struct Mode<'r, R: Rng + ?Sized> {
    pub train: bool,
    pub rng: &'r mut R,
}

/// Batch statistics collected during a training forward pass; apply them
/// with [`DenseNet::update_running`] after the optimizer step.
#[derive(Debug, Default)]
pub struct NormUpdates(Vec<(BatchNorm2d, BatchStats)>);

#[derive(Debug, Clone)]
struct BnReluConv {
    bn: BatchNorm2d,
    conv: Conv2d,
}

impl BnReluConv {
    fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), cin),
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, k, 1, k / 2, true, 1.0, rng),
        }
    }

    fn forward<'g, T: Float, R: Rng + ?Sized>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x: Var<'g, T>,
        p: f64,
        mode: &mut Mode<'_, R>,
        upd: &mut NormUpdates,
    ) -> Var<'g, T> {
        let (h, stats) = self.bn.forward(g, ps, x, mode.train);
        if let Some(s) = stats {
            upd.0.push((self.bn.clone(), s));
        }
        dropout(self.conv.forward(g, ps, h.relu()), p, mode.train, mode.rng)
    }
}

/// Dense block: each layer sees the concatenation of the block input and all
/// earlier layer outputs.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    layers: Vec<BnReluConv>,
}

impl DenseBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        growth: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| BnReluConv::new(ps, &format!("{name}.l{i}"), cin + i * growth, growth, 3, rng))
                .collect(),
        }
    }

    /// Returns `(input ++ new features, new features)`.
    pub fn forward<'g, T: Float, R: Rng + ?Sized>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x: Var<'g, T>,
        p: f64,
        mode: &mut Mode<'_, R>,
        upd: &mut NormUpdates,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let mut all = x;
        let mut new = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let f = layer.forward(g, ps, all, p, mode, upd);
            all = concat_channels(&[all, f]);
            new.push(f);
        }
        (all, concat_channels(&new))
    }
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    pub arch: SegmenterArch,
    stem: Conv2d,
    down_blocks: Vec<DenseBlock>,
    transitions_down: Vec<BnReluConv>,
    bottleneck: DenseBlock,
    transitions_up: Vec<ConvTranspose2d>,
    up_blocks: Vec<DenseBlock>,
    head: Conv2d,
}

impl DenseNet {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, arch: &SegmenterArch, rng: &mut R) -> Self {
        let (k, l) = (arch.growth, arch.layers_per_block);
        let grow = arch.block_growth();
        let mut c = arch.first_channels;
        let stem = Conv2d::new(ps, &format!("{name}.stem"), 1, c, 3, 1, 1, true, 1.0, rng);
        let mut down_blocks = Vec::new();
        let mut transitions_down = Vec::new();
        let mut skips = Vec::new();
        for i in 0..arch.transitions {
            down_blocks.push(DenseBlock::new(ps, &format!("{name}.down{i}"), c, k, l, rng));
            c += grow;
            skips.push(c);
            transitions_down.push(BnReluConv::new(ps, &format!("{name}.td{i}"), c, c, 1, rng));
        }
        let bottleneck = DenseBlock::new(ps, &format!("{name}.mid"), c, k, l, rng);
        let mut transitions_up = Vec::new();
        let mut up_blocks = Vec::new();
        let mut up_in = grow;
        for (i, &skip) in skips.iter().enumerate().rev() {
            transitions_up.push(ConvTranspose2d::new(ps, &format!("{name}.tu{i}"), up_in, up_in, 3, 2, 1, 1, true, rng));
            c = up_in + skip;
            up_blocks.push(DenseBlock::new(ps, &format!("{name}.up{i}"), c, k, l, rng));
            up_in = grow;
        }
        // the last block's full output (its input plus new features)
        let head = Conv2d::new(ps, &format!("{name}.head"), c + grow, 2, 1, 1, 0, true, 1.0, rng);
        Self {
            arch: *arch,
            stem,
            down_blocks,
            transitions_down,
            bottleneck,
            transitions_up,
            up_blocks,
            head,
        }
    }

    /// Per-pixel class probabilities `[N, 2, H, W]` (background, foreground).
    pub fn forward<'g, T: Float, R: Rng + ?Sized>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x: Var<'g, T>,
        mode: &mut Mode<'_, R>,
    ) -> (Var<'g, T>, NormUpdates) {
        let p = self.arch.dropout;
        let mut upd = NormUpdates::default();
        let mut h = self.stem.forward(g, ps, x);
        let mut skips = Vec::new();
        for (block, td) in self.down_blocks.iter().zip(&self.transitions_down) {
            let (all, _) = block.forward(g, ps, h, p, mode, &mut upd);
            skips.push(all);
            h = td.forward(g, ps, all, p, mode, &mut upd).max_pool2();
        }
        let (mut all, mut new) = self.bottleneck.forward(g, ps, h, p, mode, &mut upd);
        for ((tu, block), skip) in self.transitions_up.iter().zip(&self.up_blocks).zip(skips.iter().rev()) {
            let up = tu.forward(g, ps, new);
            (all, new) = block.forward(g, ps, concat_channels(&[up, *skip]), p, mode, &mut upd);
        }
        (self.head.forward(g, ps, all).softmax_channels(), upd)
    }

    pub fn update_running<T: Float>(ps: &mut ParamStore<T>, upd: &NormUpdates) {
        for (bn, stats) in &upd.0 {
            bn.update_running(ps, stats);
        }
    }
}
