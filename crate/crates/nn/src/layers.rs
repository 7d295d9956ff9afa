//! Network building blocks. Architectures hold only parameter handles; the
//! values live in a separate [`ParamStore`] so one architecture can be run in
//! either precision.

use rand::{Rng, RngCore};

use crate::{Float, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_he_normal(
            format!("{name}.weight"),
            [out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            pad,
        }
    }

    /// Shape-preserving 3x3 convolution.
    pub fn same3<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, 3, 1, 1, rng)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of 2x downsamplings.
    pub depth: usize,
    /// Dropout rate applied on the innermost decoder level.
    pub dropout: f64,
    /// Slope of the activation below zero; 0 gives a plain ReLU.
    pub negative_slope: f64,
}

#[derive(Clone, Copy, Debug)]
struct DoubleConv {
    first: Conv2d,
    second: Conv2d,
}

impl DoubleConv {
    fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Conv2d::same3(store, &format!("{name}.0"), cin, cout, rng),
            second: Conv2d::same3(store, &format!("{name}.1"), cout, cout, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct UpLevel {
    up: Conv2d,
    fuse: Conv2d,
}

/// Encoder-decoder with skip connections: double 3x3 convolutions per level,
/// max-pool downsampling, nearest upsampling followed by a 3x3 convolution,
/// and a 1x1 output head producing raw (pre-activation) values.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    down: Vec<DoubleConv>,
    up: Vec<UpLevel>,
    head: Conv2d,
}

impl UNet {
    pub fn new<T: Float, R: Rng + ?Sized>(
        config: UNetConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        assert!(config.base_width > 0, "U-Net needs a positive base width");
        let width = |level: usize| config.base_width << level;
        let mut down = Vec::with_capacity(config.depth + 1);
        down.push(DoubleConv::new(store, "enc0", config.in_channels, width(0), rng));
        for level in 1..=config.depth {
            down.push(DoubleConv::new(store, &format!("enc{level}"), width(level - 1), width(level), rng));
        }
        let mut up = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            up.push(UpLevel {
                up: Conv2d::same3(store, &format!("dec{level}.up"), width(level + 1), width(level), rng),
                fuse: Conv2d::same3(store, &format!("dec{level}.fuse"), 2 * width(level), width(level), rng),
            });
        }
        let head = Conv2d::new(store, "head", width(0), config.out_channels, 1, 1, 0, rng);
        Self { config, down, up, head }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Spatial size must be divisible by `2^depth`. Dropout runs only when an
    /// RNG is supplied.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Var {
        let slope = self.config.negative_slope;
        let act = |g: &mut Graph<T>, v: Var| if slope == 0.0 { g.relu(v) } else { g.leaky_relu(v, slope) };
        let [_, c, h, w] = g.value(x).shape();
        assert_eq!(c, self.config.in_channels, "U-Net input channel mismatch");
        let m = 1 << self.config.depth;
        assert!(h % m == 0 && w % m == 0, "U-Net input {h}x{w} not divisible by {m}");

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut cur = x;
        for (level, block) in self.down.iter().enumerate() {
            if level > 0 {
                cur = g.max_pool2(cur);
            }
            let a = block.first.forward(g, store, cur);
            let a = act(g, a);
            let b = block.second.forward(g, store, a);
            cur = act(g, b);
            if level < self.config.depth {
                skips.push(cur);
            }
        }
        for (i, level) in self.up.iter().enumerate() {
            let upsampled = g.upsample2(cur);
            let u = level.up.forward(g, store, upsampled);
            let mut u = act(g, u);
            if i == 0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    u = g.dropout(u, self.config.dropout, rng);
                }
            }
            let skip = skips.pop().expect("one skip per level");
            let joined = g.concat(skip, u);
            let f = level.fuse.forward(g, store, joined);
            cur = act(g, f);
        }
        self.head.forward(g, store, cur)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchDiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Stride-2 blocks before the stride-1 scoring convolution.
    pub downsamples: usize,
}

/// Convolutional critic emitting one logit per image patch.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    config: PatchDiscriminatorConfig,
    blocks: Vec<Conv2d>,
    score: Conv2d,
}

impl PatchDiscriminator {
    pub fn new<T: Float, R: Rng + ?Sized>(
        config: PatchDiscriminatorConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::with_capacity(config.downsamples);
        let mut cin = config.in_channels;
        for i in 0..config.downsamples {
            let cout = config.base_width << i;
            blocks.push(Conv2d::new(store, &format!("block{i}"), cin, cout, 4, 2, 1, rng));
            cin = cout;
        }
        let score = Conv2d::new(store, "score", cin, 1, 4, 1, 1, rng);
        Self {
            config,
            blocks,
            score,
        }
    }

    pub fn config(&self) -> &PatchDiscriminatorConfig {
        &self.config
    }

    /// Side length in input pixels seen by one output score.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for conv in self.blocks.iter().chain(std::iter::once(&self.score)) {
            rf += (conv.kernel - 1) * jump;
            jump *= conv.stride;
        }
        rf
    }

    /// Per-patch logits, shape `[n, 1, h', w']`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut cur = x;
        for block in &self.blocks {
            let y = block.forward(g, store, cur);
            cur = g.leaky_relu(y, 0.2);
        }
        self.score.forward(g, store, cur)
    }
}
