//! Dense encoder/decoder segmentation network with a dilated bottleneck.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::layers::Conv;
use crate::tensor::{Conv2dSpec, Graph, LossKind, ParamStore, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkinNetConfig {
    /// Square crop extent S.
    pub input_size: usize,
    /// Dense blocks per branch; each encoder block is followed by a 2x2 pool.
    pub blocks: usize,
    /// Convolutions per dense block.
    pub layers: usize,
    pub growth: usize,
    pub dilation_rates: Vec<usize>,
    /// Channels of the stem convolution feeding the first dense block.
    pub stem_channels: usize,
    /// Width of the dilated convolutions.
    pub bottleneck_channels: usize,
    /// Width each decoder level is reduced to before its dense block.
    pub decoder_channels: usize,
}

impl Default for SkinNetConfig {
    fn default() -> Self {
        SkinNetConfig {
            input_size: 128,
            blocks: 3,
            layers: 3,
            growth: 8,
            dilation_rates: vec![1, 2, 4, 8],
            stem_channels: 16,
            bottleneck_channels: 32,
            decoder_channels: 32,
        }
    }
}

impl SkinNetConfig {
    pub fn validate(&self) -> Result<()> {
        let down = 1usize << self.blocks;
        if self.blocks == 0 {
            return arg_err("skinnet needs at least one block per branch");
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(down) {
            return arg_err(format!(
                "input size {} is not divisible by {down}",
                self.input_size
            ));
        }
        if self.layers == 0 || self.growth == 0 {
            return arg_err("dense blocks need positive depth and growth");
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return arg_err("dilation rates must be positive and non-empty");
        }
        if self.dilation_rates.windows(2).any(|w| w[0] >= w[1]) {
            return arg_err("dilation rates must be strictly increasing");
        }
        if self.stem_channels == 0 || self.bottleneck_channels == 0 || self.decoder_channels == 0 {
            return arg_err("channel counts must be positive");
        }
        Ok(())
    }

    /// Side of the bottleneck grid.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.blocks
    }
}

/// Stack of 3x3 conv + relu layers, each fed the concatenation of the block
/// input and all earlier layer outputs.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<Conv>,
    in_channels: usize,
    growth: usize,
}

impl DenseBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        layers: usize,
        growth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| {
                Conv::new(
                    store,
                    &format!("{name}.layer{i}"),
                    3,
                    in_channels + i * growth,
                    growth,
                    Conv2dSpec::same(1),
                    rng,
                )
            })
            .collect();
        DenseBlock {
            layers,
            in_channels,
            growth,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn forward(&self, s: &mut Session, input: Var) -> Result<Var> {
        let (_, _, c) = s.value(input).dims3()?;
        if c != self.in_channels {
            return shape_err(format!(
                "dense block expects {} channels, got {c}",
                self.in_channels
            ));
        }
        let mut features = vec![input];
        let mut current = input;
        for layer in &self.layers {
            let y = layer.forward_relu(s, current)?;
            features.push(y);
            current = s.graph.concat(&features)?;
        }
        Ok(current)
    }
}

/// Sequential 3x3 convolutions with increasing dilation, then a 1x1
/// projection back to the input width.
#[derive(Clone, Debug)]
pub struct DilatedBottleneck {
    convs: Vec<Conv>,
    tail: Conv,
    channels: usize,
}

impl DilatedBottleneck {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        width: usize,
        rates: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut cin = channels;
        let convs = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let c = Conv::new(
                    store,
                    &format!("{name}.dilated{i}"),
                    3,
                    cin,
                    width,
                    Conv2dSpec::same(r),
                    rng,
                );
                cin = width;
                c
            })
            .collect();
        let tail = Conv::new(
            store,
            &format!("{name}.tail"),
            1,
            width,
            channels,
            Conv2dSpec {
                stride: 1,
                padding: 0,
                dilation: 1,
            },
            rng,
        );
        DilatedBottleneck {
            convs,
            tail,
            channels,
        }
    }

    pub fn tail(&self) -> &Conv {
        &self.tail
    }

    pub fn forward(&self, s: &mut Session, input: Var) -> Result<Var> {
        let (h, w, c) = s.value(input).dims3()?;
        if h < 3 || w < 3 {
            return arg_err(format!(
                "dilated bottleneck needs at least 3x3 input, got {h}x{w}"
            ));
        }
        if c != self.channels {
            return shape_err(format!(
                "bottleneck expects {} channels, got {c}",
                self.channels
            ));
        }
        let mut x = input;
        for conv in &self.convs {
            x = conv.forward_relu(s, x)?;
        }
        self.tail.forward(s, x)
    }
}

/// Receptive field of stacked 3x3 convolutions at the given dilation rates.
pub fn receptive_field(rates: &[usize]) -> usize {
    1 + 2 * rates.iter().sum::<usize>()
}

#[derive(Clone, Debug)]
pub struct SkinNet {
    pub config: SkinNetConfig,
    pub params: ParamStore,
    stem: Conv,
    encoder: Vec<DenseBlock>,
    bottleneck: DilatedBottleneck,
    transitions: Vec<Conv>,
    decoder: Vec<DenseBlock>,
    head: Conv,
}

impl SkinNet {
    pub fn new(config: SkinNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let p = &mut params;
        let one = Conv2dSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        };
        let stem = Conv::new(
            p,
            "skinnet.stem",
            3,
            3,
            config.stem_channels,
            Conv2dSpec::same(1),
            &mut rng,
        );
        let mut c = config.stem_channels;
        let mut encoder = Vec::new();
        let mut skips = Vec::new();
        for i in 0..config.blocks {
            let b = DenseBlock::new(
                p,
                &format!("skinnet.enc{i}"),
                c,
                config.layers,
                config.growth,
                &mut rng,
            );
            c = b.out_channels();
            skips.push(c);
            encoder.push(b);
        }
        let bottleneck = DilatedBottleneck::new(
            p,
            "skinnet.bottleneck",
            c,
            config.bottleneck_channels,
            &config.dilation_rates,
            &mut rng,
        );
        let mut transitions = Vec::new();
        let mut decoder = Vec::new();
        for (i, &skip) in skips.iter().enumerate().rev() {
            transitions.push(Conv::new(
                p,
                &format!("skinnet.dec{i}.transition"),
                1,
                c + skip,
                config.decoder_channels,
                one,
                &mut rng,
            ));
            let b = DenseBlock::new(
                p,
                &format!("skinnet.dec{i}"),
                config.decoder_channels,
                config.layers,
                config.growth,
                &mut rng,
            );
            c = b.out_channels();
            decoder.push(b);
        }
        let head = Conv::new(p, "skinnet.head", 1, c, 2, one, &mut rng);
        Ok(SkinNet {
            config,
            params,
            stem,
            encoder,
            bottleneck,
            transitions,
            decoder,
            head,
        })
    }

    pub fn from_params(config: SkinNetConfig, params: &ParamStore) -> Result<Self> {
        let mut net = SkinNet::new(config, 0)?;
        net.params.load_from(params)?;
        Ok(net)
    }

    /// `[S, S, 3]` crop to per-pixel probabilities `[S, S, 2]` over
    /// {background, lesion}.
    pub fn forward(&self, s: &mut Session, crop: Var) -> Result<Var> {
        let (h, w, c) = s.value(crop).dims3()?;
        let n = self.config.input_size;
        if (h, w, c) != (n, n, 3) {
            return shape_err(format!("skinnet expects {n}x{n}x3 crops, got {h}x{w}x{c}"));
        }
        let mut x = self.stem.forward_relu(s, crop)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let y = block.forward(s, x)?;
            skips.push(y);
            x = s.graph.maxpool2d(y, 2, 2)?;
        }
        x = self.bottleneck.forward(s, x)?;
        for ((trans, block), skip) in self
            .transitions
            .iter()
            .zip(&self.decoder)
            .zip(skips.iter().rev())
        {
            let (sh, sw, _) = s.value(*skip).dims3()?;
            let up = s.graph.bilinear_resize(x, sh, sw)?;
            let cat = s.graph.concat(&[up, *skip])?;
            let t = trans.forward_relu(s, cat)?;
            x = block.forward(s, t)?;
        }
        let logits = self.head.forward(s, x)?;
        s.graph.softmax(logits)
    }

    /// Detached forward pass.
    pub fn predict(&self, crop: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(&self.params);
        let x = s.input(crop.clone());
        let y = self.forward(&mut s, x)?;
        Ok(s.value(y).clone())
    }
}

/// `1 - sum_k (sum_n y_nk p_nk) / (sum_n y_nk + sum_n p_nk + eps)`.
pub fn dice_loss(g: &mut Graph, probs: Var, onehot: &Tensor) -> Result<Var> {
    g.loss(probs, onehot.clone(), LossKind::Dice)
}
