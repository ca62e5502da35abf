use rand::Rng;

use super::config::BackboneConfig;
use crate::error::{shape_err, Result};
use crate::layers::Conv;
use crate::tensor::{Conv2dSpec, ParamStore, Session, Var};

/// Shared convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct Backbone {
    convs: Vec<Conv>,
    stride: usize,
}

pub const BASE_PREFIX: &str = "base.";

impl Backbone {
    pub fn new(
        cfg: &BackboneConfig,
        in_channels: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut cin = in_channels;
        let last = cfg.channels.len() - 1;
        for (b, &cout) in cfg.channels.iter().enumerate() {
            for j in 0..cfg.convs_per_block {
                let down = b < last && j + 1 == cfg.convs_per_block;
                let spec = Conv2dSpec {
                    stride: if down { 2 } else { 1 },
                    padding: 1,
                    dilation: 1,
                };
                let name = format!("{BASE_PREFIX}block{b}.conv{j}");
                convs.push(Conv::new(store, &name, 3, cin, cout, spec, rng));
                cin = cout;
            }
        }
        Backbone {
            convs,
            stride: cfg.stride(),
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `[H, W, 3]` image to `[H / stride, W / stride, C]` features.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Var> {
        let (h, w, _) = s.value(image).dims3()?;
        if h % self.stride != 0 || w % self.stride != 0 {
            return shape_err(format!(
                "{h}x{w} image is not divisible by stride {}",
                self.stride
            ));
        }
        let mut x = image;
        for conv in &self.convs {
            x = conv.forward_relu(s, x)?;
        }
        Ok(x)
    }
}
