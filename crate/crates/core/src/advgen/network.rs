use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{self, Conv2d, Init, Linear, ParamBuilder};

/// Size of the generator network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorScale {
    /// 16 base channels, 2 residual blocks.
    #[default]
    Toy,
    /// 32 base channels, 6 residual blocks.
    Full,
}

impl GeneratorScale {
    fn base_channels(self) -> usize {
        match self {
            GeneratorScale::Toy => 16,
            GeneratorScale::Full => 32,
        }
    }

    fn residual_blocks(self) -> usize {
        match self {
            GeneratorScale::Toy => 2,
            GeneratorScale::Full => 6,
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = nn::instance_norm(&self.conv1.forward(x)?)?.relu()?;
        let h = nn::instance_norm(&self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }
}

/// Encoder-decoder emitting a residual perturbation.
///
/// Encoder: a stride-1 stem and two stride-2 blocks. Bottleneck: residual
/// blocks. Decoder: two nearest-neighbour x2 upsampling blocks and a final
/// projection to three channels. Every block but the last is conv, instance
/// norm, ReLU.
#[derive(Clone, Debug)]
pub struct Generator {
    encoder: Vec<Conv2d>,
    residual: Vec<ResidualBlock>,
    decoder: Vec<Conv2d>,
    output: Conv2d,
    linf_cap: Option<f64>,
}

impl Generator {
    pub fn build(pb: &mut ParamBuilder, scale: GeneratorScale, linf_cap: Option<f64>, zero_init: bool) -> Result<Self> {
        let c = scale.base_channels();
        let encoder = vec![
            Conv2d::build(pb, "gen.enc0", 3, c, 3, 1)?,
            Conv2d::build(pb, "gen.enc1", c, 2 * c, 3, 2)?,
            Conv2d::build(pb, "gen.enc2", 2 * c, 4 * c, 3, 2)?,
        ];
        let residual = (0..scale.residual_blocks())
            .map(|i| {
                Ok(ResidualBlock {
                    conv1: Conv2d::build(pb, &format!("gen.res{i}.conv1"), 4 * c, 4 * c, 3, 1)?,
                    conv2: Conv2d::build(pb, &format!("gen.res{i}.conv2"), 4 * c, 4 * c, 3, 1)?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder = vec![
            Conv2d::build(pb, "gen.dec0", 4 * c, 2 * c, 3, 1)?,
            Conv2d::build(pb, "gen.dec1", 2 * c, c, 3, 1)?,
        ];
        let init = if zero_init {
            Init::Const(0.0)
        } else {
            Init::Normal { std: 0.02 }
        };
        let output = Conv2d::build_with(pb, "gen.out", c, 3, 3, 1, init)?;
        Ok(Self {
            encoder,
            residual,
            decoder,
            output,
            linf_cap,
        })
    }

    pub fn linf_cap(&self) -> Option<f64> {
        self.linf_cap
    }

    /// Perturbation for a `(B, 3, H, W)` batch, same shape as the input.
    pub fn perturbation(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut t = x.clone();
        for conv in &self.encoder {
            t = nn::instance_norm(&conv.forward(&t)?)?.relu()?;
        }
        for block in &self.residual {
            t = block.forward(&t)?;
        }
        for conv in &self.decoder {
            let (_, _, th, tw) = t.dims4()?;
            t = t.upsample_nearest2d(th * 2, tw * 2)?;
            t = nn::instance_norm(&conv.forward(&t)?)?.relu()?;
        }
        let raw = self.output.forward(&t)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
        Ok(match self.linf_cap {
            Some(cap) => (raw.tanh()? * cap)?,
            None => raw,
        })
    }

    /// `clamp(x + perturbation(x), 0, 1)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.perturbation(x)?)?.clamp(0.0, 1.0)?)
    }
}

/// Strided conv classifier ending in one real/fake probability per image.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl Discriminator {
    pub fn build(pb: &mut ParamBuilder) -> Result<Self> {
        let widths = [3, 16, 32, 64, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::build(pb, &format!("disc.conv{i}"), w[0], w[1], 3, 2))
            .collect::<Result<_>>()?;
        let head = Linear::build(pb, "disc.head", widths[4], 1)?;
        Ok(Self { convs, head })
    }

    /// `(B,)` probabilities that each image is clean.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = x.clone();
        for conv in &self.convs {
            t = nn::leaky_relu(&conv.forward(&t)?, 0.2)?;
        }
        let pooled = t.mean(D::Minus1)?.mean(D::Minus1)?;
        nn::sigmoid(&self.head.forward(&pooled)?.squeeze(1)?)
    }
}

/// Parameter dtype used by the attack networks.
pub(crate) const DTYPE: DType = DType::F32;

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn random_batch(seed: u64, b: usize, h: usize, w: usize) -> Tensor {
        use rand::Rng;
        let mut rng = nn::seeded_rng(seed);
        let v: Vec<f32> = (0..b * 3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(v, (b, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_init_is_identity() {
        let mut pb = ParamBuilder::fresh(1, false, DTYPE);
        let g = Generator::build(&mut pb, GeneratorScale::Toy, Some(0.1), true).unwrap();
        let x = random_batch(2, 2, 24, 20);
        let y = g.forward(&x).unwrap();
        let diff = nn::scalar(&(y - &x).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn full_scale_keeps_shape() {
        let mut pb = ParamBuilder::fresh(1, false, DTYPE);
        let g = Generator::build(&mut pb, GeneratorScale::Full, None, false).unwrap();
        let x = random_batch(3, 1, 19, 33);
        assert_eq!(g.forward(&x).unwrap().dims(), x.dims());
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let mut pb = ParamBuilder::fresh(4, false, DTYPE);
        let d = Discriminator::build(&mut pb).unwrap();
        let p = d.forward(&random_batch(5, 3, 32, 32)).unwrap();
        assert_eq!(p.dims(), &[3]);
        assert!(p.to_vec1::<f32>().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn output_is_clamped_and_shaped(seed in 0u64..1000, h in 16usize..40, w in 16usize..40, capped in any::<bool>()) {
            let mut pb = ParamBuilder::fresh(seed, false, DTYPE);
            let cap = if capped { Some(0.1) } else { None };
            let g = Generator::build(&mut pb, GeneratorScale::Toy, cap, false).unwrap();
            let x = random_batch(seed + 1, 1, h, w);
            let y = g.forward(&x).unwrap();
            prop_assert_eq!(y.dims(), x.dims());
            let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            prop_assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
            if capped {
                let d = nn::scalar(&(y - &x).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
                prop_assert!(d <= 0.1 + 1e-6);
            }
        }
    }
}
