use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{ensure, Result};
use crate::nn::{self, Conv2d, NamedTensors, ParamBuilder};

/// Equal tokens mean bit-identical backbone weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneToken(pub u64);

impl std::fmt::Display for BackboneToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Stack of padded 3x3 conv + ReLU layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Indices of the layers whose activations the feature loss targets
    /// (shallow first).
    pub attack_layers: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32, 64, 64, 64],
            strides: vec![1, 2, 1, 2, 1, 2],
            attack_layers: vec![2, 4],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.channels.is_empty(), Argument, "backbone needs at least one layer");
        ensure!(
            self.channels.len() == self.strides.len(),
            Argument,
            "{} channel entries but {} strides",
            self.channels.len(),
            self.strides.len()
        );
        ensure!(
            self.strides.iter().all(|&s| s >= 1) && self.channels.iter().all(|&c| c >= 1),
            Argument,
            "strides and channels must be positive"
        );
        ensure!(
            self.attack_layers.iter().all(|&l| l < self.channels.len()),
            Argument,
            "attack layer index out of range"
        );
        Ok(())
    }

    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(1usize, |acc, &s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// `(channels, h, w)` of every layer for an `height × width` input.
    pub fn layer_shapes(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (height, width);
        self.channels
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| {
                h = nn::conv_out_len(h, s);
                w = nn::conv_out_len(w, s);
                (c, h, w)
            })
            .collect()
    }

    pub fn min_side(&self) -> usize {
        self.total_stride().max(Image::MIN_SIDE)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    layers: Vec<Conv2d>,
    config: BackboneConfig,
    params: NamedTensors,
    token: BackboneToken,
    dtype: DType,
}

impl Backbone {
    pub fn build(pb: &mut ParamBuilder, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.channels.len());
        let mut params = NamedTensors::new();
        let mut in_ch = Image::CHANNELS;
        for (i, (&out_ch, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            let name = format!("backbone.conv{i}");
            let conv = Conv2d::build(pb, &name, in_ch, out_ch, 3, stride)?;
            layers.push(conv);
            in_ch = out_ch;
        }
        // Collect what we just registered so checkpoints and tokens see it.
        let snapshot = pb_snapshot(pb, "backbone.");
        params.extend(snapshot);
        let token = BackboneToken(nn::digest(&params)?);
        Ok(Self {
            layers,
            config,
            params,
            token,
            dtype: pb.dtype(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn token(&self) -> BackboneToken {
        self.token
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Runs every layer on a `(B, 3, H, W)` batch.
    pub fn forward(&self, x: &Tensor) -> Result<FeatureMapSet> {
        self.forward_until(x, self.layers.len() - 1)
    }

    /// Runs layers `0..=last` only.
    pub fn forward_until(&self, x: &Tensor, last: usize) -> Result<FeatureMapSet> {
        let (_, c, h, w) = x.dims4()?;
        ensure!(c == Image::CHANNELS, Dimension, "expected 3 input channels, got {c}");
        let min = self.config.min_side();
        ensure!(
            h >= min && w >= min,
            Dimension,
            "input {h}x{w} is smaller than the backbone minimum {min}x{min}"
        );
        let strides = self.config.cumulative_strides();
        let mut maps = Vec::with_capacity(last + 1);
        let mut cur = x.clone();
        for layer in &self.layers[..=last.min(self.layers.len() - 1)] {
            cur = layer.forward(&cur)?.relu()?;
            maps.push(cur.clone());
        }
        let n = maps.len();
        Ok(FeatureMapSet {
            maps,
            strides: strides[..n].to_vec(),
            input_hw: (h, w),
        })
    }
}

fn pb_snapshot(pb: &ParamBuilder, prefix: &str) -> NamedTensors {
    pb.registered()
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Post-ReLU activations of every backbone layer, batch-major.
#[derive(Clone, Debug)]
pub struct FeatureMapSet {
    maps: Vec<Tensor>,
    strides: Vec<usize>,
    input_hw: (usize, usize),
}

impl FeatureMapSet {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn layer(&self, i: usize) -> &Tensor {
        &self.maps[i]
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn stride(&self, i: usize) -> usize {
        self.strides[i]
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// `(height, width)` of the input image.
    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn batch_size(&self) -> usize {
        self.maps[0].dims()[0]
    }

    /// `(channels, h, w)` per layer.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.maps
            .iter()
            .map(|m| {
                let d = m.dims();
                (d[1], d[2], d[3])
            })
            .collect()
    }

    /// Flattened values per layer, for exact comparisons.
    pub fn to_vecs(&self) -> Result<Vec<Vec<f64>>> {
        self.maps
            .iter()
            .map(|m| Ok(m.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?))
            .collect()
    }
}
