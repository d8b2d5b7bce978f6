//! Minimal layer toolkit on top of candle.
//!
//! Parameters are created through a [`ParamBuilder`], which either draws
//! fresh seeded weights (optionally as trainable `Var`s) or hands out frozen
//! tensors loaded from a checkpoint. Networks are plain structs of tensors;
//! freezing a trained network means rebuilding it from detached tensors.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)` (He/Kaiming, ReLU gain).
    Kaiming { fan_in: usize },
    Uniform { bound: f64 },
    Normal { std: f64 },
    Const(f64),
}

enum Source {
    Fresh { rng: ChaCha8Rng, trainable: bool },
    Load(HashMap<String, Tensor>),
}

pub struct ParamBuilder {
    source: Source,
    dtype: DType,
    device: Device,
    tensors: NamedTensors,
    vars: Vec<Var>,
}

impl ParamBuilder {
    /// Fresh parameters from a seeded generator.
    pub fn fresh(seed: u64, trainable: bool, dtype: DType) -> Self {
        Self {
            source: Source::Fresh {
                rng: ChaCha8Rng::seed_from_u64(seed),
                trainable,
            },
            dtype,
            device: Device::Cpu,
            tensors: NamedTensors::new(),
            vars: Vec::new(),
        }
    }

    /// Frozen parameters taken from `tensors` (converted to `dtype`).
    pub fn frozen(tensors: &NamedTensors, dtype: DType) -> Self {
        Self::from_map(tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect(), dtype)
    }

    pub fn from_map(tensors: HashMap<String, Tensor>, dtype: DType) -> Self {
        Self {
            source: Source::Load(tensors),
            dtype,
            device: Device::Cpu,
            tensors: NamedTensors::new(),
            vars: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let tensor = match &mut self.source {
            Source::Fresh { rng, trainable } => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Kaiming { fan_in } => {
                        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    Init::Uniform { bound } => {
                        if bound == 0.0 {
                            vec![0.0; n]
                        } else {
                            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                        }
                    }
                    Init::Normal { std } => (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            z * std
                        })
                        .collect(),
                    Init::Const(c) => vec![c; n],
                };
                let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
                if *trainable {
                    let var = Var::from_tensor(&t)?;
                    let t = var.as_tensor().clone();
                    self.vars.push(var);
                    t
                } else {
                    t
                }
            }
            Source::Load(map) => {
                let t = map
                    .get(name)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
                if t.dims() != shape {
                    return Err(Error::Format(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?.detach()
            }
        };
        if self.tensors.insert(name.to_string(), tensor.clone()).is_some() {
            return Err(Error::Argument(format!("parameter `{name}` registered twice")));
        }
        Ok(tensor)
    }

    /// Parameters registered so far.
    pub fn registered(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn finish(self) -> Params {
        Params {
            tensors: self.tensors,
            vars: self.vars,
        }
    }
}

/// Every parameter of a built network, plus its trainable handles.
#[derive(Clone, Debug)]
pub struct Params {
    pub tensors: NamedTensors,
    pub vars: Vec<Var>,
}

impl Params {
    /// Detached snapshot, safe to keep after the trainable vars move on.
    pub fn snapshot(&self) -> Result<NamedTensors> {
        self.tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.detach().copy()?)))
            .collect()
    }
}

pub fn save_tensors(tensors: &NamedTensors, path: &Path) -> Result<()> {
    let map: HashMap<String, Tensor> = tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<NamedTensors> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint file not found"),
        ));
    }
    Ok(candle_core::safetensors::load(path, &Device::Cpu)?.into_iter().collect())
}

/// Selects the entries under `prefix.` and strips the prefix.
pub fn strip_prefix(tensors: &NamedTensors, prefix: &str) -> NamedTensors {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}

pub fn add_prefix(tensors: &NamedTensors, prefix: &str) -> NamedTensors {
    tensors.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect()
}

/// Order-sensitive FNV-1a digest of parameter names and bit patterns.
pub fn digest(tensors: &NamedTensors) -> Result<u64> {
    const PRIME: u64 = 0x100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
    };
    for (name, t) in tensors {
        feed(name.as_bytes());
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            feed(&v.to_bits().to_le_bytes());
        }
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn build(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.get(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], Init::Kaiming { fan_in })?;
        let bias = pb.get(&format!("{name}.bias"), &[out_ch], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// Same as [`Conv2d::build`] but with weights drawn from `init`.
    pub fn build_with(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = pb.get(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], init)?;
        let bias = pb.get(&format!("{name}.bias"), &[out_ch], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let b = self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Output side length of a padded 3x3 / 1x1 convolution with this stride.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn build(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.get(&format!("{name}.weight"), &[out_dim, in_dim], Init::Kaiming { fan_in: in_dim })?;
        let bias = pb.get(&format!("{name}.bias"), &[out_dim], Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Numerically stable elementwise binary cross-entropy on logits,
/// `max(x, 0) - x·t + ln(1 + e^{-|x|})`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * targets)?)? + softplus)?)
}

/// Elementwise smooth-L1 (Huber with unit threshold).
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let diff = (pred - target)?.abs()?;
    let quad = (diff.sqr()? * 0.5)?;
    let lin = diff.affine(1.0, -0.5)?;
    let mask = diff.lt(1.0)?;
    Ok(mask.where_cond(&quad, &lin)?)
}

pub fn adam(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<candle_nn::AdamW> {
    use candle_nn::Optimizer;
    let params = candle_nn::ParamsAdamW {
        lr,
        beta1,
        beta2,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(candle_nn::AdamW::new(vars, params)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a few indices.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_params_are_seeded() {
        let mut a = ParamBuilder::fresh(7, false, DType::F32);
        let mut b = ParamBuilder::fresh(7, false, DType::F32);
        let ta = a.get("w", &[4, 3], Init::Kaiming { fan_in: 3 }).unwrap();
        let tb = b.get("w", &[4, 3], Init::Kaiming { fan_in: 3 }).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn frozen_builder_checks_names_and_shapes() {
        let mut fresh = ParamBuilder::fresh(1, true, DType::F32);
        Conv2d::build(&mut fresh, "c", 3, 4, 3, 1).unwrap();
        let params = fresh.finish();
        assert_eq!(params.vars.len(), 2);
        let snap = params.snapshot().unwrap();
        let mut ok = ParamBuilder::frozen(&snap, DType::F64);
        assert!(Conv2d::build(&mut ok, "c", 3, 4, 3, 1).is_ok());
        let mut wrong = ParamBuilder::frozen(&snap, DType::F32);
        assert!(Conv2d::build(&mut wrong, "c", 3, 5, 3, 1).is_err());
        let mut missing = ParamBuilder::frozen(&snap, DType::F32);
        assert!(Conv2d::build(&mut missing, "d", 3, 4, 3, 1).is_err());
    }

    #[test]
    fn bce_matches_closed_form() {
        let x = Tensor::new(&[-3.0f64, 0.0, 2.5], &Device::Cpu).unwrap();
        let t = Tensor::new(&[0.0f64, 1.0, 1.0], &Device::Cpu).unwrap();
        let got = bce_with_logits(&x, &t).unwrap().to_vec1::<f64>().unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want = [-(1.0 - sig(-3.0)).ln(), -sig(0.0).ln(), -sig(2.5).ln()];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_lengths() {
        assert_eq!(conv_out_len(64, 2), 32);
        assert_eq!(conv_out_len(48, 1), 48);
        assert_eq!(conv_out_len(17, 2), 9);
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(1, &[0, 1]), mix_seed(1, &[1, 0]));
        assert_eq!(mix_seed(5, &[3]), mix_seed(5, &[3]));
    }
}
