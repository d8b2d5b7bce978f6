//! Proposal-driven spatial attention and its mapping onto feature layers.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::{BoundingBox, ProposalSet};
use crate::error::{ensure, Result};
use crate::exec::Execution;

/// Denominator applied to the summed proposal scores at each pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionNorm {
    /// Number of proposals in the set, the same for every pixel.
    #[default]
    TotalCount,
    /// Number of proposals covering the pixel.
    PerPixelCount,
}

/// Row-major `height × width` grid of non-negative weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttentionGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `(1, 1, height, width)` tensor, broadcastable over batch and channels.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Half-open pixel index range whose centers fall inside `[lo, hi)`.
fn covered_range(lo: f64, hi: f64, len: usize) -> (usize, usize) {
    let clamp = |v: f64| v.max(0.0).min(len as f64) as usize;
    (clamp((lo - 0.5).ceil()), clamp((hi - 0.5).ceil()))
}

/// Sums `value` over the pixels each box covers, via a 2-D difference array.
fn coverage_sum(boxes: impl Iterator<Item = (BoundingBox, f64)>, height: usize, width: usize) -> Vec<f64> {
    let stride = width + 1;
    let mut diff = vec![0.0; (height + 1) * stride];
    for (b, value) in boxes {
        let (x0, x1) = covered_range(b.x_min, b.x_max, width);
        let (y0, y1) = covered_range(b.y_min, b.y_max, height);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        diff[y0 * stride + x0] += value;
        diff[y0 * stride + x1] -= value;
        diff[y1 * stride + x0] -= value;
        diff[y1 * stride + x1] += value;
    }
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let mut run = 0.0;
        for x in 0..width {
            run += diff[y * stride + x];
            let above = if y > 0 { out[(y - 1) * width + x] } else { 0.0 };
            out[y * width + x] = run + above;
        }
    }
    // Prefix sums of ±score leave tiny residues where coverage ends.
    for v in &mut out {
        if v.abs() < 1e-12 {
            *v = 0.0;
        }
    }
    out
}

/// Unnormalized per-pixel sum of the scores of covering proposals.
pub fn pixel_score_sum(proposals: &ProposalSet, height: usize, width: usize) -> AttentionGrid {
    AttentionGrid {
        height,
        width,
        values: coverage_sum(proposals.iter().map(|p| (p.region, p.score)), height, width),
    }
}

/// Per-pixel attention: summed scores of the covering proposals divided by
/// the chosen count. The caller truncates `proposals` to its top-K first.
pub fn compute_pixel_attention(
    proposals: &ProposalSet,
    height: usize,
    width: usize,
    norm: AttentionNorm,
) -> AttentionGrid {
    let mut grid = pixel_score_sum(proposals, height, width);
    if proposals.is_empty() {
        return grid;
    }
    match norm {
        AttentionNorm::TotalCount => {
            let n = proposals.len() as f64;
            grid.values.iter_mut().for_each(|v| *v /= n);
        }
        AttentionNorm::PerPixelCount => {
            let counts = coverage_sum(proposals.iter().map(|p| (p.region, 1.0)), height, width);
            for (v, c) in grid.values.iter_mut().zip(counts) {
                let c = c.round();
                *v = if c > 0.0 { *v / c } else { 0.0 };
            }
        }
    }
    grid
}

/// Block-mean pooling to a layer of the given stride. The output is
/// `ceil(H / stride) × ceil(W / stride)`; edge cells average the pixels they
/// actually cover.
pub fn map_attention_to_layer(grid: &AttentionGrid, stride: usize) -> Result<AttentionGrid> {
    ensure!(stride > 0, Argument, "layer stride must be positive");
    let (h, w) = (grid.height.div_ceil(stride), grid.width.div_ceil(stride));
    let mut out = AttentionGrid::zeros(h, w);
    for cy in 0..h {
        let ys = cy * stride..((cy + 1) * stride).min(grid.height);
        for cx in 0..w {
            let xs = cx * stride..((cx + 1) * stride).min(grid.width);
            let count = ys.len() * xs.len();
            let sum: f64 = ys
                .clone()
                .flat_map(|y| xs.clone().map(move |x| (y, x)))
                .map(|(y, x)| grid.get(y, x))
                .sum();
            out.values[cy * w + cx] = sum / count as f64;
        }
    }
    Ok(out)
}

/// Pixel attention and its per-layer mappings for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub pixel: AttentionGrid,
    pub layers: Vec<AttentionGrid>,
}

impl AttentionMap {
    pub fn build(
        proposals: &ProposalSet,
        height: usize,
        width: usize,
        strides: &[usize],
        norm: AttentionNorm,
    ) -> Result<Self> {
        let pixel = compute_pixel_attention(proposals, height, width, norm);
        let layers = strides
            .iter()
            .map(|&s| map_attention_to_layer(&pixel, s))
            .collect::<Result<_>>()?;
        Ok(Self { pixel, layers })
    }
}

/// [`AttentionMap::build`] over many images.
pub fn attention_maps(
    proposals: &[ProposalSet],
    height: usize,
    width: usize,
    strides: &[usize],
    norm: AttentionNorm,
    exec: Execution,
) -> Result<Vec<AttentionMap>> {
    exec.try_map(proposals, |p| AttentionMap::build(p, height, width, strides, norm))
}
