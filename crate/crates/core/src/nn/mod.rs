//! Quantized network layers and the desk-scale trainer.
//!
//! Every integer dot product of inference goes through [`crate::accumulate`]. Training runs in
//! `f32` with fake quantization and always uses an overflow-free accumulator.

mod gemm;
mod infer;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accumulate::{AccumConfig, AccumError};
use crate::quant::{self, CalibrationStats, QuantError, QuantParams, QuantTensor, RealTensor};
use crate::sparsity::{self, NMSparsePattern, SparsityError};

pub use infer::{argmax, evaluate, forward_conv2d, forward_linear, forward_model, im2col, Activation};
pub use train::{train, EpochLog, Phase, ScheduleKind, TrainConfig, TrainLog, DEFAULT_MOMENTUM};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model is not calibrated: {0}")]
    Uncalibrated(String),
    #[error("empty dataset")]
    EmptyData,
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error(transparent)]
    Accum(#[from] AccumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_height: usize,
        in_width: usize,
    },
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    /// Weight tensor shape; rows are output units.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Linear { in_features, out_features } => Some(vec![out_features, in_features]),
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some(vec![out_channels, in_channels, kernel, kernel])
            }
            _ => None,
        }
    }

    /// Length of one dot product before pruning.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Linear { in_features, .. } => in_features,
            LayerKind::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Output spatial size of a convolution.
    pub fn conv_output_hw(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Conv2d { kernel, stride, padding, in_height, in_width, .. } => Some((
                (in_height + 2 * padding - kernel) / stride + 1,
                (in_width + 2 * padding - kernel) / stride + 1,
            )),
            _ => None,
        }
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let numel: usize = input.iter().product();
        match *self {
            LayerKind::Linear { in_features, out_features } => {
                if input.len() != 1 || input[0] != in_features {
                    return Err(NnError::Shape(format!("linear expects [{in_features}], got {input:?}")));
                }
                Ok(vec![out_features])
            }
            LayerKind::Conv2d { in_channels, out_channels, in_height, in_width, .. } => {
                if input != [in_channels, in_height, in_width] {
                    return Err(NnError::Shape(format!(
                        "conv expects [{in_channels}, {in_height}, {in_width}], got {input:?}"
                    )));
                }
                let (oh, ow) = self.conv_output_hw().expect("conv layer");
                Ok(vec![out_channels, oh, ow])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![numel]),
        }
    }

    fn validate(&self) -> Result<(), NnError> {
        match *self {
            LayerKind::Linear { in_features, out_features } if in_features == 0 || out_features == 0 => {
                Err(NnError::InvalidLayer("linear dimensions must be positive".into()))
            }
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, in_height, in_width } => {
                if [in_channels, out_channels, kernel, stride, in_height, in_width].contains(&0) {
                    return Err(NnError::InvalidLayer("conv dimensions must be positive".into()));
                }
                if in_height + 2 * padding < kernel || in_width + 2 * padding < kernel {
                    return Err(NnError::InvalidLayer("kernel larger than padded input".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub accum: AccumConfig,
    pub prunable: bool,
}

/// Weights of a linear or convolution layer.
///
/// The quantized copy is kept equal to `quantize(apply_mask(master))` with symmetric
/// per-tensor parameters; every mutation goes through methods that refresh it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    master: RealTensor,
    mask: NMSparsePattern,
    quantized: QuantTensor,
    /// Calibration of this layer's output; `None` for the layer that produces logits.
    pub out_stats: Option<CalibrationStats>,
}

/// Symmetric parameters for a masked weight tensor.
pub fn weight_params(masked: &RealTensor, bits: u32) -> Result<QuantParams, QuantError> {
    let (lo, hi) = masked.min_max().unwrap_or((0.0, 0.0));
    QuantParams::from_range(f64::from(lo), f64::from(hi), bits, true)
}

impl WeightState {
    pub fn new(
        master: RealTensor,
        mask: NMSparsePattern,
        bits: u32,
        out_stats: Option<CalibrationStats>,
    ) -> Result<Self, NnError> {
        let masked = sparsity::apply_mask(&master, &mask)?;
        let params = weight_params(&masked, bits)?;
        let quantized = quant::quantize(&masked, &params);
        Ok(Self { master, mask, quantized, out_stats })
    }

    pub fn master(&self) -> &RealTensor {
        &self.master
    }

    pub fn mask(&self) -> &NMSparsePattern {
        &self.mask
    }

    pub fn quantized(&self) -> &QuantTensor {
        &self.quantized
    }

    pub fn bits(&self) -> u32 {
        self.quantized.params().bits()
    }

    /// Replaces master weights and mask, then re-derives the quantized copy.
    pub fn update(&mut self, master: RealTensor, mask: NMSparsePattern) -> Result<(), NnError> {
        *self = Self::new(master, mask, self.bits(), self.out_stats)?;
        Ok(())
    }

    pub(crate) fn master_mut_unsynced(&mut self) -> &mut RealTensor {
        &mut self.master
    }

    pub(crate) fn set_mask_unsynced(&mut self, mask: NMSparsePattern) {
        self.mask = mask;
    }

    /// Re-derives the quantized copy after direct edits of master or mask.
    pub(crate) fn resync(&mut self) -> Result<(), NnError> {
        let masked = sparsity::apply_mask(&self.master, &self.mask)?;
        let params = weight_params(&masked, self.bits())?;
        self.quantized = quant::quantize(&masked, &params);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Option<WeightState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 784 -> 10 with a ReLU on the scaled input.
    Mlp1,
    /// 784 -> 784 -> 10.
    Mlp2,
    /// Two strided 3x3 convolutions and a linear head.
    SmallConv,
}

impl Preset {
    pub fn kinds(&self) -> Vec<(LayerKind, bool)> {
        use LayerKind::*;
        match self {
            Preset::Mlp1 => vec![
                (Flatten, false),
                (Relu, false),
                (Linear { in_features: 784, out_features: 10 }, false),
            ],
            Preset::Mlp2 => vec![
                (Flatten, false),
                (Linear { in_features: 784, out_features: 784 }, true),
                (Relu, false),
                (Linear { in_features: 784, out_features: 10 }, false),
            ],
            Preset::SmallConv => vec![
                (
                    Conv2d {
                        in_channels: 1,
                        out_channels: 8,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                        in_height: 28,
                        in_width: 28,
                    },
                    false,
                ),
                (Relu, false),
                (
                    Conv2d {
                        in_channels: 8,
                        out_channels: 16,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                        in_height: 14,
                        in_width: 14,
                    },
                    true,
                ),
                (Relu, false),
                (Flatten, false),
                (Linear { in_features: 16 * 7 * 7, out_features: 10 }, false),
            ],
        }
    }
}

/// Ordered layers plus the calibration of the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub input_stats: CalibrationStats,
    pub num_classes: usize,
    /// Group size used for this model's N:M patterns.
    pub group_size: usize,
}

impl Model {
    /// Builds and randomly initializes a preset (He-uniform weights, dense masks).
    pub fn from_preset(
        preset: Preset,
        weight_bits: u32,
        act_bits: u32,
        accum: AccumConfig,
        group_size: usize,
        seed: u64,
    ) -> Result<Self, NnError> {
        let specs: Vec<LayerSpec> = preset
            .kinds()
            .into_iter()
            .map(|(kind, prunable)| LayerSpec { kind, weight_bits, act_bits, accum, prunable })
            .collect();
        Self::from_specs(specs, vec![1, 28, 28], group_size, seed)
    }

    pub fn from_specs(specs: Vec<LayerSpec>, input_shape: Vec<usize>, group_size: usize, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last_weight = specs.iter().rposition(|s| s.kind.has_weights());
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let weights = match spec.kind.weight_shape() {
                Some(shape) => {
                    let fan_in = spec.kind.fan_in() as f32;
                    let bound = (6.0 / fan_in).sqrt();
                    let n: usize = shape.iter().product();
                    let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    let master = RealTensor::new(shape.clone(), values)?;
                    let mask = NMSparsePattern::dense(&shape, group_size);
                    let out_stats = (Some(i) != last_weight).then(CalibrationStats::default);
                    Some(WeightState::new(master, mask, spec.weight_bits, out_stats)?)
                }
                None => None,
            };
            layers.push(Layer { spec, weights });
        }
        let model = Self {
            layers,
            input_shape,
            input_stats: CalibrationStats::default(),
            num_classes: 0,
            group_size,
        };
        model.finish()
    }

    /// Validates layer specs and shape chaining, and fills in the class count.
    pub fn finish(mut self) -> Result<Self, NnError> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let spec = &layer.spec;
            spec.kind.validate()?;
            for bits in [spec.weight_bits, spec.act_bits] {
                if !(quant::MIN_BITS..=quant::MAX_BITS).contains(&bits) {
                    return Err(NnError::Quant(QuantError::InvalidBits(bits)));
                }
            }
            match (&layer.weights, spec.kind.weight_shape()) {
                (Some(w), Some(ws)) => {
                    if w.master().shape() != ws.as_slice() {
                        return Err(NnError::Shape(format!("layer {i} weight shape {:?} != {ws:?}", w.master().shape())));
                    }
                    if !spec.prunable && w.mask().keep().iter().any(|&k| !k) {
                        return Err(NnError::InvalidLayer(format!("layer {i} is not prunable but carries a sparse mask")));
                    }
                }
                (None, None) => {}
                _ => return Err(NnError::InvalidLayer(format!("layer {i} weights do not match its kind"))),
            }
            shape = spec.kind.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(NnError::Shape(format!("model output must be a vector, got {shape:?}")));
        }
        self.num_classes = shape[0];
        Ok(self)
    }

    pub fn weight_layers(&self) -> impl Iterator<Item = (usize, &Layer)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.weights.is_some())
    }

    /// Whether the input and every hidden activation site have seen data.
    pub fn is_calibrated(&self) -> bool {
        self.input_stats.is_calibrated()
            && self
                .layers
                .iter()
                .filter_map(|l| l.weights.as_ref())
                .all(|w| w.out_stats.is_none_or(|s| s.is_calibrated()))
    }

    /// Overrides the accumulator configuration of every layer.
    pub fn set_accum(&mut self, accum: AccumConfig) {
        for layer in &mut self.layers {
            layer.spec.accum = accum;
        }
    }

    /// Sparsity over all prunable weights.
    pub fn sparsity(&self) -> f64 {
        let (pruned, total) = self
            .layers
            .iter()
            .filter(|l| l.spec.prunable)
            .filter_map(|l| l.weights.as_ref())
            .fold((0usize, 0usize), |(p, t), w| {
                let k = w.mask().keep();
                (p + k.iter().filter(|&&x| !x).count(), t + k.len())
            });
        if total == 0 {
            0.0
        } else {
            pruned as f64 / total as f64
        }
    }

    pub fn input_params(&self) -> Result<QuantParams, NnError> {
        let bits = self
            .weight_layers()
            .next()
            .map(|(_, l)| l.spec.act_bits)
            .ok_or_else(|| NnError::InvalidLayer("model has no weight layers".into()))?;
        if !self.input_stats.is_calibrated() {
            return Err(NnError::Uncalibrated("input".into()));
        }
        Ok(self.input_stats.params(bits)?)
    }
}

/// Images flattened per sample plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub sample_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, sample_shape: Vec<usize>) -> Result<Self, NnError> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(NnError::Shape(format!(
                "{} pixels for {} labels of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels, sample_shape })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            sample_shape: self.sample_shape.clone(),
        }
    }
}
