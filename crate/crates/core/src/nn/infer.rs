//! Integer inference: every output element is one dot product through the accumulate engine.
//!
//! Activations carry a zero-point, so each dot product is `sum(w_q * (x_q - o_x))`; the weight
//! zero-point is always 0. Accumulator values are mapped back to reals through
//! `s_w * s_x` and requantized to the next activation site, except for the final layer whose
//! real outputs are the logits.

use rayon::prelude::*;

use super::{Dataset, Layer, LayerKind, Model, NnError};
use crate::accumulate::{evaluate_products, AccumConfig, DotOutcome, OverflowClass};
use crate::profile::{LayerOverflow, OverflowCounts, OverflowReport};
use crate::quant::{QuantParams, QuantTensor, RealTensor};

impl OverflowCounts {
    #[inline]
    pub(crate) fn record(&mut self, o: &DotOutcome) {
        self.dots += 1;
        self.events += o.events as u64;
        match o.class {
            OverflowClass::None => {}
            OverflowClass::Transient => {
                self.transient += 1;
                if o.events > 0 {
                    self.transient_with_events += 1;
                }
            }
            OverflowClass::Persistent => self.persistent += 1,
        }
    }
}

/// Output of one layer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Codes(QuantTensor),
    Logits(RealTensor),
}

/// Kept weight codes per output row, with the accumulator config and scales.
struct Prepared {
    rows: Vec<Vec<(usize, i64)>>,
    weight_scale: f64,
    accum: AccumConfig,
    out_params: Option<QuantParams>,
}

fn prepare(layer: &Layer, accum: Option<AccumConfig>) -> Result<Prepared, NnError> {
    let w = layer
        .weights
        .as_ref()
        .ok_or_else(|| NnError::InvalidLayer("layer has no weights".into()))?;
    let q = w.quantized();
    let shape = q.shape();
    let row_len: usize = shape[1..].iter().product();
    let rows = (0..shape[0])
        .map(|r| {
            (0..row_len)
                .map(|i| r * row_len + i)
                .filter(|&i| w.mask().is_kept(i))
                .map(|i| (i % row_len, i64::from(q.values()[i])))
                .collect()
        })
        .collect();
    let out_params = match w.out_stats {
        Some(stats) if stats.is_calibrated() => Some(stats.params(layer.spec.act_bits)?),
        Some(_) => return Err(NnError::Uncalibrated("hidden activation site".into())),
        None => None,
    };
    Ok(Prepared {
        rows,
        weight_scale: q.params().scale(),
        accum: accum.unwrap_or(layer.spec.accum),
        out_params,
    })
}

/// Rows of `c*k*k` values, one per output pixel (row-major over the output grid). Padding reads
/// as `T::default()`; for centered activation codes that is the zero-point.
pub fn im2col<T: Copy + Default>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let oh = (height + 2 * padding - kernel) / stride + 1;
    let ow = (width + 2 * padding - kernel) / stride + 1;
    let patch = channels * kernel * kernel;
    let mut cols = vec![T::default(); oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..][..patch];
            for c in 0..channels {
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        row[(c * kernel + ky) * kernel + kx] = x[(c * height + iy as usize) * width + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn run_weight_layer(
    kind: &LayerKind,
    prep: &Prepared,
    x: &QuantTensor,
    counts: &mut OverflowCounts,
) -> Result<Activation, NnError> {
    let out_shape = kind.output_shape(x.shape())?;
    let xp = x.params();
    let centered: Vec<i64> = x.values().iter().map(|&q| i64::from(q - xp.offset())).collect();
    let mut products: Vec<i64> = Vec::with_capacity(kind.fan_in());
    let mut dot = |input: &[i64], row: &[(usize, i64)]| {
        products.clear();
        products.extend(row.iter().map(|&(i, w)| w * input[i]));
        let out = evaluate_products(&products, &prep.accum);
        counts.record(&out);
        out.value
    };
    let acc: Vec<i128> = match *kind {
        LayerKind::Linear { .. } => prep.rows.iter().map(|row| dot(&centered, row)).collect(),
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, in_height, in_width } => {
            let cols = im2col(&centered, in_channels, in_height, in_width, kernel, stride, padding);
            let patch = in_channels * kernel * kernel;
            let pixels = cols.len() / patch;
            let mut acc = vec![0i128; out_channels * pixels];
            for px in 0..pixels {
                let col = &cols[px * patch..(px + 1) * patch];
                for (oc, row) in prep.rows.iter().enumerate() {
                    acc[oc * pixels + px] = dot(col, row);
                }
            }
            acc
        }
        _ => unreachable!("weight layer"),
    };
    let real_scale = prep.weight_scale * xp.scale();
    Ok(match prep.out_params {
        Some(op) => {
            let codes = acc.iter().map(|&z| op.quantize_f64(real_scale * z as f64)).collect();
            Activation::Codes(QuantTensor::new(out_shape, codes, op)?)
        }
        None => {
            let reals = acc.iter().map(|&z| (real_scale * z as f64) as f32).collect();
            Activation::Logits(RealTensor::new(out_shape, reals)?)
        }
    })
}

fn check_input(kind: &LayerKind, layer: &Layer, x: &QuantTensor) -> Result<(), NnError> {
    if x.params().bits() != layer.spec.act_bits {
        return Err(NnError::Shape(format!(
            "input quantized at {} bits, layer expects {}",
            x.params().bits(),
            layer.spec.act_bits
        )));
    }
    kind.output_shape(x.shape()).map(|_| ())
}

/// One linear layer on one sample. Overflow statistics are added to `counts`.
pub fn forward_linear(
    x: &QuantTensor,
    layer: &Layer,
    accum: Option<AccumConfig>,
    counts: &mut OverflowCounts,
) -> Result<Activation, NnError> {
    if !matches!(layer.spec.kind, LayerKind::Linear { .. }) {
        return Err(NnError::InvalidLayer("expected a linear layer".into()));
    }
    check_input(&layer.spec.kind, layer, x)?;
    let prep = prepare(layer, accum)?;
    run_weight_layer(&layer.spec.kind, &prep, x, counts)
}

/// One convolution on one `[C, H, W]` sample via im2col.
pub fn forward_conv2d(
    x: &QuantTensor,
    layer: &Layer,
    accum: Option<AccumConfig>,
    counts: &mut OverflowCounts,
) -> Result<Activation, NnError> {
    if !matches!(layer.spec.kind, LayerKind::Conv2d { .. }) {
        return Err(NnError::InvalidLayer("expected a conv2d layer".into()));
    }
    check_input(&layer.spec.kind, layer, x)?;
    let prep = prepare(layer, accum)?;
    run_weight_layer(&layer.spec.kind, &prep, x, counts)
}

struct Plan {
    input: QuantParams,
    prepared: Vec<Option<Prepared>>,
}

fn plan(m: &Model, accum: Option<AccumConfig>) -> Result<Plan, NnError> {
    if !m.is_calibrated() {
        return Err(NnError::Uncalibrated("run training or calibration first".into()));
    }
    let prepared = m
        .layers
        .iter()
        .map(|l| l.weights.as_ref().map(|_| prepare(l, accum)).transpose())
        .collect::<Result<_, _>>()?;
    Ok(Plan { input: m.input_params()?, prepared })
}

fn run_sample(m: &Model, plan: &Plan, input: &[f32], counts: &mut [OverflowCounts]) -> Result<Vec<f32>, NnError> {
    let codes = input.iter().map(|&v| plan.input.quantize_value(v)).collect();
    let mut act = Activation::Codes(QuantTensor::new(m.input_shape.clone(), codes, plan.input)?);
    for (i, layer) in m.layers.iter().enumerate() {
        let Activation::Codes(x) = act else {
            return Err(NnError::Shape(format!("layer {i} follows the logits layer")));
        };
        act = match layer.spec.kind {
            LayerKind::Relu => {
                let zero = x.params().offset();
                let codes = x.values().iter().map(|&q| q.max(zero)).collect();
                Activation::Codes(QuantTensor::new(x.shape().to_vec(), codes, *x.params())?)
            }
            LayerKind::Flatten => {
                Activation::Codes(QuantTensor::new(vec![x.len()], x.values().to_vec(), *x.params())?)
            }
            kind => {
                let prep = plan.prepared[i].as_ref().expect("weight layer prepared");
                run_weight_layer(&kind, prep, &x, &mut counts[i])?
            }
        };
    }
    match act {
        Activation::Logits(t) => Ok(t.into_values()),
        Activation::Codes(_) => Err(NnError::InvalidLayer("model does not end in a weight layer".into())),
    }
}

/// Runs a batch `[n, ...sample shape]`. Returns logits `[n, classes]` and per-layer counts
/// (indexed like `m.layers`; non-weight layers stay zero). `accum` overrides every layer.
pub fn forward_model(
    m: &Model,
    batch: &RealTensor,
    accum: Option<AccumConfig>,
) -> Result<(RealTensor, Vec<OverflowCounts>), NnError> {
    let shape = batch.shape();
    if shape.len() != m.input_shape.len() + 1 || shape[1..] != m.input_shape[..] {
        return Err(NnError::Shape(format!("batch {:?} vs sample {:?}", shape, m.input_shape)));
    }
    let plan = plan(m, accum)?;
    let n = shape[0];
    let per: usize = m.input_shape.iter().product();
    let results: Vec<(Vec<f32>, Vec<OverflowCounts>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut counts = vec![OverflowCounts::default(); m.layers.len()];
            let logits = run_sample(m, &plan, &batch.values()[s * per..(s + 1) * per], &mut counts)?;
            Ok((logits, counts))
        })
        .collect::<Result<_, NnError>>()?;
    let mut totals = vec![OverflowCounts::default(); m.layers.len()];
    let mut logits = Vec::with_capacity(n * m.num_classes);
    for (l, c) in results {
        logits.extend(l);
        for (t, c) in totals.iter_mut().zip(&c) {
            t.merge(c);
        }
    }
    Ok((RealTensor::new(vec![n, m.num_classes], logits)?, totals))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy and per-layer overflow statistics over a dataset.
pub fn evaluate(m: &Model, data: &Dataset, accum: Option<AccumConfig>) -> Result<(f64, OverflowReport), NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyData);
    }
    if data.sample_shape != m.input_shape {
        return Err(NnError::Shape(format!("data {:?} vs model {:?}", data.sample_shape, m.input_shape)));
    }
    let plan = plan(m, accum)?;
    let layers = m.layers.len();
    let (correct, counts) = (0..data.len())
        .into_par_iter()
        .map(|s| -> Result<(u64, Vec<OverflowCounts>), NnError> {
            let mut counts = vec![OverflowCounts::default(); layers];
            let logits = run_sample(m, &plan, data.sample(s), &mut counts)?;
            Ok((u64::from(argmax(&logits) == usize::from(data.labels[s])), counts))
        })
        .try_reduce(
            || (0, vec![OverflowCounts::default(); layers]),
            |(ca, mut a), (cb, b)| {
                for (x, y) in a.iter_mut().zip(&b) {
                    x.merge(y);
                }
                Ok((ca + cb, a))
            },
        )?;
    let report = OverflowReport::from_layers(
        m.weight_layers()
            .map(|(i, l)| {
                let accum = accum.unwrap_or(l.spec.accum);
                LayerOverflow {
                    layer: i,
                    policy: accum.policy(),
                    p: accum.bits(),
                    b_w: l.spec.weight_bits,
                    b_x: l.spec.act_bits,
                    counts: counts[i],
                }
            })
            .collect(),
    );
    Ok((correct as f64 / data.len() as f64, report))
}
