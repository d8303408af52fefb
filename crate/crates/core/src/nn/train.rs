//! Float training with fake quantization and iterative N:M pruning.
//!
//! The forward pass mirrors integer inference: the input, every weight tensor and every hidden
//! activation site are fake-quantized during QAT; gradients pass straight through rounding and
//! are zeroed where a value was clamped. Pruned weights stay exactly zero in the master copy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Layout};
use super::infer::{argmax, im2col};
use super::{weight_params, Dataset, LayerKind, Model, NnError};
use crate::quant::QuantParams;
use crate::sparsity::{self, PruneSchedule};

pub const DEFAULT_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Prune in float, then quantization-aware fine-tuning with frozen masks.
    PtoQ,
    /// Quantization-aware training throughout, pruning by quantized magnitude.
    QtoP,
}

fn default_momentum() -> f32 {
    DEFAULT_MOMENTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: ScheduleKind,
    pub epochs: usize,
    /// Trailing QAT epochs of a `PtoQ` run; `QtoP` runs are QAT throughout.
    pub qat_epochs: usize,
    pub prune: PruneSchedule,
    pub learning_rate: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.qat_epochs > self.epochs {
            return bad(format!("qat_epochs {} exceeds epochs {}", self.qat_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        self.prune.validate()?;
        let pruning_ends = match self.schedule {
            ScheduleKind::PtoQ => self.epochs - self.qat_epochs,
            ScheduleKind::QtoP => self.epochs,
        };
        if self.prune.completion_epoch() > pruning_ends {
            return bad(format!(
                "pruning completes at epoch {} but must finish by epoch {pruning_ends}",
                self.prune.completion_epoch()
            ));
        }
        Ok(())
    }

    /// Whether epoch `e` (1-based) runs with fake quantization.
    pub fn is_qat_epoch(&self, e: usize) -> bool {
        match self.schedule {
            ScheduleKind::PtoQ => e > self.epochs - self.qat_epochs,
            ScheduleKind::QtoP => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Float,
    Qat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training cross-entropy.
    pub loss: f64,
    /// Training top-1 accuracy of the (fake-quantized) forward passes.
    pub accuracy: f64,
    /// Sparsity of the prunable layers at the end of the epoch.
    pub sparsity: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Saved forward state of one layer for the backward pass.
enum Cache {
    None,
    Relu(Vec<bool>),
    Dense {
        input: Vec<f32>,
        weights: Vec<f32>,
        /// Straight-through mask of the output fake quantization.
        pass: Option<Vec<bool>>,
    },
}

fn fake_quantize_site(values: &mut [f32], p: &QuantParams) -> Vec<bool> {
    let (lo, hi) = p.real_range();
    values
        .iter_mut()
        .map(|v| {
            let inside = *v >= lo && *v <= hi;
            *v = p.fake_quantize(*v);
            inside
        })
        .collect()
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, out: &mut [f32]) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let patch = c * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * patch..][..patch];
            for ch in 0..c {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ch * h + iy as usize) * w + ix as usize] += row[(ch * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}

struct Step {
    loss: f64,
    correct: usize,
}

/// One forward/backward pass over a batch; returns per-layer weight gradients (indexed like
/// `m.layers`).
fn forward_backward(
    m: &mut Model,
    x: Vec<f32>,
    labels: &[u8],
    qat: bool,
) -> Result<(Step, Vec<Option<Vec<f32>>>), NnError> {
    let batch = labels.len();
    m.input_stats = m.input_stats.observe_slice(&x);
    let mut a = x;
    if qat {
        fake_quantize_site(&mut a, &m.input_params()?);
    }
    let mut shape = m.input_shape.clone();
    let mut caches = Vec::with_capacity(m.layers.len());
    for layer in m.layers.iter_mut() {
        let kind = layer.spec.kind;
        let out_shape = kind.output_shape(&shape)?;
        match kind {
            LayerKind::Flatten => caches.push(Cache::None),
            LayerKind::Relu => {
                let mask: Vec<bool> = a.iter().map(|&v| v > 0.0).collect();
                a.iter_mut().for_each(|v| *v = v.max(0.0));
                caches.push(Cache::Relu(mask));
            }
            LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                let ws = layer.weights.as_mut().expect("weight layer");
                let mut wv = sparsity::apply_mask(ws.master(), ws.mask())?.into_values();
                if qat {
                    let p = weight_params(&crate::quant::RealTensor::from_vec(wv.clone()), ws.bits())?;
                    wv.iter_mut().for_each(|v| *v = p.fake_quantize(*v));
                }
                let mut z = match kind {
                    LayerKind::Linear { in_features, out_features } => {
                        let mut z = vec![0.0; batch * out_features];
                        gemm(
                            &a,
                            Layout::row_major(batch, in_features),
                            &wv,
                            Layout::row_major(out_features, in_features).t(),
                            0.0,
                            &mut z,
                            Layout::row_major(batch, out_features),
                        );
                        z
                    }
                    LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, in_height, in_width } => {
                        let per_in = in_channels * in_height * in_width;
                        let cols: Vec<f32> = a
                            .chunks(per_in)
                            .flat_map(|s| im2col(s, in_channels, in_height, in_width, kernel, stride, padding))
                            .collect();
                        let patch = in_channels * kernel * kernel;
                        let rows = cols.len() / patch;
                        let pixels = rows / batch;
                        // z viewed as [batch, out_channels, pixels]; row (n, px) has stride 1 over
                        // pixels and channel stride `pixels`.
                        let mut z = vec![0.0; batch * out_channels * pixels];
                        for n in 0..batch {
                            gemm(
                                &cols[n * pixels * patch..],
                                Layout::row_major(pixels, patch),
                                &wv,
                                Layout::row_major(out_channels, patch).t(),
                                0.0,
                                &mut z[n * out_channels * pixels..],
                                Layout { rows: pixels, cols: out_channels, rs: 1, cs: pixels },
                            );
                        }
                        a = cols;
                        z
                    }
                    _ => unreachable!(),
                };
                let pass = match ws.out_stats.as_mut() {
                    Some(stats) => {
                        *stats = stats.observe_slice(&z);
                        if qat {
                            Some(fake_quantize_site(&mut z, &stats.params(layer.spec.act_bits)?))
                        } else {
                            None
                        }
                    }
                    None => None,
                };
                caches.push(Cache::Dense { input: std::mem::take(&mut a), weights: wv, pass });
                a = z;
            }
        }
        shape = out_shape;
    }

    // softmax cross-entropy
    let classes = m.num_classes;
    let mut loss = 0.0f64;
    let mut correct = 0;
    let mut g = a;
    for (n, &label) in labels.iter().enumerate() {
        let row = &mut g[n * classes..(n + 1) * classes];
        if argmax(row) == usize::from(label) {
            correct += 1;
        }
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss -= f64::from((row[usize::from(label)] / sum).max(f32::MIN_POSITIVE).ln());
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v / sum - if c == usize::from(label) { 1.0 } else { 0.0 }) / batch as f32;
        }
    }

    let mut grads: Vec<Option<Vec<f32>>> = vec![None; m.layers.len()];
    let first_weight = m.weight_layers().next().map(|(i, _)| i).unwrap_or(0);
    for (i, layer) in m.layers.iter().enumerate().rev() {
        let cache = std::mem::replace(&mut caches[i], Cache::None);
        match (layer.spec.kind, cache) {
            (LayerKind::Relu, Cache::Relu(mask)) => {
                g.iter_mut().zip(&mask).for_each(|(v, &k)| if !k { *v = 0.0 });
            }
            (LayerKind::Linear { in_features, out_features }, Cache::Dense { input, weights, pass }) => {
                if let Some(pass) = pass {
                    g.iter_mut().zip(&pass).for_each(|(v, &k)| if !k { *v = 0.0 });
                }
                let mut dw = vec![0.0; out_features * in_features];
                gemm(
                    &g,
                    Layout::row_major(batch, out_features).t(),
                    &input,
                    Layout::row_major(batch, in_features),
                    0.0,
                    &mut dw,
                    Layout::row_major(out_features, in_features),
                );
                grads[i] = Some(dw);
                if i > first_weight {
                    let mut dx = vec![0.0; batch * in_features];
                    gemm(
                        &g,
                        Layout::row_major(batch, out_features),
                        &weights,
                        Layout::row_major(out_features, in_features),
                        0.0,
                        &mut dx,
                        Layout::row_major(batch, in_features),
                    );
                    g = dx;
                }
            }
            (
                LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, in_height, in_width },
                Cache::Dense { input: cols, weights, pass },
            ) => {
                if let Some(pass) = pass {
                    g.iter_mut().zip(&pass).for_each(|(v, &k)| if !k { *v = 0.0 });
                }
                let patch = in_channels * kernel * kernel;
                let pixels = cols.len() / patch / batch;
                let mut dw = vec![0.0; out_channels * patch];
                for n in 0..batch {
                    // dW += g_n^T cols_n with g_n viewed as [pixels, out_channels]
                    gemm(
                        &g[n * out_channels * pixels..],
                        Layout { rows: out_channels, cols: pixels, rs: pixels, cs: 1 },
                        &cols[n * pixels * patch..],
                        Layout::row_major(pixels, patch),
                        1.0,
                        &mut dw,
                        Layout::row_major(out_channels, patch),
                    );
                }
                grads[i] = Some(dw);
                if i > first_weight {
                    let per_in = in_channels * in_height * in_width;
                    let mut dx = vec![0.0; batch * per_in];
                    let mut dcols = vec![0.0; pixels * patch];
                    for n in 0..batch {
                        gemm(
                            &g[n * out_channels * pixels..],
                            Layout { rows: pixels, cols: out_channels, rs: 1, cs: pixels },
                            &weights,
                            Layout::row_major(out_channels, patch),
                            0.0,
                            &mut dcols,
                            Layout::row_major(pixels, patch),
                        );
                        col2im(
                            &dcols,
                            in_channels,
                            in_height,
                            in_width,
                            kernel,
                            stride,
                            padding,
                            &mut dx[n * per_in..(n + 1) * per_in],
                        );
                    }
                    g = dx;
                }
            }
            (LayerKind::Flatten, _) => {}
            _ => unreachable!("cache matches layer kind"),
        }
        if i <= first_weight {
            break;
        }
    }
    Ok((Step { loss, correct }, grads))
}

/// Trains `m` in place and returns per-epoch statistics.
///
/// Pruning steps run at the end of epochs that are multiples of the schedule interval. Masks of
/// prunable layers only ever lose weights. The same `cfg` and initial model give bit-identical
/// results.
pub fn train(m: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog, NnError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NnError::EmptyData);
    }
    if data.sample_shape != m.input_shape {
        return Err(NnError::Shape(format!("data {:?} vs model {:?}", data.sample_shape, m.input_shape)));
    }
    if cfg.prune.target > 0.0 && cfg.prune.group_size != m.group_size {
        return Err(NnError::InvalidConfig(format!(
            "schedule group size {} differs from the model's {}",
            cfg.prune.group_size, m.group_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Option<Vec<f32>>> =
        m.layers.iter().map(|l| l.weights.as_ref().map(|w| vec![0.0; w.master().len()])).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per = data.sample_len();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        let qat = cfg.is_qat_epoch(epoch);
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * per);
            let mut labels = Vec::with_capacity(chunk.len());
            for &s in chunk {
                x.extend_from_slice(data.sample(s));
                labels.push(data.labels[s]);
            }
            let (step, grads) = forward_backward(m, x, &labels, qat)?;
            loss += step.loss;
            correct += step.correct;
            for ((layer, grad), vel) in m.layers.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                let (Some(ws), Some(grad), Some(vel)) = (layer.weights.as_mut(), grad, vel.as_mut()) else {
                    continue;
                };
                let keep = ws.mask().keep().to_vec();
                let master = ws.master_mut_unsynced().values_mut();
                for (((w, g), v), k) in master.iter_mut().zip(&grad).zip(vel.iter_mut()).zip(&keep) {
                    if *k {
                        *v = cfg.momentum * *v + g;
                        *w -= cfg.learning_rate * *v;
                    }
                }
            }
        }
        if !qat || cfg.schedule == ScheduleKind::QtoP {
            prune_step(m, cfg, epoch, &mut velocity)?;
        }
        for layer in m.layers.iter_mut() {
            if let Some(ws) = layer.weights.as_mut() {
                ws.resync()?;
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            loss: loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            sparsity: m.sparsity(),
            phase: if qat { Phase::Qat } else { Phase::Float },
        });
    }
    Ok(log)
}

fn prune_step(m: &mut Model, cfg: &TrainConfig, epoch: usize, velocity: &mut [Option<Vec<f32>>]) -> Result<(), NnError> {
    if cfg.prune.target <= 0.0 {
        return Ok(());
    }
    for (layer, vel) in m.layers.iter_mut().zip(velocity.iter_mut()) {
        if !layer.spec.prunable {
            continue;
        }
        let Some(ws) = layer.weights.as_mut() else { continue };
        let mask = match cfg.schedule {
            ScheduleKind::PtoQ => cfg.prune.step(epoch, ws.master(), ws.mask())?,
            ScheduleKind::QtoP => {
                let masked = sparsity::apply_mask(ws.master(), ws.mask())?;
                let p = weight_params(&masked, ws.bits())?;
                cfg.prune.step_by(epoch, ws.master(), ws.mask(), |v| p.quantize_value(v).unsigned_abs() as f32)?
            }
        };
        if &mask == ws.mask() {
            continue;
        }
        sparsity::apply_mask_in_place(ws.master_mut_unsynced(), &mask)?;
        if let Some(vel) = vel.as_mut() {
            vel.iter_mut().zip(mask.keep()).for_each(|(v, &k)| if !k { *v = 0.0 });
        }
        ws.set_mask_unsynced(mask);
        ws.resync()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accumulate::AccumConfig;
    use crate::nn::{LayerSpec, Preset};
    use crate::quant::CalibrationStats;
    use rand::Rng;

    /// Two Gaussian-ish blobs per class in 16 dimensions.
    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 3) as u8;
            for d in 0..16 {
                let center = if d % 3 == usize::from(c) { 0.8 } else { 0.2 };
                images.push(center + rng.gen_range(-0.15..0.15));
            }
            labels.push(c);
        }
        Dataset::new(images, labels, vec![16]).unwrap()
    }

    fn toy_model(seed: u64, bits: u32) -> Model {
        let accum = AccumConfig::wide();
        let spec = |kind, prunable| LayerSpec { kind, weight_bits: bits, act_bits: bits, accum, prunable };
        Model::from_specs(
            vec![
                spec(LayerKind::Linear { in_features: 16, out_features: 16 }, true),
                spec(LayerKind::Relu, false),
                spec(LayerKind::Linear { in_features: 16, out_features: 3 }, false),
            ],
            vec![16],
            8,
            seed,
        )
        .unwrap()
    }

    fn cfg(schedule: ScheduleKind, epochs: usize, qat_epochs: usize, target: f64) -> TrainConfig {
        TrainConfig {
            schedule,
            epochs,
            qat_epochs,
            prune: PruneSchedule { target, interval: 1, increment: 0.25, group_size: 8 },
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            seed: 7,
        }
    }

    #[test]
    fn learns_toy_problem_and_infers_in_integers() {
        let data = toy_data(300, 1);
        let mut m = toy_model(2, 8);
        let log = train(&mut m, &data, &cfg(ScheduleKind::PtoQ, 6, 2, 0.0)).unwrap();
        assert!(log.epochs.last().unwrap().loss < log.epochs[0].loss);
        let (acc, _) = crate::nn::evaluate(&m, &data, None).unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn masks_hold_and_master_stays_pruned() {
        let data = toy_data(120, 3);
        for schedule in [ScheduleKind::PtoQ, ScheduleKind::QtoP] {
            let mut m = toy_model(4, 8);
            let c = cfg(schedule, 4, 1, 0.5);
            let log = train(&mut m, &data, &c).unwrap();
            let w = m.layers[0].weights.as_ref().unwrap();
            assert_eq!(w.mask().n(), 4);
            assert_eq!(&sparsity::apply_mask(w.master(), w.mask()).unwrap(), w.master());
            assert!((log.epochs.last().unwrap().sparsity - 0.5).abs() < 1e-12);
            let s: Vec<f64> = log.epochs.iter().map(|e| e.sparsity).collect();
            assert!(s.windows(2).all(|p| p[0] <= p[1]));
            assert!(m.layers[2].weights.as_ref().unwrap().mask().keep().iter().all(|&k| k));
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let data = toy_data(90, 5);
        let run = || {
            let mut m = toy_model(6, 6);
            train(&mut m, &data, &cfg(ScheduleKind::QtoP, 3, 3, 0.25)).unwrap();
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn high_precision_qat_tracks_float_training() {
        let data = toy_data(90, 8);
        // Ranges that follow each batch exactly, so 16-bit fake quantization never clamps and
        // only adds rounding noise.
        let track = |mut m: Model| {
            m.input_stats = CalibrationStats::new(1e-6);
            for l in &mut m.layers {
                if let Some(s) = l.weights.as_mut().and_then(|w| w.out_stats.as_mut()) {
                    *s = CalibrationStats::new(1e-6);
                }
            }
            m
        };
        let mut a = track(toy_model(9, 16));
        let mut b = track(toy_model(9, 16));
        let la = train(&mut a, &data, &cfg(ScheduleKind::PtoQ, 3, 0, 0.0)).unwrap();
        let lb = train(&mut b, &data, &cfg(ScheduleKind::QtoP, 3, 3, 0.0)).unwrap();
        for (x, y) in la.epochs.iter().zip(&lb.epochs) {
            assert!((x.loss - y.loss).abs() < 1e-3 * x.loss.max(1e-3), "{} vs {}", x.loss, y.loss);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = cfg(ScheduleKind::PtoQ, 3, 4, 0.0);
        assert!(c.validate().is_err());
        c.qat_epochs = 2;
        c.prune.target = 0.5; // completes at epoch 2, QAT starts after epoch 1
        assert!(c.validate().is_err());
        c.qat_epochs = 1;
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let accum = AccumConfig::wide();
        let mut m = Model::from_specs(
            vec![
                LayerSpec {
                    kind: LayerKind::Conv2d {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                        in_height: 5,
                        in_width: 5,
                    },
                    weight_bits: 8,
                    act_bits: 8,
                    accum,
                    prunable: false,
                },
                LayerSpec { kind: LayerKind::Relu, weight_bits: 8, act_bits: 8, accum, prunable: false },
                LayerSpec {
                    kind: LayerKind::Conv2d {
                        in_channels: 2,
                        out_channels: 2,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        in_height: 3,
                        in_width: 3,
                    },
                    weight_bits: 8,
                    act_bits: 8,
                    accum,
                    prunable: false,
                },
                LayerSpec { kind: LayerKind::Flatten, weight_bits: 8, act_bits: 8, accum, prunable: false },
                LayerSpec {
                    kind: LayerKind::Linear { in_features: 18, out_features: 3 },
                    weight_bits: 8,
                    act_bits: 8,
                    accum,
                    prunable: false,
                },
            ],
            vec![1, 5, 5],
            4,
            11,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f32> = (0..2 * 25).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = [0u8, 2];
        let (_, grads) = forward_backward(&mut m, x.clone(), &labels, false).unwrap();
        for layer in [0usize, 2, 4] {
            let g = grads[layer].as_ref().unwrap();
            for idx in [0usize, 5, 11] {
                let eps = 1e-2f32;
                let loss_at = |delta: f32| {
                    let mut mm = m.clone();
                    mm.layers[layer].weights.as_mut().unwrap().master_mut_unsynced().values_mut()[idx] += delta;
                    forward_backward(&mut mm, x.clone(), &labels, false).unwrap().0.loss / 2.0
                };
                let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * f64::from(eps));
                assert!(
                    (numeric - f64::from(g[idx])).abs() < 2e-3,
                    "layer {layer} idx {idx}: numeric {numeric} analytic {}",
                    g[idx]
                );
            }
        }
    }

    #[test]
    fn presets_train_one_step() {
        let data = Dataset::new(vec![0.5; 4 * 784], vec![0, 1, 2, 3], vec![1, 28, 28]).unwrap();
        for preset in [Preset::Mlp1, Preset::Mlp2, Preset::SmallConv] {
            let mut m = Model::from_preset(preset, 8, 8, AccumConfig::wide(), 16, 0).unwrap();
            let c = TrainConfig { prune: PruneSchedule::none(16), ..cfg(ScheduleKind::QtoP, 1, 1, 0.0) };
            train(&mut m, &data, &c).unwrap();
            assert!(m.is_calibrated());
        }
    }
}
