//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PQSM" | version: u32 | record count: u32 | metadata length: u64
//! records: name length: u16, name (UTF-8), role: u8, dtype: u8, ndims: u8, dims: u64 * ndims,
//!          offset: u64 (absolute), length: u64
//! metadata: UTF-8 JSON
//! payload: tensor data in record order
//! ```
//!
//! Masks are packed one bit per weight, least significant bit first, in row-major order.
//! Quantized weight codes are stored for auditing and must match the codes re-derived from the
//! master weights and mask on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Layer, LayerSpec, Model, NnError, WeightState};
use crate::profile::write_atomic;
use crate::quant::{CalibrationStats, RealTensor};
use crate::sparsity::NMSparsePattern;

pub const MAGIC: &[u8; 4] = b"PQSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a model file (bad magic)")]
    Magic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("container truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight = 0,
    Mask = 1,
    QuantParams = 2,
    Calib = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    I32 = 1,
    Bitmask = 2,
}

impl Role {
    fn from_u8(v: u8) -> Option<Self> {
        [Role::Weight, Role::Mask, Role::QuantParams, Role::Calib].into_iter().find(|r| *r as u8 == v)
    }
}

impl Dtype {
    fn from_u8(v: u8) -> Option<Self> {
        [Dtype::F32, Dtype::I32, Dtype::Bitmask].into_iter().find(|d| *d as u8 == v)
    }

    fn byte_len(self, numel: usize) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4 * numel,
            Dtype::Bitmask => numel.div_ceil(8),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub role: Role,
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerMeta {
    spec: LayerSpec,
    /// Pruned count per group of the layer's mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    calib_count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    input_shape: Vec<usize>,
    group_size: usize,
    input_calib_count: u64,
    layers: Vec<LayerMeta>,
    /// Free-form description of how the model was produced (config, schedule, seeds).
    provenance: serde_json::Value,
}

enum Payload {
    F32(Vec<f32>),
    I32(Vec<i32>),
    Bits(Vec<bool>),
}

impl Payload {
    fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::I32(_) => Dtype::I32,
            Payload::Bits(_) => Dtype::Bitmask,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bits(v) => out.extend(pack_bits(v)),
        }
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |b, (i, &k)| b | (u8::from(k) << i)))
        .collect()
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn calib_values(s: &CalibrationStats) -> Vec<f32> {
    vec![s.min, s.max, s.decay]
}

/// Serializes a model; identical models and provenance give identical bytes.
pub fn encode(m: &Model, provenance: &serde_json::Value) -> Result<Vec<u8>, ContainerError> {
    let mut tensors: Vec<(String, Role, Vec<usize>, Payload)> = vec![(
        "input.calib".into(),
        Role::Calib,
        vec![3],
        Payload::F32(calib_values(&m.input_stats)),
    )];
    let mut layers = Vec::with_capacity(m.layers.len());
    for (i, layer) in m.layers.iter().enumerate() {
        let mut meta = LayerMeta { spec: layer.spec, mask_n: None, weight_scale: None, calib_count: None };
        if let Some(w) = &layer.weights {
            let shape = w.master().shape().to_vec();
            tensors.push((format!("layer{i}.weight"), Role::Weight, shape.clone(), Payload::F32(w.master().values().to_vec())));
            tensors.push((format!("layer{i}.mask"), Role::Mask, shape.clone(), Payload::Bits(w.mask().keep().to_vec())));
            tensors.push((format!("layer{i}.codes"), Role::QuantParams, shape, Payload::I32(w.quantized().values().to_vec())));
            if let Some(s) = &w.out_stats {
                tensors.push((format!("layer{i}.calib"), Role::Calib, vec![3], Payload::F32(calib_values(s))));
                meta.calib_count = Some(s.count);
            }
            meta.mask_n = Some(w.mask().n());
            meta.weight_scale = Some(w.quantized().params().scale());
        }
        layers.push(meta);
    }
    let meta = Metadata {
        input_shape: m.input_shape.clone(),
        group_size: m.group_size,
        input_calib_count: m.input_stats.count,
        layers,
        provenance: provenance.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let header_len = 4 + 4 + 4 + 8;
    let records_len: usize = tensors.iter().map(|(name, _, dims, _)| 2 + name.len() + 3 + 8 * dims.len() + 16).sum();
    let mut offset = (header_len + records_len + meta_bytes.len()) as u64;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    for (name, role, dims, payload) in &tensors {
        let len = payload.dtype().byte_len(dims.iter().product()) as u64;
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&[*role as u8, payload.dtype() as u8, dims.len() as u8]);
        dims.iter().for_each(|&d| out.extend_from_slice(&(d as u64).to_le_bytes()));
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        offset += len;
    }
    out.extend_from_slice(&meta_bytes);
    for (_, _, _, payload) in &tensors {
        payload.write(&mut out);
    }
    assert_eq!(out.len() as u64, offset);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ContainerError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// A parsed container before model reconstruction.
pub struct Container<'a> {
    pub records: Vec<TensorRecord>,
    metadata: Metadata,
    bytes: &'a [u8],
}

fn bad(msg: impl Into<String>) -> ContainerError {
    ContainerError::Malformed(msg.into())
}

/// Parses and validates the header, manifest and metadata.
pub fn parse(bytes: &[u8]) -> Result<Container<'_>, ContainerError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| ContainerError::Magic)? != MAGIC {
        return Err(ContainerError::Magic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let count = c.u32()? as usize;
    let meta_len = usize::try_from(c.u64()?).map_err(|_| bad("metadata length"))?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let role = Role::from_u8(c.u8()?).ok_or_else(|| bad(format!("{name}: unknown role")))?;
        let dtype = Dtype::from_u8(c.u8()?).ok_or_else(|| bad(format!("{name}: unknown dtype")))?;
        let ndims = c.u8()? as usize;
        let dims = (0..ndims).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
        let offset = c.u64()?;
        let length = c.u64()?;
        records.push(TensorRecord { name, role, dtype, dims, offset, length });
    }
    let metadata: Metadata = serde_json::from_slice(c.take(meta_len)?)?;
    let payload_start = c.pos as u64;

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(records.len());
    for r in &records {
        let numel = r
            .dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| bad(format!("{}: dimensions overflow", r.name)))?;
        if r.length != r.dtype.byte_len(numel) as u64 {
            return Err(bad(format!("{}: length {} does not match shape", r.name, r.length)));
        }
        let end = r.offset.checked_add(r.length).ok_or_else(|| bad("offset overflow"))?;
        if r.offset < payload_start || end > bytes.len() as u64 {
            return Err(bad(format!("{}: bytes {}..{end} outside the payload", r.name, r.offset)));
        }
        spans.push((r.offset, end, &r.name));
    }
    spans.sort();
    if let Some(w) = spans.windows(2).find(|w| w[0].1 > w[1].0) {
        return Err(bad(format!("{} overlaps {}", w[0].2, w[1].2)));
    }
    Ok(Container { records, metadata, bytes })
}

impl Container<'_> {
    fn record(&self, name: &str) -> Result<&TensorRecord, ContainerError> {
        self.records.iter().find(|r| r.name == name).ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    fn data(&self, r: &TensorRecord) -> &[u8] {
        &self.bytes[r.offset as usize..(r.offset + r.length) as usize]
    }

    fn tensor(&self, name: &str, role: Role, dtype: Dtype) -> Result<(Vec<usize>, &[u8]), ContainerError> {
        let r = self.record(name)?;
        if r.role != role || r.dtype != dtype {
            return Err(bad(format!("{name}: unexpected role or dtype")));
        }
        Ok((r.dims.iter().map(|&d| d as usize).collect(), self.data(r)))
    }

    fn f32s(&self, name: &str, role: Role) -> Result<(Vec<usize>, Vec<f32>), ContainerError> {
        let (dims, d) = self.tensor(name, role, Dtype::F32)?;
        Ok((dims, d.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()))
    }

    fn calib(&self, name: &str, count: u64) -> Result<CalibrationStats, ContainerError> {
        let (dims, v) = self.f32s(name, Role::Calib)?;
        if dims != [3] || !(v[2] > 0.0 && v[2] <= 1.0) {
            return Err(bad(format!("{name}: malformed calibration")));
        }
        Ok(CalibrationStats { min: v[0], max: v[1], decay: v[2], count })
    }

    pub fn provenance(&self) -> &serde_json::Value {
        &self.metadata.provenance
    }

    /// Rebuilds the model, checking every weight has a congruent mask and matching codes.
    pub fn model(&self) -> Result<Model, ContainerError> {
        let meta = &self.metadata;
        let mut layers = Vec::with_capacity(meta.layers.len());
        for (i, lm) in meta.layers.iter().enumerate() {
            let weights = match lm.spec.kind.weight_shape() {
                None => None,
                Some(shape) => {
                    let (wdims, wv) = self.f32s(&format!("layer{i}.weight"), Role::Weight)?;
                    let (mdims, mbytes) = self.tensor(&format!("layer{i}.mask"), Role::Mask, Dtype::Bitmask)?;
                    if wdims != shape || mdims != shape {
                        return Err(bad(format!("layer {i}: weight {wdims:?} / mask {mdims:?} vs {shape:?}")));
                    }
                    let keep = unpack_bits(mbytes, wv.len());
                    let n = lm.mask_n.ok_or_else(|| bad(format!("layer {i}: missing mask ratio")))?;
                    let mask = NMSparsePattern::from_mask(n, meta.group_size, shape.clone(), keep).map_err(NnError::from)?;
                    let out_stats = match lm.calib_count {
                        Some(count) => Some(self.calib(&format!("layer{i}.calib"), count)?),
                        None => None,
                    };
                    let master = RealTensor::new(shape, wv).map_err(NnError::from)?;
                    let ws = WeightState::new(master, mask, lm.spec.weight_bits, out_stats)?;
                    let (_, codes) = self.tensor(&format!("layer{i}.codes"), Role::QuantParams, Dtype::I32)?;
                    let stored = codes.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().expect("4 bytes")));
                    if !stored.eq(ws.quantized().values().iter().copied())
                        || lm.weight_scale != Some(ws.quantized().params().scale())
                    {
                        return Err(bad(format!("layer {i}: stored codes disagree with the master weights")));
                    }
                    Some(ws)
                }
            };
            layers.push(Layer { spec: lm.spec, weights });
        }
        let input_stats = self.calib("input.calib", meta.input_calib_count)?;
        let model = Model {
            layers,
            input_shape: meta.input_shape.clone(),
            input_stats,
            num_classes: 0,
            group_size: meta.group_size,
        };
        Ok(model.finish()?)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Model, serde_json::Value), ContainerError> {
    let c = parse(bytes)?;
    Ok((c.model()?, c.provenance().clone()))
}

pub fn save(path: &Path, m: &Model, provenance: &serde_json::Value) -> Result<(), ContainerError> {
    Ok(write_atomic(path, &encode(m, provenance)?)?)
}

pub fn load(path: &Path) -> Result<(Model, serde_json::Value), ContainerError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accumulate::{AccumConfig, Policy};
    use crate::nn::Preset;
    use crate::sparsity;

    fn sample_model() -> Model {
        let mut m = Model::from_preset(Preset::SmallConv, 6, 7, AccumConfig::new(18, Policy::Sorted).unwrap(), 16, 4).unwrap();
        m.input_stats = m.input_stats.observe_slice(&[0.0, 1.0]);
        for l in &mut m.layers {
            let prunable = l.spec.prunable;
            if let Some(w) = l.weights.as_mut() {
                if let Some(s) = w.out_stats.as_mut() {
                    *s = s.observe_slice(&[-0.3, 2.5]);
                }
                if prunable {
                    let mask = sparsity::nm_prune(w.master(), 6, 16).unwrap();
                    let master = sparsity::apply_mask(w.master(), &mask).unwrap();
                    w.update(master, mask).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample_model();
        let prov = serde_json::json!({"schedule": "PtoQ", "seed": 4});
        let bytes = encode(&m, &prov).unwrap();
        assert_eq!(&bytes[..4], b"PQSM");
        let (back, p) = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(p, prov);
        assert_eq!(encode(&back, &p).unwrap(), bytes);
    }

    #[test]
    fn every_weight_has_a_mask() {
        let m = sample_model();
        let bytes = encode(&m, &serde_json::Value::Null).unwrap();
        let c = parse(&bytes).unwrap();
        for r in c.records.iter().filter(|r| r.role == Role::Weight) {
            let mask_name = r.name.replace(".weight", ".mask");
            let mask = c.records.iter().find(|x| x.name == mask_name).unwrap();
            assert_eq!(mask.dims, r.dims);
            assert_eq!(mask.dtype, Dtype::Bitmask);
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = sample_model();
        let bytes = encode(&m, &serde_json::Value::Null).unwrap();
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(ContainerError::Version(2))));
        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(matches!(decode(&v), Err(ContainerError::Magic)));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        // flip a stored code: the codes no longer match the master weights
        let c = parse(&bytes).unwrap();
        let codes = c.records.iter().find(|r| r.name.ends_with(".codes")).unwrap().offset as usize;
        let mut v = bytes.clone();
        v[codes] ^= 1;
        assert!(matches!(decode(&v), Err(ContainerError::Malformed(_))));
    }

    #[test]
    fn bit_packing() {
        let bits = [true, false, false, true, true, true, false, false, true];
        let packed = pack_bits(&bits);
        assert_eq!(packed, vec![0b0011_1001, 0b1]);
        assert_eq!(unpack_bits(&packed, bits.len()), bits);
    }
}
