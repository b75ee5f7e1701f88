//! Per-tensor asymmetric int8 quantization of stored weights.
//!
//! `x̂ = s·(q − z)` with `s = (max − min)/255`. Inference dequantizes on load;
//! activations stay in floating point.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelSpec};
use crate::{Error, Result, Tensor};

/// Header bytes charged per tensor: scale (4), zero point (1), constant value (4).
pub const METADATA_BYTES_PER_TENSOR: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub q: Vec<i8>,
    pub scale: f32,
    pub zero_point: i8,
    /// Set when every source value was equal; dequantizes to exactly this.
    pub constant: Option<f32>,
}

impl QuantTensor {
    pub fn numel(&self) -> usize {
        self.q.len()
    }

    pub fn dequantize(&self) -> Tensor {
        let data = match self.constant {
            Some(c) => alloc::vec![c; self.q.len()],
            None => {
                let (s, z) = (self.scale as f64, self.zero_point as f64);
                self.q.iter().map(|&q| (s * (q as f64 - z)) as f32).collect()
            }
        };
        Tensor::new(self.shape.clone(), data).expect("shape validated at quantization")
    }
}

fn clamp_i8(v: f64) -> i8 {
    v.clamp(-128.0, 127.0) as i8
}

pub fn quantize_tensor(x: &Tensor) -> Result<QuantTensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("cannot quantize a tensor containing NaN or Inf".into()));
    }
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo == hi {
        let z = 0i8;
        return Ok(QuantTensor {
            shape: x.shape().to_vec(),
            q: alloc::vec![z; x.numel()],
            scale: 1.0,
            zero_point: z,
            constant: Some(lo),
        });
    }
    // The grid s·(q − z) with int8 z always contains 0, so the range is
    // widened to include it; one-signed tensors would otherwise overflow.
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let s = (hi as f64 - lo as f64) / 255.0;
    let z = clamp_i8(libm::rint(-128.0 - lo as f64 / s));
    let zf = z as f64;
    let q = x.data().iter().map(|&v| clamp_i8(libm::rint(v as f64 / s + zf))).collect();
    Ok(QuantTensor {
        shape: x.shape().to_vec(),
        q,
        scale: s as f32,
        zero_point: z,
        constant: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub tensors: usize,
    pub parameters: usize,
    pub fp32_payload_bytes: usize,
    pub int8_payload_bytes: usize,
    pub metadata_bytes: usize,
    /// int8 payload plus per-tensor metadata.
    pub footprint_bytes: usize,
    pub payload_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    spec: ModelSpec,
    tensors: Vec<(String, QuantTensor)>,
}

impl QuantizedModel {
    pub fn new(spec: ModelSpec, tensors: Vec<(String, QuantTensor)>) -> Result<Self> {
        for (name, t) in &tensors {
            let n: usize = t.shape.iter().product();
            if n != t.q.len() || t.shape.is_empty() {
                return Err(Error::ArchitectureMismatch {
                    name: name.clone(),
                    detail: format!("shape {:?} does not hold {} values", t.shape, t.q.len()),
                });
            }
            if !(t.scale > 0.0 && t.scale.is_finite()) {
                return Err(Error::ArchitectureMismatch {
                    name: name.clone(),
                    detail: format!("scale {} is not positive", t.scale),
                });
            }
        }
        Ok(Self { spec, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[(String, QuantTensor)] {
        &self.tensors
    }

    pub fn dequantize(&self) -> Result<Model> {
        let named = self.tensors.iter().map(|(n, t)| (n.clone(), t.dequantize())).collect();
        Model::from_params(self.spec.clone(), named)
    }

    pub fn footprint(&self) -> Footprint {
        let parameters: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let metadata = self.tensors.len() * METADATA_BYTES_PER_TENSOR;
        let (fp32, int8) = (4 * parameters, parameters);
        Footprint {
            tensors: self.tensors.len(),
            parameters,
            fp32_payload_bytes: fp32,
            int8_payload_bytes: int8,
            metadata_bytes: metadata,
            footprint_bytes: int8 + metadata,
            payload_ratio: if parameters == 0 { 0.0 } else { int8 as f64 / fp32 as f64 },
        }
    }
}

pub fn quantize_model(model: &Model) -> Result<QuantizedModel> {
    let tensors = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| quantize_tensor(&t).map(|q| (n, q)))
        .collect::<Result<Vec<_>>>()?;
    QuantizedModel::new(model.spec().clone(), tensors)
}

/// Class probabilities from the dequantized weights.
pub fn dequantized_forward(qmodel: &QuantizedModel, images: &Tensor) -> Result<Tensor> {
    qmodel.dequantize()?.predict(images)
}
