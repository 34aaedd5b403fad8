//! Symmetric absmax quantization of weight tensors.
//!
//! A tensor is mapped onto the signed integer grid `[-(2^(b-1)-1), 2^(b-1)-1]`
//! by scaling with its absolute maximum: `q_i = round(qmax * v_i / absmax)`,
//! with rounding half away from zero. Dequantization multiplies by the stored
//! step `absmax / qmax`. "Fake" quantization (quantize then dequantize, keep
//! computing in floating point) is what the model sees at the two load points
//! where precision can be adjusted: before finetuning and before inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;

/// Dense real-valued tensor, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} implies {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "tensor contains non-finite value {bad}"
            )));
        }
        Ok(Self { shape, values })
    }

    /// 1-d tensor from a flat vector.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn absmax(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Absmax-quantized tensor.
///
/// `step` is the dequantization multiplier `absmax / (2^(bits-1) - 1)`, i.e.
/// the inverse of the scaling factor applied during quantization. A zero step
/// means the source tensor was all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub qvalues: Vec<i8>,
    pub bits: u8,
    pub step: f64,
}

/// Largest representable magnitude on the symmetric grid: 127 for 8-bit, 7 for 4-bit.
pub fn symmetric_qmax(bits: u8) -> Result<i8> {
    match bits {
        4 => Ok(7),
        8 => Ok(127),
        other => Err(Error::UnsupportedBits(other)),
    }
}

/// Quantizes a tensor onto the symmetric absmax grid.
///
/// Rounding is half away from zero, so e.g. `round(-3.5) = -4`. An all-zero
/// tensor maps to all-zero qvalues with step 0.
pub fn quantize_absmax(t: &Tensor, bits: u8) -> Result<QuantizedTensor> {
    let qmax = symmetric_qmax(bits)? as f64;
    let absmax = t.absmax();
    if absmax == 0.0 {
        return Ok(QuantizedTensor {
            shape: t.shape.clone(),
            qvalues: vec![0; t.values.len()],
            bits,
            step: 0.0,
        });
    }
    let qvalues = t
        .values
        .iter()
        .map(|&v| (qmax * v / absmax).round() as i8)
        .collect();
    Ok(QuantizedTensor {
        shape: t.shape.clone(),
        qvalues,
        bits,
        step: absmax / qmax,
    })
}

/// Maps a quantized tensor back to real values: `v_i = q_i * step`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let values = q.qvalues.iter().map(|&qv| qv as f64 * q.step).collect();
    Tensor {
        shape: q.shape.clone(),
        values,
    }
}

/// Quantize-dequantize roundtrip on a raw f32 slice, in place.
///
/// The arithmetic runs in f64 and the result is rounded back to f32, which
/// keeps the roundtrip idempotent: a second application reproduces the same
/// bits. Used to inject quantization error into checkpoint weights while the
/// forward pass keeps computing in floating point.
pub fn fake_quantize_f32(values: &mut [f32], bits: u8) -> Result<()> {
    let qmax = symmetric_qmax(bits)? as f64;
    let absmax = values.iter().fold(0.0f64, |a, &v| a.max((v as f64).abs()));
    if absmax == 0.0 {
        return Ok(());
    }
    let step = absmax / qmax;
    for v in values.iter_mut() {
        *v = ((qmax * (*v as f64) / absmax).round() * step) as f32;
    }
    Ok(())
}

/// Selects which checkpoint weight matrices a fake-quantization pass touches.
///
/// Only 2-d matrices are ever candidates; norm gain vectors stay in full
/// precision. By default everything is included: attention and MLP weights,
/// token and position embeddings, the output projection, and low-rank adapter
/// factors when present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSelector {
    pub embeddings: bool,
    pub output_projection: bool,
    pub adapters: bool,
}

impl Default for WeightSelector {
    fn default() -> Self {
        Self {
            embeddings: true,
            output_projection: true,
            adapters: true,
        }
    }
}

impl WeightSelector {
    pub fn selects(&self, name: &str, shape: &[usize]) -> bool {
        if shape.len() != 2 {
            return false;
        }
        if name.starts_with("embed.") {
            return self.embeddings;
        }
        if name.starts_with("output.") {
            return self.output_projection;
        }
        if name.starts_with("adapter.") {
            return self.adapters;
        }
        true
    }
}

/// Applies quantize-dequantize to the selected weight matrices of a checkpoint.
///
/// Returns a new checkpoint; the input is untouched. Provenance is left for
/// the caller to tag, since the same pass serves both adjustment points.
pub fn fake_quantize_model(
    m: &ModelCheckpoint,
    bits: u8,
    targets: &WeightSelector,
) -> Result<ModelCheckpoint> {
    symmetric_qmax(bits)?;
    let mut out = m.clone();
    for param in out.params_mut() {
        if targets.selects(&param.name, &param.shape) {
            fake_quantize_f32(&mut param.values, bits)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(values: &[f64]) -> Tensor {
        Tensor::from_vec(values.to_vec()).unwrap()
    }

    #[test]
    fn quantize_8bit_reference_values() {
        let q = quantize_absmax(&t(&[1.0, -0.5, 0.25]), 8).unwrap();
        assert_eq!(q.qvalues, vec![127, -64, 32]);
        assert_eq!(q.bits, 8);
        assert!((q.step - 1.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn quantize_4bit_rounds_half_away_from_zero() {
        // round(7 * -1.0 / 2.0) = round(-3.5) = -4
        let q = quantize_absmax(&t(&[2.0, -1.0]), 4).unwrap();
        assert_eq!(q.qvalues, vec![7, -4]);
    }

    #[test]
    fn all_zero_tensor_quantizes_to_zero_scale() {
        let q = quantize_absmax(&t(&[0.0, 0.0, 0.0]), 4).unwrap();
        assert_eq!(q.qvalues, vec![0, 0, 0]);
        assert_eq!(q.step, 0.0);
        let back = dequantize(&q);
        assert_eq!(back.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dequantize_reference_values() {
        let q = quantize_absmax(&t(&[1.0, -0.5, 0.25]), 8).unwrap();
        let back = dequantize(&q);
        let expect = [1.0, -0.50394, 0.25197];
        for (got, want) in back.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }

        let q4 = quantize_absmax(&t(&[2.0, -1.0]), 4).unwrap();
        let back4 = dequantize(&q4);
        assert!((back4.values()[0] - 2.0).abs() < 1e-6);
        assert!((back4.values()[1] + 1.142857).abs() < 1e-6);
    }

    #[test]
    fn unsupported_bits_rejected() {
        assert!(matches!(
            quantize_absmax(&t(&[1.0]), 5),
            Err(Error::UnsupportedBits(5))
        ));
        assert!(matches!(
            quantize_absmax(&t(&[1.0]), 16),
            Err(Error::UnsupportedBits(16))
        ));
    }

    #[test]
    fn non_finite_input_rejected_at_construction() {
        assert!(Tensor::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn shape_preserved_through_roundtrip() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let q = quantize_absmax(&t, 8).unwrap();
        assert_eq!(q.shape, vec![2, 3]);
        assert_eq!(dequantize(&q).shape(), &[2, 3]);
    }

    #[test]
    fn fake_quantize_f32_is_idempotent_bitwise() {
        let mut v: Vec<f32> = vec![0.73, -1.21, 0.002, 3.5, -0.4999, 1.0e-3];
        fake_quantize_f32(&mut v, 8).unwrap();
        let first = v.clone();
        fake_quantize_f32(&mut v, 8).unwrap();
        assert_eq!(v, first);

        fake_quantize_f32(&mut v, 4).unwrap();
        let first4 = v.clone();
        fake_quantize_f32(&mut v, 4).unwrap();
        assert_eq!(v, first4);
    }

    fn finite_vals() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, 1..64)
    }

    proptest! {
        #[test]
        fn qvalues_stay_in_symmetric_range(vals in finite_vals(), bits in prop_oneof![Just(4u8), Just(8u8)]) {
            let q = quantize_absmax(&t(&vals), bits).unwrap();
            let qmax = symmetric_qmax(bits).unwrap();
            prop_assert!(q.qvalues.iter().all(|&v| v >= -qmax && v <= qmax));
        }

        #[test]
        fn roundtrip_error_within_half_step(vals in finite_vals(), bits in prop_oneof![Just(4u8), Just(8u8)]) {
            let tensor = t(&vals);
            let absmax = tensor.absmax();
            prop_assume!(absmax > 0.0);
            let qmax = symmetric_qmax(bits).unwrap() as f64;
            let back = dequantize(&quantize_absmax(&tensor, bits).unwrap());
            let bound = absmax / (2.0 * qmax) + 1e-9;
            for (orig, rt) in tensor.values().iter().zip(back.values()) {
                prop_assert!((orig - rt).abs() <= bound);
            }
        }

        #[test]
        fn requantization_is_a_fixed_point(vals in finite_vals(), bits in prop_oneof![Just(4u8), Just(8u8)]) {
            let q1 = quantize_absmax(&t(&vals), bits).unwrap();
            let q2 = quantize_absmax(&dequantize(&q1), bits).unwrap();
            prop_assert_eq!(q1.qvalues, q2.qvalues);
        }

        #[test]
        fn dyadic_scaling_preserves_qvalues(vals in finite_vals(), exp in -8i32..8) {
            // Power-of-two scaling is exact in binary floating point, so the
            // value/absmax ratios are bit-identical and rounding cannot flip.
            let lambda = 2.0f64.powi(exp);
            let scaled: Vec<f64> = vals.iter().map(|v| v * lambda).collect();
            let qa = quantize_absmax(&t(&vals), 8).unwrap();
            let qb = quantize_absmax(&t(&scaled), 8).unwrap();
            prop_assert_eq!(qa.qvalues, qb.qvalues);
        }

        #[test]
        fn zeros_map_to_zero(vals in finite_vals(), bits in prop_oneof![Just(4u8), Just(8u8)]) {
            let mut vals = vals;
            vals[0] = 0.0;
            let q = quantize_absmax(&t(&vals), bits).unwrap();
            prop_assert_eq!(q.qvalues[0], 0);
        }
    }
}
