use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Dynamic per-tensor symmetric fake quantization: `scale = max|x| / 127`,
/// round, dequantize.
pub fn quantize_activations<T: Real>(x: &Tensor<T>, act_bits: u8) -> Result<Tensor<T>> {
    if act_bits != 8 {
        return Err(Error::contract("activation quantization supports 8 bits only"));
    }
    let m = x.max_abs();
    if m == T::zero() {
        return Ok(x.clone());
    }
    let qmax = T::from_f64(127.0);
    // Settle the scale on a value that reproduces itself from the quantized
    // maximum (at most an ulp away from max|x| / 127), which makes the
    // operation exactly idempotent.
    let mut scale = m / qmax;
    for _ in 0..4 {
        let next = (qmax * scale) / qmax;
        if next == scale {
            break;
        }
        scale = next;
    }
    Ok(x.map(|v| (v / scale).round().max(-qmax).min(qmax) * scale))
}
