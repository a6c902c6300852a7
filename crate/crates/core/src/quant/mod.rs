//! Weight and activation quantizers.

mod act;
mod config;
mod gptq;
mod linalg;
mod model_quant;
mod rtn;
mod smooth;

pub use act::quantize_activations;
pub use config::{Granularity, QuantConfig};
pub use gptq::{estimate_hessian, gptq_quantize, HessianEstimate, GPTQ_BLOCK_SIZE};
pub use model_quant::{quantize_block, quantize_model, smooth_block, BlockInputs, Quantizer};
pub use rtn::{qlinear_forward, rtn_quantize, QuantizedLinear};
pub use smooth::{apply_column_scales, smooth_migrate, smooth_scales, weight_column_absmax};
