//! Entropy bottlenecks, range coding and the progressive container.

pub mod bitstream;
pub mod model;
pub mod range_coder;

pub use bitstream::{
    decode_stream, estimate_bpp, rate_bpp, serialize_progressive, truncate, BitstreamError, DecodedStream,
    Layout, Models, ProgressiveBitstream, QuantizedLatent,
};
pub use model::{quantize_infer, quantize_train, EntropyError, EntropyModel};
