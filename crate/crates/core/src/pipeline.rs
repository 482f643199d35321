//! Compression and decompression of whole clouds with a trained codec.

use thiserror::Error;

use crate::cloud::PointCloud;
use crate::codec::{Codec, CodecError, LatentCode};
use crate::entropy::bitstream::{retained_for_alpha, BitstreamError};
use crate::entropy::{
    decode_stream, quantize_infer, serialize_progressive, Layout, ProgressiveBitstream,
    QuantizedLatent,
};
use crate::taildrop::{apply_mask, channel_importance, ChannelImportance, DropMask};

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub bitstream: ProgressiveBitstream,
    pub latent: LatentCode,
    pub quantized: QuantizedLatent,
    pub density: Vec<u32>,
    pub importance_z: ChannelImportance,
    pub importance_xyz: ChannelImportance,
}

/// Encodes, rounds and serializes a cloud (already in the unit cube).
/// Importance is measured on the rounded latents, which the decoder also
/// sees, so masks rebuilt in memory agree with the transmitted order.
pub fn compress(
    codec: &Codec,
    pc: &PointCloud,
    layout: Layout,
    beta: f64,
) -> Result<Compressed, PipelineError> {
    let latent = codec.encode(pc)?;
    let z_hat = quantize_infer(&latent.z);
    let x_hat = quantize_infer(&latent.z_xyz);
    let quantized = QuantizedLatent::from_tensors(&z_hat, &x_hat)?;
    let importance_z = channel_importance(&z_hat, beta);
    let importance_xyz = channel_importance(&x_hat, beta);
    let density: Vec<u32> = latent.d.iter().map(|&v| v as u32).collect();
    let n = u32::try_from(pc.len()).map_err(|_| PipelineError::Argument("N exceeds u32".into()))?;
    let bitstream = serialize_progressive(
        &quantized,
        &density,
        n,
        &importance_z,
        &importance_xyz,
        &codec.models(),
        layout,
    )?;
    Ok(Compressed {
        bitstream,
        latent,
        quantized,
        density,
        importance_z,
        importance_xyz,
    })
}

/// Decodes whatever layer prefix the stream holds.
pub fn decompress(codec: &Codec, bs: &ProgressiveBitstream) -> Result<PointCloud, PipelineError> {
    let s = decode_stream(bs, &codec.models())?;
    let d: Vec<f64> = s.density.iter().map(|&v| v as f64).collect();
    Ok(codec.decode(&s.quantized.z_tensor(), &s.quantized.z_xyz_tensor(), &d)?)
}

/// In-memory equivalent of truncating the stream at `alpha` and decoding.
pub fn masked_decode(
    codec: &Codec,
    compressed: &Compressed,
    alpha: f64,
    layout: Layout,
) -> Result<PointCloud, PipelineError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(PipelineError::Argument(format!("alpha {alpha} not in (0, 1]")));
    }
    let q = &compressed.quantized;
    let (kz, kx) = retained_for_alpha(alpha, q.c, q.c_xyz, layout);
    let mz = DropMask::from_ranking(&compressed.importance_z.ranking(), kz, 1.0 - alpha);
    let mx = DropMask::from_ranking(&compressed.importance_xyz.ranking(), kx, 1.0 - alpha);
    let z = apply_mask(&q.z_tensor(), &mz);
    let x = apply_mask(&q.z_xyz_tensor(), &mx);
    let d: Vec<f64> = compressed.density.iter().map(|&v| v as f64).collect();
    Ok(codec.decode(&z, &x, &d)?)
}
