//! Progressive container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PDAT"
//! 4       1     version (1)
//! 5       1     flags (bit 0: feature-only layout)
//! 6       1     C
//! 7       1     C_xyz
//! 8       4     N
//! 12      4     M
//! 16      4     density payload length in bytes
//! 20      C     z permutation (channel index by importance rank)
//! ..      C_xyz xyz permutation
//! ..      4 L   layer byte lengths, body order          (L = C + C_xyz)
//! ..      4 L   layer symbol bounds (i16 lo, i16 hi), body order
//! body          density payload, then the layers
//! ```
//!
//! All integers are little-endian. Every layer is one channel's `M` symbols,
//! range coded with a table derived from the entropy model restricted to the
//! layer's bounds. The layer order makes any retained set `{k_z, k_xyz}`
//! reachable by a single byte cut.

use thiserror::Error;

use super::model::{EntropyError, EntropyModel, LIKELIHOOD_FLOOR};
use super::range_coder::{self, FreqTable, RangeCoderError};
use crate::nn::{ParamStore, Tensor};
use crate::taildrop::{retained_count, ChannelImportance, DropMask};

pub const MAGIC: &[u8; 4] = b"PDAT";
pub const VERSION: u8 = 1;
pub const FIXED_HEADER: usize = 20;
pub const MAX_ALPHABET: usize = 8192;
const FLAG_FEATURE_ONLY: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum BitstreamError {
    #[error("not a progressive stream (bad magic)")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    Version(u8),
    #[error("stream/model mismatch: {0}")]
    Mismatch(String),
    #[error("stream truncated inside {0}")]
    Truncated(&'static str),
    #[error("malformed stream: {0}")]
    Malformed(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("layer {layer}: {source}")]
    Coder {
        layer: usize,
        source: RangeCoderError,
    },
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

/// Integer latents, row-major `M x C` and `M x C_xyz`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub m: usize,
    pub c: usize,
    pub c_xyz: usize,
    pub z: Vec<i32>,
    pub z_xyz: Vec<i32>,
}

impl QuantizedLatent {
    /// Takes already-rounded tensors.
    pub fn from_tensors(z: &Tensor, z_xyz: &Tensor) -> Result<Self, BitstreamError> {
        if z.rows() != z_xyz.rows() {
            return Err(BitstreamError::Argument(format!(
                "latent row counts differ: {} vs {}",
                z.rows(),
                z_xyz.rows()
            )));
        }
        let to_int = |t: &Tensor| -> Result<Vec<i32>, BitstreamError> {
            t.data
                .iter()
                .map(|&v| {
                    if v.fract() != 0.0 || v.abs() > i16::MAX as f64 {
                        Err(BitstreamError::Argument(format!(
                            "latent value {v} is not a representable symbol"
                        )))
                    } else {
                        Ok(v as i32)
                    }
                })
                .collect()
        };
        Ok(Self {
            m: z.rows(),
            c: z.cols(),
            c_xyz: z_xyz.cols(),
            z: to_int(z)?,
            z_xyz: to_int(z_xyz)?,
        })
    }

    pub fn z_tensor(&self) -> Tensor {
        Tensor::new(self.m, self.c, self.z.iter().map(|&v| v as f64).collect())
    }

    pub fn z_xyz_tensor(&self) -> Tensor {
        Tensor::new(
            self.m,
            self.c_xyz,
            self.z_xyz.iter().map(|&v| v as f64).collect(),
        )
    }

    fn column(&self, space: Space, ch: usize) -> Vec<i32> {
        let (data, width) = match space {
            Space::Z => (&self.z, self.c),
            Space::Xyz => (&self.z_xyz, self.c_xyz),
        };
        (0..self.m).map(|i| data[i * width + ch]).collect()
    }

    /// Symbol bounds of one channel.
    pub fn bounds(&self, space: Space, ch: usize) -> (i32, i32) {
        let col = self.column(space, ch);
        let lo = col.iter().copied().min().unwrap_or(0);
        let hi = col.iter().copied().max().unwrap_or(0);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Z,
    Xyz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerId {
    pub space: Space,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Feature and coordinate layers interleaved by drop threshold.
    Combined,
    /// All coordinate layers first; truncation only removes feature layers.
    FeatureOnly,
}

/// Body order of the layers. In the combined layout a z layer of rank `r`
/// is needed once `alpha > r / C` and an xyz layer once `alpha > r / C_xyz`;
/// sorting by that threshold (xyz first on ties) makes each retained set a
/// prefix. With `C == C_xyz` this is plain alternation.
pub fn layer_order(c: usize, c_xyz: usize, layout: Layout) -> Vec<LayerId> {
    let mut layers: Vec<LayerId> = (0..c_xyz)
        .map(|rank| LayerId {
            space: Space::Xyz,
            rank,
        })
        .chain((0..c).map(|rank| LayerId {
            space: Space::Z,
            rank,
        }))
        .collect();
    if layout == Layout::Combined {
        // Compare r1 / n1 with r2 / n2 exactly via cross-multiplication.
        let key = |l: &LayerId| match l.space {
            Space::Xyz => (l.rank, c_xyz, 0u8),
            Space::Z => (l.rank, c, 1u8),
        };
        layers.sort_by(|a, b| {
            let (ra, na, sa) = key(a);
            let (rb, nb, sb) = key(b);
            (ra * nb).cmp(&(rb * na)).then(sa.cmp(&sb)).then(ra.cmp(&rb))
        });
    }
    layers
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub feature_only: bool,
    pub c: usize,
    pub c_xyz: usize,
    pub n: u32,
    pub m: u32,
    pub density_len: u32,
    pub perm_z: Vec<u8>,
    pub perm_xyz: Vec<u8>,
    pub layer_lengths: Vec<u32>,
    pub layer_bounds: Vec<(i16, i16)>,
}

impl Header {
    pub fn byte_len(&self) -> usize {
        header_len(self.c, self.c_xyz)
    }

    pub fn layout(&self) -> Layout {
        if self.feature_only {
            Layout::FeatureOnly
        } else {
            Layout::Combined
        }
    }

    pub fn layers(&self) -> Vec<LayerId> {
        layer_order(self.c, self.c_xyz, self.layout())
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(if self.feature_only { FLAG_FEATURE_ONLY } else { 0 });
        out.push(self.c as u8);
        out.push(self.c_xyz as u8);
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.m.to_le_bytes());
        out.extend_from_slice(&self.density_len.to_le_bytes());
        out.extend_from_slice(&self.perm_z);
        out.extend_from_slice(&self.perm_xyz);
        for l in &self.layer_lengths {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for (lo, hi) in &self.layer_bounds {
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
    }

    fn read(bytes: &[u8]) -> Result<Self, BitstreamError> {
        if bytes.len() < FIXED_HEADER {
            return Err(BitstreamError::Truncated("fixed header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(BitstreamError::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(BitstreamError::Version(bytes[4]));
        }
        let flags = bytes[5];
        if flags & !FLAG_FEATURE_ONLY != 0 {
            return Err(BitstreamError::Malformed(format!("unknown flags {flags:#04x}")));
        }
        let (c, c_xyz) = (bytes[6] as usize, bytes[7] as usize);
        if c == 0 || c_xyz == 0 {
            return Err(BitstreamError::Malformed("zero channel count".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let total = header_len(c, c_xyz);
        if bytes.len() < total {
            return Err(BitstreamError::Truncated("header tables"));
        }
        let mut o = FIXED_HEADER;
        let perm_z = bytes[o..o + c].to_vec();
        o += c;
        let perm_xyz = bytes[o..o + c_xyz].to_vec();
        o += c_xyz;
        check_perm(&perm_z, "z")?;
        check_perm(&perm_xyz, "xyz")?;
        let layers = c + c_xyz;
        let layer_lengths = (0..layers).map(|i| u32_at(o + 4 * i)).collect();
        o += 4 * layers;
        let layer_bounds: Vec<(i16, i16)> = (0..layers)
            .map(|i| {
                let b = &bytes[o + 4 * i..o + 4 * i + 4];
                (
                    i16::from_le_bytes([b[0], b[1]]),
                    i16::from_le_bytes([b[2], b[3]]),
                )
            })
            .collect();
        if let Some((lo, hi)) = layer_bounds.iter().find(|(lo, hi)| lo > hi) {
            return Err(BitstreamError::Malformed(format!("bounds [{lo}, {hi}]")));
        }
        Ok(Self {
            feature_only: flags & FLAG_FEATURE_ONLY != 0,
            c,
            c_xyz,
            n: u32_at(8),
            m: u32_at(12),
            density_len: u32_at(16),
            perm_z,
            perm_xyz,
            layer_lengths,
            layer_bounds,
        })
    }
}

fn check_perm(p: &[u8], what: &str) -> Result<(), BitstreamError> {
    let mut seen = vec![false; p.len()];
    for &v in p {
        let v = v as usize;
        if v >= p.len() || seen[v] {
            return Err(BitstreamError::Malformed(format!("{what} permutation invalid")));
        }
        seen[v] = true;
    }
    Ok(())
}

/// `20 + C + C_xyz + 8 (C + C_xyz)` bytes.
pub fn header_len(c: usize, c_xyz: usize) -> usize {
    FIXED_HEADER + 9 * (c + c_xyz)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressiveBitstream {
    pub header: Header,
    /// Density payload followed by however many layers are present.
    pub body: Vec<u8>,
}

impl ProgressiveBitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header.byte_len() + self.body.len());
        self.header.write(&mut out);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BitstreamError> {
        let header = Header::read(bytes)?;
        let body = bytes[header.byte_len()..].to_vec();
        let bs = Self { header, body };
        bs.present_layers()?;
        Ok(bs)
    }

    pub fn byte_len(&self) -> usize {
        self.header.byte_len() + self.body.len()
    }

    /// Number of leading layers fully contained in the body.
    pub fn present_layers(&self) -> Result<usize, BitstreamError> {
        let mut end = self.header.density_len as usize;
        if self.body.len() < end {
            return Err(BitstreamError::Truncated("density payload"));
        }
        let mut count = 0;
        for &len in &self.header.layer_lengths {
            if end == self.body.len() {
                break;
            }
            end += len as usize;
            if end > self.body.len() {
                return Err(BitstreamError::Truncated("a channel layer"));
            }
            count += 1;
        }
        if end != self.body.len() {
            return Err(BitstreamError::Malformed("trailing bytes after last layer".into()));
        }
        Ok(count)
    }

    /// Retained counts `(k_z, k_xyz)` implied by the present layers.
    pub fn retained(&self) -> Result<(usize, usize), BitstreamError> {
        let present = self.present_layers()?;
        let layers = self.header.layers();
        let kz = layers[..present].iter().filter(|l| l.space == Space::Z).count();
        Ok((kz, present - kz))
    }

    /// Masks over original channel indices for the present layers.
    pub fn masks(&self) -> Result<(DropMask, DropMask), BitstreamError> {
        let (kz, kx) = self.retained()?;
        let h = &self.header;
        let rz: Vec<usize> = h.perm_z.iter().map(|&v| v as usize).collect();
        let rx: Vec<usize> = h.perm_xyz.iter().map(|&v| v as usize).collect();
        Ok((
            DropMask::from_ranking(&rz, kz, 1.0 - kz as f64 / h.c as f64),
            DropMask::from_ranking(&rx, kx, 1.0 - kx as f64 / h.c_xyz as f64),
        ))
    }
}

/// Exp-Golomb (order chosen per stream) code for non-negative counts.
/// Payload: one byte holding the order, then the codes MSB-first, zero
/// padded to a byte.
pub fn encode_density(values: &[u32]) -> Vec<u8> {
    let cost = |k: u32| -> u64 {
        values
            .iter()
            .map(|&v| {
                let w = v as u64 + (1u64 << k);
                let bits = 64 - w.leading_zeros() as u64;
                2 * bits - k as u64 - 1
            })
            .sum()
    };
    let k = (0..16).min_by_key(|&k| (cost(k), k)).unwrap();
    let mut out = vec![k as u8];
    let mut acc = 0u8;
    let mut filled = 0;
    let mut push = |bit: bool, out: &mut Vec<u8>| {
        acc = (acc << 1) | bit as u8;
        filled += 1;
        if filled == 8 {
            out.push(acc);
            acc = 0;
            filled = 0;
        }
    };
    for &v in values {
        let w = v as u64 + (1u64 << k);
        let bits = 64 - w.leading_zeros();
        for _ in 0..(bits - k - 1) {
            push(false, &mut out);
        }
        for b in (0..bits).rev() {
            push((w >> b) & 1 == 1, &mut out);
        }
    }
    if filled > 0 {
        out.push(acc << (8 - filled));
    }
    out
}

pub fn decode_density(payload: &[u8], count: usize) -> Result<Vec<u32>, BitstreamError> {
    let (&k, bits) = payload
        .split_first()
        .ok_or(BitstreamError::Truncated("density payload"))?;
    if k >= 32 {
        return Err(BitstreamError::Malformed(format!("density order {k}")));
    }
    let mut pos = 0usize;
    let mut next = || -> Result<u64, BitstreamError> {
        let byte = bits
            .get(pos / 8)
            .ok_or(BitstreamError::Truncated("density payload"))?;
        let b = (byte >> (7 - pos % 8)) & 1;
        pos += 1;
        Ok(b as u64)
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut zeros = 0u32;
        while next()? == 0 {
            zeros += 1;
            if zeros > 40 {
                return Err(BitstreamError::Malformed("density code too long".into()));
            }
        }
        let mut w = 1u64;
        for _ in 0..(zeros + k as u32) {
            w = (w << 1) | next()?;
        }
        let v = w - (1u64 << k);
        out.push(
            u32::try_from(v).map_err(|_| BitstreamError::Malformed("density overflow".into()))?,
        );
    }
    Ok(out)
}

fn coder_err(layer: usize) -> impl Fn(RangeCoderError) -> BitstreamError {
    move |source| BitstreamError::Coder { layer, source }
}

fn table_for(
    model: &EntropyModel,
    store: &ParamStore,
    channel: usize,
    lo: i32,
    hi: i32,
) -> Result<FreqTable, BitstreamError> {
    let width = (hi - lo + 1) as usize;
    if width > MAX_ALPHABET {
        return Err(EntropyError::AlphabetTooWide {
            channel,
            lo: lo as i64,
            hi: hi as i64,
            limit: MAX_ALPHABET,
        }
        .into());
    }
    // The last entry holds the mass outside [lo, hi] and is never coded, so
    // the table follows the model instead of renormalizing onto the range.
    let mut pmf = model.pmf(store, channel, lo as i64, hi as i64);
    let tail = (1.0 - pmf.iter().sum::<f64>()).max(LIKELIHOOD_FLOOR);
    pmf.push(tail);
    FreqTable::from_pmf(&pmf).map_err(coder_err(usize::MAX))
}

pub struct Models<'a> {
    pub z: &'a EntropyModel,
    pub xyz: &'a EntropyModel,
    pub store: &'a ParamStore,
}

impl Models<'_> {
    fn for_space(&self, space: Space) -> &EntropyModel {
        match space {
            Space::Z => self.z,
            Space::Xyz => self.xyz,
        }
    }
}

pub fn serialize_progressive(
    q: &QuantizedLatent,
    density: &[u32],
    n: u32,
    importance_z: &ChannelImportance,
    importance_xyz: &ChannelImportance,
    models: &Models,
    layout: Layout,
) -> Result<ProgressiveBitstream, BitstreamError> {
    if q.c > 255 || q.c_xyz > 255 || q.c == 0 || q.c_xyz == 0 {
        return Err(BitstreamError::Argument(format!(
            "channel counts {} / {} must be in [1, 255]",
            q.c, q.c_xyz
        )));
    }
    if importance_z.len() != q.c || importance_xyz.len() != q.c_xyz {
        return Err(BitstreamError::Argument("importance length mismatch".into()));
    }
    if models.z.channels != q.c || models.xyz.channels != q.c_xyz {
        return Err(BitstreamError::Mismatch("entropy model channel counts".into()));
    }
    if density.len() != q.m {
        return Err(BitstreamError::Argument(format!(
            "density length {} != M {}",
            density.len(),
            q.m
        )));
    }
    let perm_z: Vec<u8> = importance_z.ranking().iter().map(|&c| c as u8).collect();
    let perm_xyz: Vec<u8> = importance_xyz.ranking().iter().map(|&c| c as u8).collect();
    let density_payload = encode_density(density);
    let mut body = density_payload.clone();
    let order = layer_order(q.c, q.c_xyz, layout);
    let mut layer_lengths = Vec::with_capacity(order.len());
    let mut layer_bounds = Vec::with_capacity(order.len());
    for (li, layer) in order.iter().enumerate() {
        let ch = match layer.space {
            Space::Z => perm_z[layer.rank],
            Space::Xyz => perm_xyz[layer.rank],
        } as usize;
        let (lo, hi) = q.bounds(layer.space, ch);
        if lo < i16::MIN as i32 || hi > i16::MAX as i32 {
            return Err(BitstreamError::Argument(format!(
                "symbols of channel {ch} exceed 16 bits"
            )));
        }
        let model = models.for_space(layer.space);
        let table = table_for(model, models.store, ch, lo, hi)?;
        let symbols: Vec<usize> = q
            .column(layer.space, ch)
            .iter()
            .map(|&v| (v - lo) as usize)
            .collect();
        let bytes = range_coder::encode_symbols(&symbols, &table).map_err(coder_err(li))?;
        layer_lengths.push(bytes.len() as u32);
        layer_bounds.push((lo as i16, hi as i16));
        body.extend_from_slice(&bytes);
    }
    Ok(ProgressiveBitstream {
        header: Header {
            feature_only: layout == Layout::FeatureOnly,
            c: q.c,
            c_xyz: q.c_xyz,
            n,
            m: q.m as u32,
            density_len: density_payload.len() as u32,
            perm_z,
            perm_xyz,
            layer_lengths,
            layer_bounds,
        },
        body,
    })
}

/// `(k_z, k_xyz)` kept at progressive ratio `alpha`.
pub fn retained_for_alpha(alpha: f64, c: usize, c_xyz: usize, layout: Layout) -> (usize, usize) {
    let rho = 1.0 - alpha;
    let kz = retained_count(rho, c);
    let kx = match layout {
        Layout::Combined => retained_count(rho, c_xyz),
        Layout::FeatureOnly => c_xyz,
    };
    (kz, kx)
}

/// Keeps the header, the density payload and the shortest layer prefix that
/// holds `ceil(alpha C)` z layers and `ceil(alpha C_xyz)` xyz layers.
pub fn truncate(bs: &ProgressiveBitstream, alpha: f64) -> Result<ProgressiveBitstream, BitstreamError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(BitstreamError::Argument(format!("alpha {alpha} not in (0, 1]")));
    }
    let h = &bs.header;
    let (kz, kx) = retained_for_alpha(alpha, h.c, h.c_xyz, h.layout());
    if kz == 0 {
        return Err(BitstreamError::Argument(format!(
            "alpha {alpha} retains no feature channel"
        )));
    }
    let present = bs.present_layers()?;
    let layers = h.layers();
    let mut end = h.density_len as usize;
    let (mut got_z, mut got_x) = (0, 0);
    let mut used = 0;
    for (i, l) in layers.iter().enumerate() {
        if got_z >= kz && got_x >= kx {
            break;
        }
        if i >= present {
            return Err(BitstreamError::Argument(format!(
                "stream holds {present} layers, alpha {alpha} needs more"
            )));
        }
        match l.space {
            Space::Z => got_z += 1,
            Space::Xyz => got_x += 1,
        }
        end += h.layer_lengths[i] as usize;
        used += 1;
    }
    debug_assert_eq!((got_z, got_x), (kz, kx), "layer order is not prefix-closed");
    log::debug!("truncate alpha={alpha}: {used} layers, k_z={kz}, k_xyz={kx}");
    Ok(ProgressiveBitstream {
        header: h.clone(),
        body: bs.body[..end].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedStream {
    /// Missing channels are zero.
    pub quantized: QuantizedLatent,
    pub density: Vec<u32>,
    pub n: u32,
    pub mask_z: DropMask,
    pub mask_xyz: DropMask,
}

pub fn decode_stream(bs: &ProgressiveBitstream, models: &Models) -> Result<DecodedStream, BitstreamError> {
    let h = &bs.header;
    if models.z.channels != h.c || models.xyz.channels != h.c_xyz {
        return Err(BitstreamError::Mismatch(format!(
            "stream has C={} C_xyz={}, model has C={} C_xyz={}",
            h.c, h.c_xyz, models.z.channels, models.xyz.channels
        )));
    }
    let present = bs.present_layers()?;
    let m = h.m as usize;
    let dlen = h.density_len as usize;
    let density = decode_density(&bs.body[..dlen], m)?;
    let mut q = QuantizedLatent {
        m,
        c: h.c,
        c_xyz: h.c_xyz,
        z: vec![0; m * h.c],
        z_xyz: vec![0; m * h.c_xyz],
    };
    let mut offset = dlen;
    for (li, layer) in h.layers().iter().take(present).enumerate() {
        let len = h.layer_lengths[li] as usize;
        let data = &bs.body[offset..offset + len];
        offset += len;
        let (ch, width, target) = match layer.space {
            Space::Z => (h.perm_z[layer.rank] as usize, h.c, &mut q.z),
            Space::Xyz => (h.perm_xyz[layer.rank] as usize, h.c_xyz, &mut q.z_xyz),
        };
        let (lo, hi) = h.layer_bounds[li];
        let table = table_for(
            models.for_space(layer.space),
            models.store,
            ch,
            lo as i32,
            hi as i32,
        )?;
        let symbols = range_coder::decode_symbols(data, m, &table).map_err(coder_err(li))?;
        if symbols.iter().any(|&s| s > (hi as i32 - lo as i32) as usize) {
            return Err(BitstreamError::Malformed(format!("layer {li}: symbol outside recorded bounds")));
        }
        for (i, s) in symbols.into_iter().enumerate() {
            target[i * width + ch] = lo as i32 + s as i32;
        }
    }
    let (mask_z, mask_xyz) = bs.masks()?;
    Ok(DecodedStream {
        quantized: q,
        density,
        n: h.n,
        mask_z,
        mask_xyz,
    })
}

/// `(density_bits - sum log2 p) / N` for the likelihoods of the coded
/// symbols.
pub fn rate_bpp(likelihoods: &[f64], density_bits: usize, n: usize) -> Result<f64, BitstreamError> {
    if n == 0 {
        return Err(BitstreamError::Argument("N = 0".into()));
    }
    let mut bits = density_bits as f64;
    for (i, &p) in likelihoods.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(BitstreamError::Argument(format!("likelihood {p} of symbol {i}")));
        }
        bits -= p.log2();
    }
    Ok(bits / n as f64)
}

/// Rate of the retained channels under the entropy model plus the density
/// payload, in bits per original point.
pub fn estimate_bpp(
    q: &QuantizedLatent,
    models: &Models,
    retained_z: &[usize],
    retained_xyz: &[usize],
    n: usize,
    density_bits: usize,
) -> Result<f64, BitstreamError> {
    if n == 0 {
        return Err(BitstreamError::Argument("N = 0".into()));
    }
    let mut bits = density_bits as f64;
    for (space, set, width) in [(Space::Z, retained_z, q.c), (Space::Xyz, retained_xyz, q.c_xyz)] {
        for &ch in set {
            if ch >= width {
                return Err(BitstreamError::Argument(format!("channel {ch} >= {width}")));
            }
            let model = models.for_space(space);
            for v in q.column(space, ch) {
                bits += model.symbol_bits(models.store, ch, v as i64)?;
            }
        }
    }
    Ok(bits / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_alternates() {
        let order = layer_order(2, 2, Layout::Combined);
        let want = [
            (Space::Xyz, 0),
            (Space::Z, 0),
            (Space::Xyz, 1),
            (Space::Z, 1),
        ];
        for (l, (s, r)) in order.iter().zip(want) {
            assert_eq!((l.space, l.rank), (s, r));
        }
    }

    #[test]
    fn uneven_order_is_prefix_closed() {
        let (c, cx) = (32, 16);
        let order = layer_order(c, cx, Layout::Combined);
        for j in 1..=32 {
            let alpha = j as f64 / 32.0;
            let (kz, kx) = retained_for_alpha(alpha, c, cx, Layout::Combined);
            let need = kz + kx;
            let z = order[..need].iter().filter(|l| l.space == Space::Z).count();
            assert_eq!((z, need - z), (kz, kx), "alpha {alpha}");
        }
    }

    #[test]
    fn rate_of_fair_coins() {
        assert_eq!(rate_bpp(&[0.5; 8], 0, 4).unwrap(), 2.0);
        assert_eq!(rate_bpp(&[], 0, 4).unwrap(), 0.0);
        assert_eq!(rate_bpp(&[0.25], 6, 2).unwrap(), 4.0);
        assert!(rate_bpp(&[0.0], 0, 1).is_err());
        assert!(rate_bpp(&[], 0, 0).is_err());
    }

    #[test]
    fn density_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(0..200);
            let vals: Vec<u32> = (0..n).map(|_| rng.random_range(0..400)).collect();
            let bytes = encode_density(&vals);
            assert_eq!(decode_density(&bytes, n).unwrap(), vals);
        }
        assert_eq!(encode_density(&[]).len(), 1);
    }

    #[test]
    fn header_length_formula() {
        assert_eq!(header_len(2, 2), 20 + 36);
        assert_eq!(header_len(32, 16), 20 + 9 * 48);
    }
}
