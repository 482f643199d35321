mod common;

use common::{exhaustive_three_symbol, range_coder_fuzz, truncation_mismatches};
use progcloud::codec::{Codec, ModelConfig};
use progcloud::entropy::bitstream::{decode_stream, header_len, retained_for_alpha, BitstreamError};
use progcloud::entropy::range_coder::{decode_symbols, encode_symbols, FreqTable};
use progcloud::entropy::{estimate_bpp, truncate, Layout, ProgressiveBitstream};
use progcloud::pipeline::compress;
use progcloud::synth::{generate_synthetic, Shape};
use proptest::prelude::*;

fn small_codec() -> Codec {
    Codec::new(ModelConfig {
        c: 8,
        c_xyz: 4,
        hidden: 8,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn range_coder_round_trips(
        pmf in prop::collection::vec(0.0f64..1.0, 1..40),
        raw in prop::collection::vec(any::<usize>(), 0..400),
    ) {
        let table = FreqTable::from_pmf(&pmf).unwrap();
        let symbols: Vec<usize> = raw.iter().map(|s| s % pmf.len()).collect();
        let bytes = encode_symbols(&symbols, &table).unwrap();
        prop_assert_eq!(decode_symbols(&bytes, symbols.len(), &table).unwrap(), symbols.clone());
        // Never worse than the model's ideal length plus the flush.
        let ideal: f64 = symbols.iter().map(|&s| table.bits(s)).sum();
        prop_assert!((bytes.len() * 8) as f64 <= ideal * 1.02 + 40.0);
    }
}

#[test]
fn fuzzed_and_exhaustive_corpora() {
    assert_eq!(range_coder_fuzz(2000, 17), 0);
    let (checked, failures) = exhaustive_three_symbol();
    assert_eq!(checked, 4 * (0..=7).map(|l| 3usize.pow(l)).sum::<usize>());
    assert_eq!(failures, 0);
}

#[test]
fn truncation_equals_masking_in_both_layouts() {
    let codec = small_codec();
    let pc = generate_synthetic(Shape::GaussianClusters, 300, 3.0, 8).unwrap();
    for layout in [Layout::Combined, Layout::FeatureOnly] {
        assert!(truncation_mismatches(&codec, &pc, layout).is_empty());
    }
}

#[test]
fn truncated_streams_are_byte_prefixes() {
    let codec = small_codec();
    let pc = generate_synthetic(Shape::SphereSurface, 240, 1.0, 2).unwrap();
    let comp = compress(&codec, &pc, Layout::Combined, 0.6).unwrap();
    let full = comp.bitstream.to_bytes();
    let mut prev = 0;
    for j in 1..=8 {
        let alpha = j as f64 / 8.0;
        let cut = truncate(&comp.bitstream, alpha).unwrap().to_bytes();
        assert!(full.starts_with(&cut));
        assert!(cut.len() >= prev);
        prev = cut.len();
        let parsed = ProgressiveBitstream::from_bytes(&cut).unwrap();
        assert_eq!(parsed.retained().unwrap(), retained_for_alpha(alpha, 8, 4, Layout::Combined));
    }
    assert_eq!(prev, full.len());
    assert_eq!(truncate(&comp.bitstream, 1.0).unwrap(), comp.bitstream);
}

#[test]
fn stream_decodes_exactly_the_kept_symbols() {
    let codec = small_codec();
    let pc = generate_synthetic(Shape::Plane, 200, 1.0, 5).unwrap();
    let comp = compress(&codec, &pc, Layout::Combined, 0.6).unwrap();
    let cut = truncate(&comp.bitstream, 0.5).unwrap();
    let s = decode_stream(&cut, &codec.models()).unwrap();
    assert_eq!(s.density, comp.density);
    assert_eq!(s.n as usize, pc.len());
    let q = &comp.quantized;
    for i in 0..q.m {
        for ch in 0..q.c {
            let want = if s.mask_z.bits[ch] { q.z[i * q.c + ch] } else { 0 };
            assert_eq!(s.quantized.z[i * q.c + ch], want);
        }
        for ch in 0..q.c_xyz {
            let want = if s.mask_xyz.bits[ch] { q.z_xyz[i * q.c_xyz + ch] } else { 0 };
            assert_eq!(s.quantized.z_xyz[i * q.c_xyz + ch], want);
        }
    }
    assert_eq!(s.mask_z.bits.iter().filter(|b| **b).count(), 4);
    assert_eq!(s.mask_xyz.bits.iter().filter(|b| **b).count(), 2);
}

#[test]
fn file_size_tracks_the_entropy_estimate() {
    let codec = small_codec();
    let pc = generate_synthetic(Shape::GaussianClusters, 600, 4.0, 1).unwrap();
    let comp = compress(&codec, &pc, Layout::Combined, 0.6).unwrap();
    let h = &comp.bitstream.header;
    for j in 1..=8 {
        let alpha = j as f64 / 8.0;
        let cut = truncate(&comp.bitstream, alpha).unwrap();
        let (mz, mx) = cut.masks().unwrap();
        let n = pc.len();
        let est = estimate_bpp(
            &comp.quantized,
            &codec.models(),
            &mz.retained(),
            &mx.retained(),
            n,
            8 * h.density_len as usize,
        )
        .unwrap();
        let layers = cut.present_layers().unwrap();
        let file = (cut.byte_len() * 8) as f64 / n as f64;
        let overhead = ((header_len(8, 4) + 4 * layers) * 8) as f64 / n as f64;
        assert!(file >= est, "alpha {alpha}: {file} < {est}");
        assert!(file <= 1.05 * est + overhead, "alpha {alpha}: {file} vs {est}");
    }
}

#[test]
fn damaged_streams_are_rejected() {
    let codec = small_codec();
    let pc = generate_synthetic(Shape::SphereSurface, 150, 1.0, 9).unwrap();
    let bytes = compress(&codec, &pc, Layout::Combined, 0.6).unwrap().bitstream.to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(ProgressiveBitstream::from_bytes(&bad), Err(BitstreamError::BadMagic));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(ProgressiveBitstream::from_bytes(&bad), Err(BitstreamError::Version(9)));
    assert!(matches!(
        ProgressiveBitstream::from_bytes(&bytes[..10]),
        Err(BitstreamError::Truncated(_))
    ));
    // Cutting inside a layer is not a layer boundary.
    assert!(matches!(
        ProgressiveBitstream::from_bytes(&bytes[..bytes.len() - 1]),
        Err(BitstreamError::Truncated(_))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(ProgressiveBitstream::from_bytes(&long).is_err());

    // A model with different channel counts must refuse the stream.
    let other = Codec::new(ModelConfig { c: 6, c_xyz: 4, hidden: 8, ..ModelConfig::default() }).unwrap();
    let bs = ProgressiveBitstream::from_bytes(&bytes).unwrap();
    assert!(matches!(decode_stream(&bs, &other.models()), Err(BitstreamError::Mismatch(_))));
}

#[test]
fn estimate_equals_per_symbol_summation() {
    let codec = small_codec();
    let pc = generate_synthetic(Shape::GaussianClusters, 400, 3.0, 6).unwrap();
    let comp = compress(&codec, &pc, Layout::Combined, 0.6).unwrap();
    let q = &comp.quantized;
    let (rz, rx) = (vec![0, 3, 5], vec![1, 2]);
    let est = estimate_bpp(q, &codec.models(), &rz, &rx, pc.len(), 24).unwrap();
    let mut bits = 24.0;
    for i in 0..q.m {
        for &ch in &rz {
            bits -= codec.bz.likelihood_value(&codec.store, ch, q.z[i * q.c + ch] as f64).log2();
        }
        for &ch in &rx {
            bits -= codec.bxyz.likelihood_value(&codec.store, ch, q.z_xyz[i * q.c_xyz + ch] as f64).log2();
        }
    }
    assert!((est - bits / pc.len() as f64).abs() <= 1e-9);
}
