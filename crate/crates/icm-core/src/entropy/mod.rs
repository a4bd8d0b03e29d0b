//! Bitstream container and entropy transcoding of quantized latents.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `"ICM1"`                     |
//! | 4      | 1    | version (1)                        |
//! | 5      | 1    | flags (0)                          |
//! | 6      | 4    | original image height (u32)        |
//! | 10     | 4    | original image width (u32)         |
//! | 14     | 4    | padded image height (u32)          |
//! | 18     | 4    | padded image width (u32)           |
//! | 22     | 2    | latent channels (u16)              |
//! | 24     | 2    | support radius (u16)               |
//! | 26     | 8    | probability model hash (u64)       |
//! | 34     | 8    | payload length in bytes (u64)      |
//! | 42     | ...  | range-coded payload                |
//! | end-4  | 4    | crc32 over every preceding byte    |
//!
//! Latents are coded in raster order with the channel index innermost;
//! values beyond the model support emit the escape symbol followed by a
//! raw 16-bit offset value.

pub mod range;
pub mod table;

use alloc::vec::Vec;

use crate::codec::prob::ProbabilityModel;
use crate::codec::LATENT_STRIDE;
use crate::error::CodingError;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use range::{RangeDecoder, RangeEncoder, TOT_FREQ};
pub use table::{build_coding_tables, quantize_pmf, ChannelTable, CodingTables};

pub const MAGIC: [u8; 4] = *b"ICM1";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 42;
const CRC_LEN: usize = 4;
const RAW_OFFSET: i32 = 32768;

/// Parsed bitstream metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub orig_h: u32,
    pub orig_w: u32,
    pub padded_h: u32,
    pub padded_w: u32,
    pub latent_channels: u16,
    pub support_radius: u16,
    pub pm_hash: u64,
}

impl StreamHeader {
    pub fn latent_hw(&self) -> (usize, usize) {
        (
            self.padded_h as usize / LATENT_STRIDE,
            self.padded_w as usize / LATENT_STRIDE,
        )
    }

    fn write_to(&self, out: &mut Vec<u8>, payload_len: u64) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(0);
        out.extend_from_slice(&self.orig_h.to_le_bytes());
        out.extend_from_slice(&self.orig_w.to_le_bytes());
        out.extend_from_slice(&self.padded_h.to_le_bytes());
        out.extend_from_slice(&self.padded_w.to_le_bytes());
        out.extend_from_slice(&self.latent_channels.to_le_bytes());
        out.extend_from_slice(&self.support_radius.to_le_bytes());
        out.extend_from_slice(&self.pm_hash.to_le_bytes());
        out.extend_from_slice(&payload_len.to_le_bytes());
    }

    /// Reads the header back out of a full bitstream, returning the
    /// payload length alongside so callers can meter rate without
    /// decoding. Validates magic, version, and dimension consistency
    /// but not the trailing checksum.
    pub fn parse(bytes: &[u8]) -> Result<(Self, u64), CodingError> {
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(CodingError::Truncated);
        }
        if bytes[0..4] != MAGIC {
            return Err(CodingError::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(CodingError::UnsupportedVersion(bytes[4]));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let header = StreamHeader {
            orig_h: u32_at(6),
            orig_w: u32_at(10),
            padded_h: u32_at(14),
            padded_w: u32_at(18),
            latent_channels: u16_at(22),
            support_radius: u16_at(24),
            pm_hash: u64::from_le_bytes(bytes[26..34].try_into().unwrap()),
        };
        let payload_len = u64::from_le_bytes(bytes[34..42].try_into().unwrap());
        let stride = LATENT_STRIDE as u32;
        for (label, orig, padded) in [
            ("height", header.orig_h, header.padded_h),
            ("width", header.orig_w, header.padded_w),
        ] {
            if padded % stride != 0 || orig > padded || padded - orig >= stride || orig == 0 {
                return Err(CodingError::BadHeader(alloc::format!(
                    "inconsistent {label}: original {orig}, padded {padded}"
                )));
            }
        }
        if header.latent_channels == 0 {
            return Err(CodingError::BadHeader("zero latent channels".into()));
        }
        Ok((header, payload_len))
    }
}

fn crc32(bytes: &[u8]) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(bytes);
    hasher.finalize()
}

fn latent_to_ints<S: Scalar>(latent: &Tensor<S>) -> Vec<i32> {
    latent
        .data()
        .iter()
        .map(|&v| {
            let r = v.to_f64();
            debug_assert!(r.is_finite() && r == libm::round(r), "latent not integral: {r}");
            libm::round(r) as i32
        })
        .collect()
}

/// Entropy-codes a rounded latent tensor into a self-contained bitstream.
///
/// `orig_hw` is the pre-padding image size recorded so the decoder can
/// crop its reconstruction.
pub fn compress<S: Scalar>(
    latent: &Tensor<S>,
    pm: &ProbabilityModel,
    store: &ParamStore<S>,
    orig_hw: (usize, usize),
) -> Result<Vec<u8>, CodingError> {
    let (n, c, lh, lw) = latent.dims4();
    assert_eq!(n, 1, "one image per stream");
    assert_eq!(c, pm.channels, "latent channels must match the model");
    let header = StreamHeader {
        orig_h: orig_hw.0 as u32,
        orig_w: orig_hw.1 as u32,
        padded_h: (lh * LATENT_STRIDE) as u32,
        padded_w: (lw * LATENT_STRIDE) as u32,
        latent_channels: c as u16,
        support_radius: pm.support_radius as u16,
        pm_hash: pm.hash8(store),
    };
    let tables = build_coding_tables(pm, store);
    let values = latent_to_ints(latent);
    let mut enc = RangeEncoder::new();
    for y in 0..lh {
        for x in 0..lw {
            for ci in 0..c {
                let v = values[(ci * lh + y) * lw + x];
                let t = &tables.tables[ci];
                let sym = tables.symbol_of(v);
                enc.encode(t.cum_of(sym), t.freq(sym));
                if sym == tables.escape_symbol() {
                    let raw = v.clamp(-RAW_OFFSET, RAW_OFFSET - 1) + RAW_OFFSET;
                    enc.encode_raw16(raw as u16);
                }
            }
        }
    }
    let payload = enc.finish();
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CRC_LEN);
    header.write_to(&mut out, payload.len() as u64);
    out.extend_from_slice(&payload);
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes a bitstream back into the quantized latent tensor.
///
/// The probability model must hash to the value stored in the header;
/// entropy coding is only correct when encoder and decoder tables agree
/// exactly.
pub fn decompress<S: Scalar>(
    bytes: &[u8],
    pm: &ProbabilityModel,
    store: &ParamStore<S>,
) -> Result<(Tensor<S>, StreamHeader), CodingError> {
    let (header, payload_len) = StreamHeader::parse(bytes)?;
    let expected_len = HEADER_LEN
        .checked_add(payload_len as usize)
        .and_then(|v| v.checked_add(CRC_LEN))
        .ok_or(CodingError::Truncated)?;
    if bytes.len() < expected_len {
        return Err(CodingError::Truncated);
    }
    if bytes.len() > expected_len {
        return Err(CodingError::BadHeader("trailing bytes after checksum".into()));
    }
    let body = &bytes[..expected_len - CRC_LEN];
    let expected = u32::from_le_bytes(bytes[expected_len - CRC_LEN..].try_into().unwrap());
    let got = crc32(body);
    if got != expected {
        return Err(CodingError::ChecksumMismatch { expected, got });
    }
    if header.latent_channels as usize != pm.channels
        || header.support_radius as i32 != pm.support_radius
        || header.pm_hash != pm.hash8(store)
    {
        return Err(CodingError::ModelHashMismatch);
    }
    let (lh, lw) = header.latent_hw();
    let c = header.latent_channels as usize;
    let tables = build_coding_tables(pm, store);
    let mut dec = RangeDecoder::new(&bytes[HEADER_LEN..HEADER_LEN + payload_len as usize]);
    let mut data = alloc::vec![S::ZERO; c * lh * lw];
    for y in 0..lh {
        for x in 0..lw {
            for ci in 0..c {
                let t = &tables.tables[ci];
                let f = dec.decode_freq();
                let sym = t.lookup(f);
                dec.advance(t.cum_of(sym), t.freq(sym));
                let v = if sym == tables.escape_symbol() {
                    dec.decode_raw16() as i32 - RAW_OFFSET
                } else {
                    tables.value_of(sym)
                };
                data[(ci * lh + y) * lw + x] = S::from_f64(v as f64);
            }
        }
    }
    Ok((Tensor::from_vec(&[1, c, lh, lw], data), header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::prob::ProbabilityModel;
    use crate::nn::ParamStore;
    use crate::rng::SeedRng;

    fn setup(channels: usize) -> (ProbabilityModel, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let pm = ProbabilityModel::build(&mut store, channels, 64);
        (pm, store)
    }

    fn random_latent(rng: &mut SeedRng, c: usize, h: usize, w: usize, span: f64) -> Tensor<f32> {
        let data: Vec<f32> = (0..c * h * w)
            .map(|_| libm::round(rng.normal_scaled::<f64>(span)) as f32)
            .collect();
        Tensor::from_vec(&[1, c, h, w], data)
    }

    #[test]
    fn round_trip_preserves_every_latent_value() {
        let (pm, store) = setup(4);
        let mut rng = SeedRng::new(11);
        for trial in 0..5 {
            let latent = random_latent(&mut rng, 4, 6, 9, 3.0 + trial as f64 * 8.0);
            let bytes = compress(&latent, &pm, &store, (45, 70)).unwrap();
            let (back, header) = decompress(&bytes, &pm, &store).unwrap();
            assert_eq!(back.shape(), latent.shape());
            assert_eq!(back.data(), latent.data());
            assert_eq!(header.orig_h, 45);
            assert_eq!(header.padded_h, 48);
            assert_eq!(header.latent_hw(), (6, 9));
        }
    }

    #[test]
    fn escape_values_survive_the_trip() {
        let (pm, store) = setup(2);
        let mut latent = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        latent.data_mut()[0] = 300.0;
        latent.data_mut()[17] = -1200.0;
        latent.data_mut()[31] = 64.0;
        let bytes = compress(&latent, &pm, &store, (32, 32)).unwrap();
        let (back, _) = decompress(&bytes, &pm, &store).unwrap();
        assert_eq!(back.data(), latent.data());
    }

    #[test]
    fn corrupted_payload_is_rejected_by_checksum() {
        let (pm, store) = setup(2);
        let mut rng = SeedRng::new(5);
        let latent = random_latent(&mut rng, 2, 4, 4, 4.0);
        let mut bytes = compress(&latent, &pm, &store, (30, 27)).unwrap();
        let mid = HEADER_LEN + (bytes.len() - HEADER_LEN - CRC_LEN) / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decompress::<f32>(&bytes, &pm, &store),
            Err(CodingError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn truncated_stream_is_detected() {
        let (pm, store) = setup(2);
        let mut rng = SeedRng::new(6);
        let latent = random_latent(&mut rng, 2, 4, 4, 4.0);
        let bytes = compress(&latent, &pm, &store, (32, 32)).unwrap();
        for cut in [3, HEADER_LEN, bytes.len() - 1] {
            assert!(matches!(
                decompress::<f32>(&bytes[..cut], &pm, &store),
                Err(CodingError::Truncated)
            ));
        }
    }

    #[test]
    fn foreign_magic_and_version_are_rejected() {
        let (pm, store) = setup(2);
        let latent = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let good = compress(&latent, &pm, &store, (32, 32)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decompress::<f32>(&bad, &pm, &store),
            Err(CodingError::BadMagic)
        ));

        let mut bad = good;
        bad[4] = 9;
        assert!(matches!(
            decompress::<f32>(&bad, &pm, &store),
            Err(CodingError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn stream_from_a_different_model_is_refused() {
        let (pm, store) = setup(2);
        let latent = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let bytes = compress(&latent, &pm, &store, (32, 32)).unwrap();

        let (pm2, mut store2) = setup(2);
        let id = store2.find("probability_model.b1").unwrap();
        store2.get_mut(id)[0] += 0.25;
        assert!(matches!(
            decompress::<f32>(&bytes, &pm2, &store2),
            Err(CodingError::ModelHashMismatch)
        ));
    }

    #[test]
    fn coded_size_tracks_table_entropy() {
        let (pm, store) = setup(4);
        let mut rng = SeedRng::new(7);
        let latent = random_latent(&mut rng, 4, 16, 16, 5.0);
        let bytes = compress(&latent, &pm, &store, (128, 128)).unwrap();
        let tables = build_coding_tables(&pm, &store);
        let values: Vec<i32> = latent.data().iter().map(|&v| v as i32).collect();
        let mut exact_bits = 0.0f64;
        for (i, &v) in values.iter().enumerate() {
            let ci = i / (16 * 16);
            let t = &tables.tables[ci];
            let sym = tables.symbol_of(v);
            exact_bits -= (t.freq(sym) as f64 / TOT_FREQ as f64).log2();
            if sym == tables.escape_symbol() {
                exact_bits += 16.0;
            }
        }
        let actual_bits = (bytes.len() - HEADER_LEN - CRC_LEN) as f64 * 8.0;
        assert!(actual_bits >= exact_bits - 1.0, "coder cannot beat entropy");
        assert!(
            actual_bits <= exact_bits + 64.0,
            "coder overhead too large: {actual_bits} vs {exact_bits}"
        );
    }
}
