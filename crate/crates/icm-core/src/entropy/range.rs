//! Carry-less byte-oriented range coder (Subbotin style).
//!
//! Both ends keep a 32-bit `low`/`range` pair over a fixed total frequency
//! of 2^16. Renormalization emits the top byte whenever the top bytes of
//! `low` and `low + range` agree, and force-shrinks `range` at a 2^16
//! boundary otherwise, which is what removes carry propagation entirely.

use alloc::vec::Vec;

/// Renormalization threshold: top byte settled.
const TOP: u32 = 1 << 24;
/// Forced-shrink threshold.
const BOT: u32 = 1 << 16;
/// Total frequency of every coding table.
pub const TOT_FREQ: u32 = 1 << 16;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Encodes one symbol occupying `[cum, cum + freq)` out of
    /// [`TOT_FREQ`]. `freq` must be nonzero.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOT_FREQ);
        let r = self.range / TOT_FREQ;
        self.low = self.low.wrapping_add(cum.wrapping_mul(r));
        self.range = freq * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Encodes a raw value in `[0, 65536)` at exactly 16 bits.
    pub fn encode_raw16(&mut self, value: u16) {
        self.encode(value as u32, 1);
    }

    /// Flushes the final state; the returned buffer is the payload.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    low: u32,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            buf,
            pos: 0,
            low: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        // Reading past the end yields zeros; decoders must know the
        // symbol count and never rely on an end marker.
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Returns the cumulative-frequency slot of the next symbol. The
    /// caller looks up the symbol, then must call [`Self::advance`] with
    /// that symbol's `(cum, freq)`.
    pub fn decode_freq(&mut self) -> u32 {
        let r = self.range / TOT_FREQ;
        let f = self.code.wrapping_sub(self.low) / r;
        f.min(TOT_FREQ - 1)
    }

    pub fn advance(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOT_FREQ);
        let r = self.range / TOT_FREQ;
        self.low = self.low.wrapping_add(cum.wrapping_mul(r));
        self.range = freq * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Decodes a raw 16-bit value written by
    /// [`RangeEncoder::encode_raw16`].
    pub fn decode_raw16(&mut self) -> u16 {
        let v = self.decode_freq() as u16;
        self.advance(v as u32, 1);
        v
    }
}
