//! Byte-oriented range coder over static frequency tables.
//!
//! The coder keeps a 56-bit window: `range` stays in `[2^48, 2^56)` and a
//! carry out of the window is propagated through a cached byte plus a run of
//! pending `0xFF` bytes. Frequency tables have a fixed 24-bit total, so the
//! truncation `range >> 24` costs well under a millibit per symbol.

use crate::error::{AscError, Result};

pub const FREQ_BITS: u32 = 24;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

const WINDOW_BITS: u32 = 56;
const WINDOW_MASK: u64 = (1 << WINDOW_BITS) - 1;
const TOP_SHIFT: u32 = WINDOW_BITS - 8;
const BOTTOM: u64 = 1 << TOP_SHIFT;
/// Bytes the decoder primes its code register with.
const PRIME_BYTES: usize = (WINDOW_BITS / 8) as usize;

/// Cumulative frequency table summing to [`FREQ_TOTAL`], every entry >= 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantizes a probability vector. Each symbol gets at least one count;
    /// the most probable symbol absorbs the rounding remainder.
    pub fn from_probabilities(p: &[f64]) -> Result<Self> {
        let n = p.len();
        if n == 0 || n as u64 >= FREQ_TOTAL as u64 / 2 {
            return Err(AscError::Config(format!("cannot build a frequency table for {n} symbols")));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(AscError::Config("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = p.iter().sum();
        if !(total > 0.0) {
            return Err(AscError::Config("probabilities sum to zero".into()));
        }
        let mut freq: Vec<i64> = p
            .iter()
            .map(|v| ((v / total * FREQ_TOTAL as f64).round() as i64).max(1))
            .collect();
        let argmax = (0..n).fold(0, |best, i| if freq[i] > freq[best] { i } else { best });
        let excess: i64 = freq.iter().sum::<i64>() - FREQ_TOTAL as i64;
        freq[argmax] -= excess;
        if freq[argmax] < 1 {
            return Err(AscError::Config("probability table too flat to quantize".into()));
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in freq {
            acc += f as u32;
            cum.push(acc);
        }
        debug_assert_eq!(acc, FREQ_TOTAL);
        Ok(Self { cum })
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Model probability actually used by the coder for symbol `s`.
    pub fn probability(&self, s: usize) -> f64 {
        self.freq(s) as f64 / FREQ_TOTAL as f64
    }

    fn find(&self, v: u32) -> usize {
        self.cum.partition_point(|c| *c <= v) - 1
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    pending: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: WINDOW_MASK,
            cache: 0,
            pending: 1,
            first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, byte: u8) {
        // The very first byte is always zero (the code value is below one),
        // so it is left implicit.
        if self.first {
            self.first = false;
            debug_assert_eq!(byte, 0);
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if (self.low & WINDOW_MASK) < (0xFF << TOP_SHIFT) || self.low > WINDOW_MASK {
            let carry = (self.low >> WINDOW_BITS) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> TOP_SHIFT) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low << 8) & WINDOW_MASK;
    }

    pub fn encode(&mut self, table: &FreqTable, symbol: usize) {
        let r = self.range >> FREQ_BITS;
        self.low += r * table.cum[symbol] as u64;
        self.range = r * table.freq(symbol) as u64;
        while self.range < BOTTOM {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..=PRIME_BYTES {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: WINDOW_MASK,
        };
        for _ in 0..PRIME_BYTES {
            d.code = (d.code << 8) | d.next_byte()? as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self
            .data
            .get(self.pos)
            .copied()
            .ok_or_else(|| AscError::Decode(format!("stream truncated after {} payload bytes", self.data.len())))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<usize> {
        let r = self.range >> FREQ_BITS;
        let v = self.code / r;
        if v >= FREQ_TOTAL as u64 {
            return Err(AscError::Decode("corrupt range-coded payload".into()));
        }
        let s = table.find(v as u32);
        self.code -= r * table.cum[s] as u64;
        self.range = r * table.freq(s) as u64;
        while self.range < BOTTOM {
            self.range <<= 8;
            self.code = ((self.code << 8) | self.next_byte()? as u64) & WINDOW_MASK;
        }
        Ok(s)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Errors unless the payload was consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(AscError::Decode(format!(
                "{} trailing payload bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round_trip(p: &[f64], symbols: &[usize]) -> (Vec<u8>, Vec<usize>) {
        let t = FreqTable::from_probabilities(p).unwrap();
        let mut enc = RangeEncoder::new();
        for s in symbols {
            enc.encode(&t, *s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        let out: Vec<usize> = symbols.iter().map(|_| dec.decode(&t).unwrap()).collect();
        dec.finish().unwrap();
        (bytes, out)
    }

    #[test]
    fn empty_message_round_trips() {
        let (bytes, out) = round_trip(&[0.5, 0.5], &[]);
        assert!(out.is_empty());
        assert_eq!(bytes.len(), PRIME_BYTES);
    }

    #[test]
    fn skewed_source_costs_close_to_entropy() {
        let p = [0.999, 0.0005, 0.0005];
        let symbols: Vec<usize> = (0..20_000).map(|i| if i % 1000 == 7 { 1 } else { 0 }).collect();
        let (bytes, out) = round_trip(&p, &symbols);
        assert_eq!(out, symbols);
        let t = FreqTable::from_probabilities(&p).unwrap();
        let info: f64 = symbols.iter().map(|s| -t.probability(*s).log2()).sum();
        assert!((bytes.len() * 8) as f64 <= info + 64.0);
    }

    #[test]
    fn truncation_is_detected() {
        let p = [0.3, 0.3, 0.4];
        let symbols: Vec<usize> = (0..500).map(|i| i % 3).collect();
        let (bytes, _) = round_trip(&p, &symbols);
        let t = FreqTable::from_probabilities(&p).unwrap();
        let short = &bytes[..bytes.len() - 1];
        let res = RangeDecoder::new(short).and_then(|mut d| {
            for _ in 0..symbols.len() {
                d.decode(&t)?;
            }
            d.finish()
        });
        assert!(matches!(res, Err(AscError::Decode(_))));
    }

    proptest! {
        #[test]
        fn random_messages_round_trip(
            weights in prop::collection::vec(0.0f64..1.0, 2..40),
            raw in prop::collection::vec(any::<u32>(), 0..2000),
        ) {
            let n = weights.len();
            let symbols: Vec<usize> = raw.iter().map(|r| *r as usize % n).collect();
            let (_, out) = round_trip(&weights, &symbols);
            prop_assert_eq!(out, symbols);
        }
    }
}
