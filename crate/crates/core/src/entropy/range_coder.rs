//! 32-bit range coder over 16-bit frequency tables.
//!
//! The encoder keeps a 33-bit `low` and propagates carries through a cached
//! byte plus a run of pending 0xFF bytes. The always-zero leading cache byte
//! is not emitted, so an empty message flushes to exactly four bytes.

use thiserror::Error;

pub const TOTAL_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << TOTAL_BITS;
const TOP: u32 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RangeCoderError {
    #[error("symbol {symbol} at position {position} outside table of {size} symbols")]
    SymbolOutOfTable {
        position: usize,
        symbol: usize,
        size: usize,
    },
    #[error("corrupt range-coded data at symbol {position}")]
    Corrupt { position: usize },
    #[error("range-coded data ended early at symbol {position}")]
    Truncated { position: usize },
    #[error("range-coded data does not end cleanly ({unread} unread bytes)")]
    Trailing { unread: usize },
    #[error("invalid frequency table: {0}")]
    Table(String),
}

/// Cumulative frequencies summing to 2^16, every symbol at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantizes a probability vector. Each symbol gets one count up front;
    /// the remainder is split proportionally by largest remainder, ties to
    /// the lower symbol.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self, RangeCoderError> {
        let n = pmf.len();
        if n == 0 || n > TOTAL as usize {
            return Err(RangeCoderError::Table(format!("{n} symbols")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(RangeCoderError::Table("negative or non-finite mass".into()));
        }
        let sum: f64 = pmf.iter().sum();
        let spare = (TOTAL as usize - n) as f64;
        let uniform = !(sum > 0.0);
        let mut freq = vec![1u32; n];
        let mut frac = Vec::with_capacity(n);
        let mut used = n as u32;
        for (i, &p) in pmf.iter().enumerate() {
            let share = if uniform { 1.0 / n as f64 } else { p / sum };
            let x = share * spare;
            let whole = x.floor();
            freq[i] += whole as u32;
            used += whole as u32;
            frac.push((x - whole, i));
        }
        frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut left = TOTAL - used;
        for &(_, i) in frac.iter().cycle() {
            if left == 0 {
                break;
            }
            freq[i] += 1;
            left -= 1;
        }
        Self::from_frequencies(&freq)
    }

    pub fn from_frequencies(freq: &[u32]) -> Result<Self, RangeCoderError> {
        let mut cum = Vec::with_capacity(freq.len() + 1);
        cum.push(0u32);
        for &f in freq {
            if f == 0 {
                return Err(RangeCoderError::Table("zero frequency".into()));
            }
            cum.push(cum.last().unwrap() + f);
        }
        if *cum.last().unwrap() != TOTAL {
            return Err(RangeCoderError::Table(format!(
                "frequencies sum to {}, expected {TOTAL}",
                cum.last().unwrap()
            )));
        }
        Ok(Self { cum })
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Ideal code length of `s` under the quantized table, in bits.
    pub fn bits(&self, s: usize) -> f64 {
        -(self.freq(s) as f64 / TOTAL as f64).log2()
    }

    fn lookup(&self, v: u32) -> usize {
        self.cum.partition_point(|&c| c <= v) - 1
    }
}

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    count: usize,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
            count: 0,
        }
    }

    pub fn encode(&mut self, symbol: usize, table: &FreqTable) -> Result<(), RangeCoderError> {
        if symbol >= table.len() {
            return Err(RangeCoderError::SymbolOutOfTable {
                position: self.count,
                symbol,
                size: table.len(),
            });
        }
        let r = self.range >> TOTAL_BITS;
        self.low += r as u64 * table.cum[symbol] as u64;
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        self.count += 1;
        Ok(())
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        debug_assert_eq!(self.out[0], 0);
        self.out.remove(0);
        self.out
    }
}

pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
    count: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, RangeCoderError> {
        if data.len() < 4 {
            return Err(RangeCoderError::Truncated { position: 0 });
        }
        Ok(Self {
            data,
            pos: 4,
            range: u32::MAX,
            code: u32::from_be_bytes(data[..4].try_into().unwrap()),
            count: 0,
        })
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<usize, RangeCoderError> {
        let position = self.count;
        let r = self.range >> TOTAL_BITS;
        let v = self.code / r;
        if v >= TOTAL || self.code >= self.range {
            return Err(RangeCoderError::Corrupt { position });
        }
        let s = table.lookup(v);
        self.code -= r * table.cum[s];
        self.range = r * table.freq(s);
        while self.range < TOP {
            let byte = *self
                .data
                .get(self.pos)
                .ok_or(RangeCoderError::Truncated { position })?;
            self.pos += 1;
            self.range <<= 8;
            self.code = (self.code << 8) | byte as u32;
        }
        self.count += 1;
        Ok(s)
    }

    /// Checks that the stream was consumed exactly and ended on the value
    /// the encoder flushed.
    pub fn finish(self) -> Result<(), RangeCoderError> {
        if self.pos != self.data.len() {
            return Err(RangeCoderError::Trailing {
                unread: self.data.len() - self.pos,
            });
        }
        if self.code != 0 {
            return Err(RangeCoderError::Corrupt {
                position: self.count,
            });
        }
        Ok(())
    }
}

pub fn encode_symbols(symbols: &[usize], table: &FreqTable) -> Result<Vec<u8>, RangeCoderError> {
    let mut enc = Encoder::new();
    for &s in symbols {
        enc.encode(s, table)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(
    data: &[u8],
    count: usize,
    table: &FreqTable,
) -> Result<Vec<usize>, RangeCoderError> {
    let mut dec = Decoder::new(data)?;
    let out = (0..count)
        .map(|_| dec.decode(table))
        .collect::<Result<Vec<_>, _>>()?;
    dec.finish()?;
    Ok(out)
}
