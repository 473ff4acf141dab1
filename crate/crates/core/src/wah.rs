//! Word-aligned hybrid (WAH) run-length encoding over 31-bit groups.
//!
//! A bitvector is cut into groups of 31 bits. Every group is stored either in
//! a *literal* word (MSB 0, the 31 payload bits hold the group verbatim) or as
//! part of a *fill* word (MSB 1, the next bit is the fill value and the low 30
//! bits count how many consecutive uniform groups the fill covers).
//!
//! Within a literal, the first bit of the group lives in payload bit 30 and
//! the last one in payload bit 0, so a literal prints left to right in row
//! order.
//!
//! Canonical form, which every constructor and operation in this module
//! produces:
//!
//! * runs of two or more identical uniform groups are always a single fill;
//! * a lone uniform group is a literal;
//! * the trailing partial group (when `bit_len % 31 != 0`) is always a literal
//!   whose unused low bits are zero.
//!
//! Because the form is canonical, two bitvectors holding the same bits compare
//! equal structurally.

use std::fmt;

use crate::error::{Error, Result};

/// Number of payload bits per WAH group.
pub const GROUP_BITS: u64 = 31;

const FILL_FLAG: u32 = 1 << 31;
const FILL_VALUE: u32 = 1 << 30;
const PAYLOAD_MASK: u32 = 0x7FFF_FFFF;
/// Largest run a single fill word can describe.
pub const MAX_RUN: u32 = (1 << 30) - 1;

/// Logical operator for [`WahBitvector::bitwise`] and segment combining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitOp {
    And,
    Or,
    Xor,
}

impl BitOp {
    #[inline]
    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            BitOp::And => a & b,
            BitOp::Or => a | b,
            BitOp::Xor => a ^ b,
        }
    }

    #[inline]
    pub fn apply_bit(self, a: bool, b: bool) -> bool {
        match self {
            BitOp::And => a & b,
            BitOp::Or => a | b,
            BitOp::Xor => a ^ b,
        }
    }

    #[inline]
    pub fn apply_u64(self, a: u64, b: u64) -> u64 {
        match self {
            BitOp::And => a & b,
            BitOp::Or => a | b,
            BitOp::Xor => a ^ b,
        }
    }
}

/// One encoded 32-bit WAH word.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct WahWord(u32);

impl WahWord {
    pub const fn from_raw(raw: u32) -> Self {
        WahWord(raw)
    }

    pub const fn raw(self) -> u32 {
        self.0
    }

    /// Literal word; bits above the 31-bit payload are discarded.
    pub const fn literal(payload: u32) -> Self {
        WahWord(payload & PAYLOAD_MASK)
    }

    /// Fill word of `run` uniform groups of `bit`. `run` must be in `1..=MAX_RUN`.
    pub fn fill(bit: bool, run: u32) -> Result<Self> {
        if run == 0 || run > MAX_RUN {
            return Err(Error::Codec(format!("fill run {run} outside 1..={MAX_RUN}")));
        }
        Ok(WahWord(make_fill(bit, run)))
    }

    pub const fn is_fill(self) -> bool {
        self.0 & FILL_FLAG != 0
    }

    pub const fn fill_bit(self) -> bool {
        self.0 & FILL_VALUE != 0
    }

    /// Number of 31-bit groups covered by a fill word.
    pub const fn run_len(self) -> u32 {
        self.0 & MAX_RUN
    }

    pub const fn payload(self) -> u32 {
        self.0 & PAYLOAD_MASK
    }
}

impl fmt::Debug for WahWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_fill() {
            write!(f, "fill({}, {})", self.fill_bit() as u8, self.run_len())
        } else {
            write!(f, "lit({:031b})", self.payload())
        }
    }
}

#[inline]
const fn make_fill(bit: bool, run: u32) -> u32 {
    FILL_FLAG | if bit { FILL_VALUE } else { 0 } | run
}

#[inline]
const fn uniform_payload(bit: bool) -> u32 {
    if bit {
        PAYLOAD_MASK
    } else {
        0
    }
}

/// Payload (first bit at payload bit 30) to row order (first bit at bit 0).
#[inline]
pub(crate) fn payload_to_lsb(payload: u32) -> u32 {
    payload.reverse_bits() >> 1
}

/// Row order (first bit at bit 0) to payload layout.
#[inline]
pub(crate) fn lsb_to_payload(bits: u32) -> u32 {
    (bits << 1).reverse_bits() & PAYLOAD_MASK
}

/// One decoded unit of a word stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Run {
    Fill { bit: bool, groups: u64 },
    /// Literal payload, already converted to row order (bit 0 = first row).
    Literal(u32),
}

/// Appends groups while maintaining canonical form.
#[derive(Default)]
pub(crate) struct Builder {
    words: Vec<u32>,
}

impl Builder {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Builder {
            words: Vec::with_capacity(n),
        }
    }

    pub(crate) fn push_fill(&mut self, bit: bool, mut groups: u64) {
        if groups == 0 {
            return;
        }
        if let Some(last) = self.words.last_mut() {
            let lw = WahWord(*last);
            if lw.is_fill() && lw.fill_bit() == bit {
                let room = (MAX_RUN - lw.run_len()) as u64;
                let take = room.min(groups);
                *last += take as u32;
                groups -= take;
            } else if !lw.is_fill() && lw.payload() == uniform_payload(bit) {
                self.words.pop();
                groups += 1;
            }
        }
        while groups > 0 {
            if groups == 1 {
                self.words.push(uniform_payload(bit));
                groups = 0;
            } else {
                let chunk = groups.min(MAX_RUN as u64);
                self.words.push(make_fill(bit, chunk as u32));
                groups -= chunk;
            }
        }
    }

    /// Pushes one full group given in payload layout.
    pub(crate) fn push_group(&mut self, payload: u32) {
        match payload {
            0 => self.push_fill(false, 1),
            PAYLOAD_MASK => self.push_fill(true, 1),
            p => self.words.push(p),
        }
    }

    /// Pushes one full group given in row order.
    #[inline]
    pub(crate) fn push_group_lsb(&mut self, bits: u32) {
        self.push_group(lsb_to_payload(bits))
    }

    /// Pushes the trailing partial group verbatim.
    pub(crate) fn push_tail_lsb(&mut self, bits: u32) {
        self.words.push(lsb_to_payload(bits));
    }

    pub(crate) fn finish(self, bit_len: u64) -> WahBitvector {
        WahBitvector {
            words: self.words,
            bit_len,
        }
    }
}

/// Walks the groups of a word stream.
pub(crate) struct RunCursor<'a> {
    words: &'a [u32],
    idx: usize,
    fill_left: u64,
    fill_bit: bool,
}

impl<'a> RunCursor<'a> {
    pub(crate) fn new(words: &'a [u32]) -> Self {
        RunCursor {
            words,
            idx: 0,
            fill_left: 0,
            fill_bit: false,
        }
    }

    /// Loads the next word if the current fill is exhausted. Returns `false` at the end.
    #[inline]
    fn refill(&mut self) -> bool {
        if self.fill_left > 0 {
            return true;
        }
        if self.idx >= self.words.len() {
            return false;
        }
        let w = WahWord(self.words[self.idx]);
        if w.is_fill() {
            self.idx += 1;
            self.fill_left = w.run_len() as u64;
            self.fill_bit = w.fill_bit();
        }
        true
    }

    /// Uniform groups available right now (0 when positioned on a literal).
    #[inline]
    pub(crate) fn fill_available(&mut self) -> Option<(bool, u64)> {
        if !self.refill() {
            return None;
        }
        Some((self.fill_bit, self.fill_left))
    }

    #[inline]
    pub(crate) fn skip_fill(&mut self, n: u64) {
        debug_assert!(n <= self.fill_left);
        self.fill_left -= n;
    }

    /// Next single group in row order.
    #[inline]
    pub(crate) fn next_group(&mut self) -> Option<u32> {
        if !self.refill() {
            return None;
        }
        if self.fill_left > 0 {
            self.fill_left -= 1;
            return Some(if self.fill_bit { PAYLOAD_MASK } else { 0 });
        }
        let w = self.words[self.idx];
        self.idx += 1;
        Some(payload_to_lsb(w))
    }

    /// Next maximal run.
    #[inline]
    pub(crate) fn next_run(&mut self) -> Option<Run> {
        if !self.refill() {
            return None;
        }
        if self.fill_left > 0 {
            let groups = self.fill_left;
            self.fill_left = 0;
            return Some(Run::Fill {
                bit: self.fill_bit,
                groups,
            });
        }
        let w = self.words[self.idx];
        self.idx += 1;
        Some(Run::Literal(payload_to_lsb(w)))
    }
}

/// A WAH-compressed bitvector.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct WahBitvector {
    words: Vec<u32>,
    bit_len: u64,
}

impl fmt::Debug for WahBitvector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WahBitvector")
            .field("bit_len", &self.bit_len)
            .field("words", &self.words().collect::<Vec<_>>())
            .finish()
    }
}

#[inline]
fn tail_bits(bit_len: u64) -> u32 {
    (bit_len % GROUP_BITS) as u32
}

#[inline]
fn low_mask(n: u32) -> u32 {
    if n >= 32 {
        u32::MAX
    } else {
        (1u32 << n) - 1
    }
}

impl WahBitvector {
    pub fn new() -> Self {
        Self::default()
    }

    /// `len` copies of `bit`.
    pub fn filled(len: u64, bit: bool) -> Self {
        let full = len / GROUP_BITS;
        let mut b = Builder::with_capacity(3);
        b.push_fill(bit, full);
        let t = tail_bits(len);
        if t > 0 {
            b.push_tail_lsb(if bit { low_mask(t) } else { 0 });
        }
        b.finish(len)
    }

    pub fn zeros(len: u64) -> Self {
        Self::filled(len, false)
    }

    pub fn encode(bits: &[bool]) -> Self {
        Self::encode_iter(bits.iter().copied(), bits.len() as u64)
    }

    /// Encodes exactly `len` bits taken from `bits`.
    pub fn encode_iter<I: IntoIterator<Item = bool>>(bits: I, len: u64) -> Self {
        let mut b = Builder::default();
        let mut it = bits.into_iter();
        let full = len / GROUP_BITS;
        for _ in 0..full {
            let mut g = 0u32;
            for k in 0..GROUP_BITS as u32 {
                if it.next().unwrap_or(false) {
                    g |= 1 << k;
                }
            }
            b.push_group_lsb(g);
        }
        let t = tail_bits(len);
        if t > 0 {
            let mut g = 0u32;
            for k in 0..t {
                if it.next().unwrap_or(false) {
                    g |= 1 << k;
                }
            }
            b.push_tail_lsb(g);
        }
        b.finish(len)
    }

    /// Builds a bitvector of `len` bits whose ones are the ascending `positions`.
    pub fn from_sorted_ones(positions: &[u64], len: u64) -> Result<Self> {
        let mut b = Builder::default();
        let full = len / GROUP_BITS;
        let mut i = 0;
        let mut group = 0u64;
        let mut prev: Option<u64> = None;
        while i < positions.len() {
            let p = positions[i];
            if p >= len {
                return Err(Error::OutOfRange { index: p, len });
            }
            if prev.is_some_and(|q| q >= p) {
                return Err(Error::Unsorted);
            }
            prev = Some(p);
            let g = p / GROUP_BITS;
            if g >= full {
                break;
            }
            b.push_fill(false, g - group);
            let mut bits = 0u32;
            while i < positions.len() && positions[i] / GROUP_BITS == g {
                if prev.is_some_and(|q| q > positions[i]) {
                    return Err(Error::Unsorted);
                }
                prev = Some(positions[i]);
                bits |= 1 << (positions[i] % GROUP_BITS);
                i += 1;
            }
            b.push_group_lsb(bits);
            group = g + 1;
        }
        b.push_fill(false, full - group);
        let t = tail_bits(len);
        if t > 0 {
            let mut bits = 0u32;
            while i < positions.len() {
                let p = positions[i];
                if p >= len {
                    return Err(Error::OutOfRange { index: p, len });
                }
                if prev.is_some_and(|q| q > p) {
                    return Err(Error::Unsorted);
                }
                prev = Some(p);
                bits |= 1 << (p % GROUP_BITS);
                i += 1;
            }
            b.push_tail_lsb(bits);
        }
        Ok(b.finish(len))
    }

    /// Builds from raw words, validating structure (not canonicality).
    pub fn from_words(words: Vec<WahWord>, bit_len: u64) -> Result<Self> {
        let v = WahBitvector {
            words: words.into_iter().map(|w| w.0).collect(),
            bit_len,
        };
        v.validate()?;
        Ok(v)
    }

    /// Checks fill runs and total group coverage against `bit_len`.
    pub fn validate(&self) -> Result<()> {
        let mut groups = 0u64;
        for (i, &w) in self.words.iter().enumerate() {
            let w = WahWord(w);
            if w.is_fill() {
                if w.run_len() == 0 {
                    return Err(Error::Codec(format!("fill word {i} has run length 0")));
                }
                groups += w.run_len() as u64;
            } else {
                groups += 1;
            }
        }
        let needed = self.bit_len.div_ceil(GROUP_BITS);
        if groups != needed {
            return Err(Error::Codec(format!(
                "words cover {groups} groups but bit_len {} needs {needed}",
                self.bit_len
            )));
        }
        let t = tail_bits(self.bit_len);
        if t > 0 {
            let last = WahWord(*self.words.last().expect("non-empty when groups > 0"));
            if last.is_fill() {
                return Err(Error::Codec("partial trailing group stored as fill".into()));
            }
            if payload_to_lsb(last.payload()) & !low_mask(t) != 0 {
                return Err(Error::Codec("unused tail bits are not zero".into()));
            }
        }
        Ok(())
    }

    /// True when the word stream is in the canonical form described in the module docs.
    pub fn is_canonical(&self) -> bool {
        if self.validate().is_err() {
            return false;
        }
        let n = self.words.len();
        let has_tail = tail_bits(self.bit_len) > 0;
        // uniform value of the previous word, if it was a fill or uniform literal
        let mut prev: Option<bool> = None;
        for (i, &raw) in self.words.iter().enumerate() {
            let w = WahWord(raw);
            let is_tail = has_tail && i == n - 1;
            let cur = if w.is_fill() {
                if w.run_len() == 1 {
                    return false;
                }
                Some(w.fill_bit())
            } else if !is_tail && (w.payload() == 0 || w.payload() == PAYLOAD_MASK) {
                Some(w.payload() != 0)
            } else {
                None
            };
            if cur.is_some() && prev == cur {
                return false;
            }
            prev = cur;
        }
        true
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    pub fn is_empty(&self) -> bool {
        self.bit_len == 0
    }

    pub fn words(&self) -> impl Iterator<Item = WahWord> + '_ {
        self.words.iter().map(|&w| WahWord(w))
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub(crate) fn cursor(&self) -> RunCursor<'_> {
        RunCursor::new(&self.words)
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.bit_len as usize);
        let mut cur = self.cursor();
        while let Some(run) = cur.next_run() {
            match run {
                Run::Fill { bit, groups } => {
                    out.extend(std::iter::repeat_n(bit, (groups * GROUP_BITS) as usize))
                }
                Run::Literal(bits) => out.extend((0..GROUP_BITS).map(|k| bits >> k & 1 == 1)),
            }
        }
        out.truncate(self.bit_len as usize);
        out
    }

    pub fn get_bit(&self, i: u64) -> Result<bool> {
        if i >= self.bit_len {
            return Err(Error::OutOfRange {
                index: i,
                len: self.bit_len,
            });
        }
        Ok(self.get_or_zero(i))
    }

    /// Bit `i`, treating positions past the end as zero.
    pub fn get_or_zero(&self, i: u64) -> bool {
        if i >= self.bit_len {
            return false;
        }
        let target = i / GROUP_BITS;
        let off = (i % GROUP_BITS) as u32;
        let mut g = 0u64;
        for &raw in &self.words {
            let w = WahWord(raw);
            if w.is_fill() {
                let run = w.run_len() as u64;
                if target < g + run {
                    return w.fill_bit();
                }
                g += run;
            } else {
                if g == target {
                    return (w.payload() >> (30 - off)) & 1 == 1;
                }
                g += 1;
            }
        }
        unreachable!("validated bitvector covers bit {i}")
    }

    pub fn flip_bit(&self, i: u64) -> Result<Self> {
        self.flip_many(&[i])
    }

    /// Flips every listed bit. `positions` must be strictly ascending.
    pub fn flip_many(&self, positions: &[u64]) -> Result<Self> {
        if positions.is_empty() {
            return Ok(self.clone());
        }
        for w in positions.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Unsorted);
            }
        }
        let last = *positions.last().unwrap();
        if last >= self.bit_len {
            return Err(Error::OutOfRange {
                index: last,
                len: self.bit_len,
            });
        }
        let full = self.bit_len / GROUP_BITS;
        let mut b = Builder::with_capacity(self.words.len() + 2 * positions.len());
        let mut cur = self.cursor();
        let mut group = 0u64;
        let mut pi = 0;
        while pi < positions.len() {
            let g = positions[pi] / GROUP_BITS;
            // copy everything before group g
            while group < g {
                match cur.fill_available() {
                    Some((bit, n)) if n > 0 => {
                        let take = n.min(g - group);
                        b.push_fill(bit, take);
                        cur.skip_fill(take);
                        group += take;
                    }
                    Some(_) => {
                        let bits = cur.next_group().unwrap();
                        b.push_group_lsb(bits);
                        group += 1;
                    }
                    None => unreachable!(),
                }
            }
            let mut bits = cur.next_group().expect("group in range");
            while pi < positions.len() && positions[pi] / GROUP_BITS == g {
                bits ^= 1 << (positions[pi] % GROUP_BITS);
                pi += 1;
            }
            if g < full {
                b.push_group_lsb(bits);
            } else {
                b.push_tail_lsb(bits);
            }
            group += 1;
        }
        // copy the remainder
        while group < full {
            match cur.fill_available() {
                Some((bit, n)) if n > 0 => {
                    b.push_fill(bit, n);
                    cur.skip_fill(n);
                    group += n;
                }
                Some(_) => {
                    b.push_group_lsb(cur.next_group().unwrap());
                    group += 1;
                }
                None => unreachable!(),
            }
        }
        if group == full && tail_bits(self.bit_len) > 0 {
            b.push_tail_lsb(cur.next_group().unwrap());
        }
        Ok(b.finish(self.bit_len))
    }

    pub fn append_bit(&self, bit: bool) -> Self {
        let mut v = self.clone();
        v.push(bit);
        v
    }

    /// In-place append.
    pub fn push(&mut self, bit: bool) {
        let t = tail_bits(self.bit_len);
        if t == 0 {
            self.words.push(if bit { 1 << 30 } else { 0 });
        } else {
            let last = self.words.last_mut().unwrap();
            if bit {
                *last |= 1 << (30 - t);
            }
        }
        self.bit_len += 1;
        if tail_bits(self.bit_len) == 0 {
            // the tail group is complete: canonicalise it
            let payload = self.words.pop().unwrap();
            let mut b = Builder {
                words: std::mem::take(&mut self.words),
            };
            b.push_group(payload);
            self.words = b.words;
        }
    }

    /// Grows the bitvector to `new_len` bits, padding with zeros.
    pub fn extend_zeros(&mut self, new_len: u64) {
        if new_len <= self.bit_len {
            return;
        }
        let t = tail_bits(self.bit_len);
        if t > 0 {
            let needed = GROUP_BITS - t as u64;
            if new_len - self.bit_len < needed {
                self.bit_len = new_len;
                return;
            }
            // complete the tail group
            let payload = self.words.pop().unwrap();
            self.bit_len += needed;
            let mut b = Builder {
                words: std::mem::take(&mut self.words),
            };
            b.push_group(payload);
            self.words = b.words;
        }
        let groups = (new_len - self.bit_len) / GROUP_BITS;
        let mut b = Builder {
            words: std::mem::take(&mut self.words),
        };
        b.push_fill(false, groups);
        self.bit_len += groups * GROUP_BITS;
        if self.bit_len < new_len {
            b.push_tail_lsb(0);
            self.bit_len = new_len;
        }
        self.words = b.words;
    }

    /// Sets bit `pos` at or past the end: zero-pads to `pos` and appends a 1.
    pub fn push_one_at(&mut self, pos: u64) {
        debug_assert!(pos >= self.bit_len);
        self.extend_zeros(pos);
        self.push(true);
    }

    /// Word-at-a-time logical operation on compressed operands of equal length.
    pub fn bitwise(&self, op: BitOp, other: &Self) -> Result<Self> {
        if self.bit_len != other.bit_len {
            return Err(Error::ShapeMismatch(format!(
                "bit lengths {} and {}",
                self.bit_len, other.bit_len
            )));
        }
        let full = self.bit_len / GROUP_BITS;
        let mut b = Builder::with_capacity(self.words.len().max(other.words.len()));
        let mut ca = self.cursor();
        let mut cb = other.cursor();
        let mut group = 0u64;
        while group < full {
            let fa = ca.fill_available().unwrap();
            let fb = cb.fill_available().unwrap();
            match (fa, fb) {
                ((ba, na), (bb, nb)) if na > 0 && nb > 0 => {
                    let n = na.min(nb);
                    b.push_fill(op.apply_bit(ba, bb), n);
                    ca.skip_fill(n);
                    cb.skip_fill(n);
                    group += n;
                }
                ((ba, na), _) if na > 0 && (op == BitOp::And && !ba || op == BitOp::Or && ba) => {
                    // absorbing fill on the left: skip the right side without decoding
                    let n = na.min(full - group);
                    let mut left = n;
                    while left > 0 {
                        match cb.fill_available().unwrap() {
                            (_, m) if m > 0 => {
                                let k = m.min(left);
                                cb.skip_fill(k);
                                left -= k;
                            }
                            _ => {
                                cb.next_group();
                                left -= 1;
                            }
                        }
                    }
                    ca.skip_fill(n);
                    b.push_fill(ba, n);
                    group += n;
                }
                (_, (bb, nb)) if nb > 0 && (op == BitOp::And && !bb || op == BitOp::Or && bb) => {
                    let n = nb.min(full - group);
                    let mut left = n;
                    while left > 0 {
                        match ca.fill_available().unwrap() {
                            (_, m) if m > 0 => {
                                let k = m.min(left);
                                ca.skip_fill(k);
                                left -= k;
                            }
                            _ => {
                                ca.next_group();
                                left -= 1;
                            }
                        }
                    }
                    cb.skip_fill(n);
                    b.push_fill(bb, n);
                    group += n;
                }
                _ => {
                    let ga = ca.next_group().unwrap();
                    let gb = cb.next_group().unwrap();
                    b.push_group_lsb(op.apply(ga, gb));
                    group += 1;
                }
            }
        }
        if tail_bits(self.bit_len) > 0 {
            let ga = ca.next_group().unwrap();
            let gb = cb.next_group().unwrap();
            b.push_tail_lsb(op.apply(ga, gb));
        }
        Ok(b.finish(self.bit_len))
    }

    /// True if any bit is set. Stops at the first non-zero word.
    pub fn any(&self) -> bool {
        self.words.iter().any(|&raw| {
            let w = WahWord(raw);
            if w.is_fill() {
                w.fill_bit()
            } else {
                w.payload() != 0
            }
        })
    }

    pub fn count_ones(&self) -> u64 {
        let mut n = 0u64;
        for &raw in &self.words {
            let w = WahWord(raw);
            if w.is_fill() {
                if w.fill_bit() {
                    n += w.run_len() as u64 * GROUP_BITS;
                }
            } else {
                n += w.payload().count_ones() as u64;
            }
        }
        n
    }

    /// Fraction of set bits; 0 for an empty bitvector.
    pub fn density(&self) -> f64 {
        if self.bit_len == 0 {
            0.0
        } else {
            self.count_ones() as f64 / self.bit_len as f64
        }
    }

    /// Ascending positions of set bits, each shifted by `offset`.
    pub fn push_ones_into(&self, offset: u64, out: &mut Vec<u64>) {
        let mut cur = self.cursor();
        let mut base = offset;
        while let Some(run) = cur.next_run() {
            match run {
                Run::Fill { bit, groups } => {
                    let span = groups * GROUP_BITS;
                    if bit {
                        out.extend(base..base + span);
                    }
                    base += span;
                }
                Run::Literal(mut bits) => {
                    while bits != 0 {
                        let k = bits.trailing_zeros() as u64;
                        out.push(base + k);
                        bits &= bits - 1;
                    }
                    base += GROUP_BITS;
                }
            }
        }
    }

    pub fn to_row_ids(&self) -> Vec<u64> {
        let mut out = Vec::new();
        self.push_ones_into(0, &mut out);
        out
    }

    /// Expands into 64-bit blocks, bit `i` at `block[i / 64] >> (i % 64)`.
    pub fn to_blocks(&self) -> Vec<u64> {
        let mut blocks = vec![0u64; self.bit_len.div_ceil(64) as usize];
        self.or_into_blocks(&mut blocks);
        blocks
    }

    pub(crate) fn or_into_blocks(&self, blocks: &mut [u64]) {
        let mut cur = self.cursor();
        let mut pos = 0u64;
        while let Some(run) = cur.next_run() {
            match run {
                Run::Fill { bit, groups } => {
                    let span = groups * GROUP_BITS;
                    if bit {
                        set_range(blocks, pos, pos + span.min(self.bit_len - pos));
                    }
                    pos += span;
                }
                Run::Literal(bits) => {
                    or_bits(blocks, pos, bits as u64);
                    pos += GROUP_BITS;
                }
            }
        }
    }

    /// Applies `op` between `blocks` (left operand) and `self` (right operand) in place.
    pub(crate) fn apply_to_blocks(&self, op: BitOp, blocks: &mut [u64]) {
        match op {
            BitOp::Or => self.or_into_blocks(blocks),
            BitOp::And | BitOp::Xor => {
                let mut cur = self.cursor();
                let mut pos = 0u64;
                while let Some(run) = cur.next_run() {
                    match run {
                        Run::Fill { bit, groups } => {
                            let span = groups * GROUP_BITS;
                            let end = (pos + span).min(self.bit_len);
                            match (op, bit) {
                                (BitOp::And, false) => clear_range(blocks, pos, end),
                                (BitOp::Xor, true) => toggle_range(blocks, pos, end),
                                _ => {}
                            }
                            pos += span;
                        }
                        Run::Literal(bits) => {
                            if op == BitOp::And {
                                and_bits(blocks, pos, bits as u64, GROUP_BITS as u32);
                            } else {
                                xor_bits(blocks, pos, bits as u64);
                            }
                            pos += GROUP_BITS;
                        }
                    }
                }
            }
        }
    }

    /// Re-compresses a block expansion of `bit_len` bits.
    pub fn from_blocks(blocks: &[u64], bit_len: u64) -> Self {
        let full = bit_len / GROUP_BITS;
        let mut b = Builder::default();
        let mut g = 0u64;
        while g < full {
            let pos = g * GROUP_BITS;
            // fast path: whole zero 64-bit blocks
            let wi = (pos / 64) as usize;
            if pos.is_multiple_of(64) && blocks[wi] == 0 {
                let mut zero_words = 0u64;
                while (wi + zero_words as usize) < blocks.len() && blocks[wi + zero_words as usize] == 0 {
                    zero_words += 1;
                }
                let groups = ((zero_words * 64) / GROUP_BITS).min(full - g);
                if groups > 0 {
                    b.push_fill(false, groups);
                    g += groups;
                    continue;
                }
            }
            b.push_group_lsb(read_bits(blocks, pos, GROUP_BITS as u32));
            g += 1;
        }
        let t = tail_bits(bit_len);
        if t > 0 {
            b.push_tail_lsb(read_bits(blocks, full * GROUP_BITS, t));
        }
        b.finish(bit_len)
    }

    /// Little-endian serialised form: 64-bit `bit_len` followed by the 32-bit words.
    pub fn serialize_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.bit_len.to_le_bytes());
        for &w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.words.len());
        self.serialize_into(&mut out);
        out
    }

    /// Reads one serialised bitvector from the front of `bytes`, returning it and
    /// the number of bytes consumed. The word stream is self-delimiting: words are
    /// read until they cover `bit_len`.
    pub fn deserialize(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 8 {
            return Err(Error::Codec("truncated bit length".into()));
        }
        let bit_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let needed = bit_len.div_ceil(GROUP_BITS);
        let mut groups = 0u64;
        let mut words = Vec::new();
        let mut off = 8;
        while groups < needed {
            let Some(chunk) = bytes.get(off..off + 4) else {
                return Err(Error::Codec("truncated word stream".into()));
            };
            let w = u32::from_le_bytes(chunk.try_into().unwrap());
            let ww = WahWord(w);
            if ww.is_fill() {
                if ww.run_len() == 0 {
                    return Err(Error::Codec(format!("fill word at byte {off} has run length 0")));
                }
                groups += ww.run_len() as u64;
            } else {
                groups += 1;
            }
            words.push(w);
            off += 4;
        }
        let v = WahBitvector { words, bit_len };
        v.validate()?;
        Ok((v, off))
    }
}

#[inline]
fn set_range(blocks: &mut [u64], start: u64, end: u64) {
    modify_range(blocks, start, end, |w, m| w | m)
}

#[inline]
fn clear_range(blocks: &mut [u64], start: u64, end: u64) {
    modify_range(blocks, start, end, |w, m| w & !m)
}

#[inline]
fn toggle_range(blocks: &mut [u64], start: u64, end: u64) {
    modify_range(blocks, start, end, |w, m| w ^ m)
}

fn modify_range(blocks: &mut [u64], start: u64, end: u64, f: impl Fn(u64, u64) -> u64) {
    if start >= end {
        return;
    }
    let (sw, ew) = ((start / 64) as usize, ((end - 1) / 64) as usize);
    let smask = u64::MAX << (start % 64);
    let emask = u64::MAX >> (63 - (end - 1) % 64);
    if sw == ew {
        blocks[sw] = f(blocks[sw], smask & emask);
        return;
    }
    blocks[sw] = f(blocks[sw], smask);
    for w in &mut blocks[sw + 1..ew] {
        *w = f(*w, u64::MAX);
    }
    blocks[ew] = f(blocks[ew], emask);
}

#[inline]
fn or_bits(blocks: &mut [u64], pos: u64, bits: u64) {
    if bits == 0 {
        return;
    }
    let wi = (pos / 64) as usize;
    let off = pos % 64;
    blocks[wi] |= bits << off;
    if off > 33 {
        if let Some(next) = blocks.get_mut(wi + 1) {
            *next |= bits >> (64 - off);
        }
    }
}

#[inline]
fn xor_bits(blocks: &mut [u64], pos: u64, bits: u64) {
    if bits == 0 {
        return;
    }
    let wi = (pos / 64) as usize;
    let off = pos % 64;
    blocks[wi] ^= bits << off;
    if off > 33 {
        if let Some(next) = blocks.get_mut(wi + 1) {
            *next ^= bits >> (64 - off);
        }
    }
}

#[inline]
fn and_bits(blocks: &mut [u64], pos: u64, bits: u64, width: u32) {
    let mask = (1u64 << width) - 1;
    let wi = (pos / 64) as usize;
    let off = pos % 64;
    blocks[wi] &= !(mask << off) | (bits << off);
    if off + width as u64 > 64 {
        if let Some(next) = blocks.get_mut(wi + 1) {
            let sh = 64 - off;
            *next &= !(mask >> sh) | (bits >> sh);
        }
    }
}

#[inline]
fn read_bits(blocks: &[u64], pos: u64, width: u32) -> u32 {
    let wi = (pos / 64) as usize;
    let off = pos % 64;
    let mut v = blocks[wi] >> off;
    if off + width as u64 > 64 {
        if let Some(&next) = blocks.get(wi + 1) {
            v |= next << (64 - off);
        }
    }
    (v & ((1u64 << width) - 1)) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Reference codec: one group at a time, no run merging tricks.
    fn naive_encode(bits: &[bool]) -> Vec<u32> {
        let len = bits.len();
        let full = len / 31;
        let mut groups: Vec<u32> = (0..full)
            .map(|g| {
                let mut p = 0u32;
                for k in 0..31 {
                    if bits[g * 31 + k] {
                        p |= 1 << (30 - k);
                    }
                }
                p
            })
            .collect();
        let mut out: Vec<u32> = Vec::new();
        let mut i = 0;
        while i < groups.len() {
            let p = groups[i];
            if p == 0 || p == PAYLOAD_MASK {
                let mut j = i;
                while j < groups.len() && groups[j] == p {
                    j += 1;
                }
                let run = (j - i) as u32;
                if run == 1 {
                    out.push(p);
                } else {
                    out.push(0x8000_0000 | if p != 0 { 1 << 30 } else { 0 } | run);
                }
                i = j;
            } else {
                out.push(p);
                i += 1;
            }
        }
        if !len.is_multiple_of(31) {
            let mut p = 0u32;
            for k in 0..len % 31 {
                if bits[full * 31 + k] {
                    p |= 1 << (30 - k);
                }
            }
            out.push(p);
        }
        groups.clear();
        out
    }

    fn naive_decode(words: &[u32], len: usize) -> Vec<bool> {
        let mut out = Vec::new();
        for &w in words {
            if w & 0x8000_0000 != 0 {
                let bit = w & (1 << 30) != 0;
                for _ in 0..(w & MAX_RUN) * 31 {
                    out.push(bit);
                }
            } else {
                for k in 0..31 {
                    out.push(w >> (30 - k) & 1 == 1);
                }
            }
        }
        out.truncate(len);
        out
    }

    fn random_bits(rng: &mut impl Rng, len: usize, density: f64) -> Vec<bool> {
        (0..len).map(|_| rng.gen_bool(density)).collect()
    }

    fn raw_words(v: &WahBitvector) -> Vec<u32> {
        v.words().map(|w| w.raw()).collect()
    }

    #[test]
    fn encode_empty() {
        let v = WahBitvector::encode(&[]);
        assert_eq!(v.word_count(), 0);
        assert_eq!(v.bit_len(), 0);
        assert!(v.decode().is_empty());
    }

    #[test]
    fn encode_62_zeros_is_single_fill() {
        let v = WahBitvector::encode(&[false; 62]);
        assert_eq!(raw_words(&v), vec![make_fill(false, 2)]);
        assert_eq!(v.bit_len(), 62);
        assert_eq!(v.decode(), vec![false; 62]);
    }

    #[test]
    fn decode_rejects_zero_run() {
        let err = WahBitvector::from_words(vec![WahWord::from_raw(0x8000_0000)], 0).unwrap_err();
        assert!(matches!(err, Error::Codec(_)));
        assert!(WahWord::fill(true, 0).is_err());
    }

    #[test]
    fn random_93_bits_match_reference_codec() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        for _ in 0..200 {
            let bits = random_bits(&mut rng, 93, 0.5);
            let v = WahBitvector::encode(&bits);
            assert_eq!(raw_words(&v), naive_encode(&bits));
            assert_eq!(naive_decode(&raw_words(&v), 93), bits);
            assert_eq!(v.decode(), bits);
        }
    }

    #[test]
    fn round_trip_100k_random_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bits = random_bits(&mut rng, 100_000, 0.01);
        let v = WahBitvector::encode(&bits);
        assert!(v.is_canonical());
        assert_eq!(v.decode(), bits);
    }

    #[test]
    fn flip_bit_zero_of_zero_fill() {
        let v = WahBitvector::zeros(62);
        let f = v.flip_bit(0).unwrap();
        let d = f.decode();
        assert_eq!(d.iter().filter(|&&b| b).count(), 1);
        assert!(d[0]);
        assert_eq!(raw_words(&f), vec![1 << 30, 0]);
        assert!(f.is_canonical());
        assert_eq!(f.flip_bit(0).unwrap(), v);
    }

    #[test]
    fn flip_out_of_range() {
        let v = WahBitvector::zeros(10);
        assert!(matches!(v.flip_bit(10), Err(Error::OutOfRange { index: 10, len: 10 })));
        assert!(v.get_bit(10).is_err());
    }

    #[test]
    fn get_bit_inside_ones_fill() {
        let v = WahBitvector::filled(93, true);
        assert_eq!(raw_words(&v), vec![make_fill(true, 3)]);
        assert!(v.get_bit(50).unwrap());
    }

    #[test]
    fn append_to_empty() {
        let v = WahBitvector::new().append_bit(true);
        assert_eq!(v.bit_len(), 1);
        assert_eq!(v.decode(), vec![true]);
    }

    #[test]
    fn append_zero_to_zero_fill_canonicalises_at_full_group() {
        let mut v = WahBitvector::zeros(62);
        v.push(false);
        assert_eq!(v.bit_len(), 63);
        assert_eq!(v.decode(), vec![false; 63]);
        for _ in 63..93 {
            v.push(false);
        }
        assert_eq!(raw_words(&v), vec![make_fill(false, 3)]);
        assert!(v.is_canonical());
    }

    #[test]
    fn random_appends_equal_rebuild() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v = WahBitvector::new();
        let mut bits = Vec::new();
        for i in 0..10_000 {
            // alternate between sparse and dense stretches so fills appear
            let p = if (i / 500) % 2 == 0 { 0.002 } else { 0.6 };
            let b = rng.gen_bool(p);
            v.push(b);
            bits.push(b);
            if i % 997 == 0 {
                assert_eq!(v, WahBitvector::encode(&bits));
            }
        }
        assert_eq!(v, WahBitvector::encode(&bits));
    }

    #[test]
    fn bitwise_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bits = random_bits(&mut rng, 5000, 0.05);
        let v = WahBitvector::encode(&bits);
        let zeros = WahBitvector::zeros(5000);
        assert_eq!(v.bitwise(BitOp::Xor, &zeros).unwrap(), v);
        assert_eq!(v.bitwise(BitOp::And, &v).unwrap(), v);
        assert_eq!(v.bitwise(BitOp::Xor, &v).unwrap(), zeros);
        assert!(v.bitwise(BitOp::Or, &WahBitvector::zeros(4999)).is_err());
    }

    #[test]
    fn or_of_fifty_sparse_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let len = 20_000;
        let mut acc = vec![false; len];
        let mut v = WahBitvector::zeros(len as u64);
        for _ in 0..50 {
            let bits = random_bits(&mut rng, len, 0.001);
            for (a, b) in acc.iter_mut().zip(&bits) {
                *a |= b;
            }
            v = v.bitwise(BitOp::Or, &WahBitvector::encode(&bits)).unwrap();
        }
        assert_eq!(v.decode(), acc);
        assert!(v.is_canonical());
    }

    #[test]
    fn count_and_density() {
        let z = WahBitvector::zeros(100);
        assert_eq!((z.count_ones(), z.density()), (0, 0.0));
        let o = WahBitvector::filled(62, true);
        assert_eq!((o.count_ones(), o.density()), (62, 1.0));
        assert_eq!(WahBitvector::new().density(), 0.0);
    }

    #[test]
    fn extend_zeros_matches_rebuild() {
        for start in [0u64, 5, 31, 40, 62, 100] {
            for end in [start, start + 1, start + 30, start + 31, start + 200] {
                let mut bits: Vec<bool> = (0..start).map(|i| i % 3 == 0).collect();
                let mut v = WahBitvector::encode(&bits);
                v.extend_zeros(end);
                bits.resize(end as usize, false);
                assert_eq!(v, WahBitvector::encode(&bits), "{start}->{end}");
            }
        }
    }

    #[test]
    fn serialisation_layout() {
        let v = WahBitvector::zeros(62);
        let bytes = v.to_bytes();
        assert_eq!(&bytes[..8], &62u64.to_le_bytes());
        assert_eq!(&bytes[8..], &make_fill(false, 2).to_le_bytes());
        let (back, used) = WahBitvector::deserialize(&bytes).unwrap();
        assert_eq!((back, used), (v, 12));
        assert!(WahBitvector::deserialize(&bytes[..10]).is_err());
    }

    #[test]
    fn from_sorted_ones_validates() {
        assert!(matches!(
            WahBitvector::from_sorted_ones(&[3, 2], 10),
            Err(Error::Unsorted)
        ));
        assert!(WahBitvector::from_sorted_ones(&[10], 10).is_err());
        let v = WahBitvector::from_sorted_ones(&[0, 31, 62], 70).unwrap();
        assert_eq!(v.to_row_ids(), vec![0, 31, 62]);
    }

    fn bits_strategy(max: usize) -> impl Strategy<Value = Vec<bool>> {
        (0..max, 0.0f64..1.0).prop_flat_map(|(len, d)| {
            let d = d * d * d; // bias towards sparse
            proptest::collection::vec(proptest::bool::weighted(d.max(1e-4)), len)
        })
    }

    proptest! {
        #[test]
        fn prop_round_trip_and_canonical(bits in bits_strategy(3000)) {
            let v = WahBitvector::encode(&bits);
            prop_assert!(v.is_canonical());
            prop_assert_eq!(v.decode(), bits.clone());
            prop_assert_eq!(raw_words(&v), naive_encode(&bits));
            let ones: Vec<u64> = bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i as u64).collect();
            prop_assert_eq!(WahBitvector::from_sorted_ones(&ones, bits.len() as u64).unwrap(), v.clone());
            prop_assert_eq!(v.to_row_ids(), ones.clone());
            prop_assert_eq!(v.count_ones(), ones.len() as u64);
            prop_assert_eq!(WahBitvector::from_blocks(&v.to_blocks(), v.bit_len()), v.clone());
            let (back, _) = WahBitvector::deserialize(&v.to_bytes()).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn prop_flip_is_involution(bits in bits_strategy(2000), seed in any::<u64>()) {
            prop_assume!(!bits.is_empty());
            let v = WahBitvector::encode(&bits);
            let i = seed % bits.len() as u64;
            let f = v.flip_bit(i).unwrap();
            prop_assert!(f.is_canonical());
            let mut expect = bits.clone();
            expect[i as usize] = !expect[i as usize];
            prop_assert_eq!(f.decode(), expect);
            prop_assert_eq!(f.get_bit(i).unwrap(), !bits[i as usize]);
            prop_assert_eq!(f.flip_bit(i).unwrap(), v);
        }

        #[test]
        fn prop_flip_many_matches_loop(bits in bits_strategy(2000), picks in proptest::collection::btree_set(any::<u64>(), 0..40)) {
            prop_assume!(!bits.is_empty());
            let v = WahBitvector::encode(&bits);
            let mut rows: Vec<u64> = picks.into_iter().map(|p| p % bits.len() as u64).collect();
            rows.sort_unstable();
            rows.dedup();
            let mut expect = v.clone();
            for &r in &rows {
                expect = expect.flip_bit(r).unwrap();
            }
            prop_assert_eq!(v.flip_many(&rows).unwrap(), expect);
        }

        #[test]
        fn prop_bitwise_matches_decoded(a in bits_strategy(2500), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(0.0..0.2);
            let b: Vec<bool> = (0..a.len()).map(|_| rng.gen_bool(d)).collect();
            let (va, vb) = (WahBitvector::encode(&a), WahBitvector::encode(&b));
            for op in [BitOp::And, BitOp::Or, BitOp::Xor] {
                let r = va.bitwise(op, &vb).unwrap();
                prop_assert!(r.is_canonical());
                let expect: Vec<bool> = a.iter().zip(&b).map(|(&x, &y)| op.apply_bit(x, y)).collect();
                prop_assert_eq!(r.decode(), expect.clone());
                let mut blocks = va.to_blocks();
                vb.apply_to_blocks(op, &mut blocks);
                prop_assert_eq!(WahBitvector::from_blocks(&blocks, va.bit_len()).decode(), expect);
            }
        }
    }
}
