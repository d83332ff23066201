//! Bit-packed binary tensors and the xnor/popcount kernels that stand in for
//! floating-point matrix multiplication.
//!
//! Bits are stored in 64-bit words, little-endian within the word: logical
//! element `i` lives in word `i / 64` at bit `i % 64`. Bits past the logical
//! length are always zero, so whole-word popcounts never see garbage. Every
//! kernel that can set padding bits (xnor, complement) masks the tail word
//! before returning.
//!
//! For the ±1 encoding the dot product of two planes of length `n` is
//! `2 * popcount(xnor(a, b)) - n`, which the hot loop evaluates as
//! `n - 2 * popcount(a ^ b)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const WORD_BITS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// bit 1 is +1, bit 0 is -1
    Signed,
    /// bit value is the code value, {0, 1}
    Unsigned,
}

impl Encoding {
    pub fn name(self) -> &'static str {
        match self {
            Encoding::Signed => "SIGNED",
            Encoding::Unsigned => "UNSIGNED",
        }
    }

    /// Real value a bit decodes to.
    #[inline]
    pub fn decode(self, bit: bool) -> f64 {
        match (self, bit) {
            (_, true) => 1.0,
            (Encoding::Signed, false) => -1.0,
            (Encoding::Unsigned, false) => 0.0,
        }
    }

    fn encode(self, v: f64) -> Option<bool> {
        match self {
            Encoding::Signed if v == 1.0 => Some(true),
            Encoding::Signed if v == -1.0 => Some(false),
            Encoding::Unsigned if v == 1.0 => Some(true),
            Encoding::Unsigned if v == 0.0 => Some(false),
            _ => None,
        }
    }
}

#[inline]
pub fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the final word of a `len`-bit plane.
#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[inline]
fn canonicalize(words: &mut [u64], len: usize) {
    if let Some(last) = words.last_mut() {
        *last &= tail_mask(len);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitPlane {
    words: Vec<u64>,
    len: usize,
    encoding: Encoding,
}

impl BitPlane {
    pub fn zeros(len: usize, encoding: Encoding) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
            encoding,
        }
    }

    pub fn ones(len: usize, encoding: Encoding) -> Self {
        let mut words = vec![u64::MAX; words_for(len)];
        canonicalize(&mut words, len);
        Self { words, len, encoding }
    }

    pub fn from_fn(len: usize, encoding: Encoding, f: impl Fn(usize) -> bool) -> Self {
        let mut words = vec![0u64; words_for(len)];
        for i in 0..len {
            if f(i) {
                words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        Self { words, len, encoding }
    }

    /// Build from raw words; padding bits are cleared.
    pub fn from_words(mut words: Vec<u64>, len: usize, encoding: Encoding) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::LengthMismatch {
                left: words.len(),
                right: words_for(len),
            });
        }
        canonicalize(&mut words, len);
        Ok(Self { words, len, encoding })
    }

    /// Pack a vector of code values (±1 for signed, {0,1} for unsigned).
    pub fn pack(values: &[f64], encoding: Encoding) -> Result<Self> {
        let mut words = vec![0u64; words_for(values.len())];
        for (i, &v) in values.iter().enumerate() {
            match encoding.encode(v) {
                Some(true) => words[i / WORD_BITS] |= 1 << (i % WORD_BITS),
                Some(false) => {}
                None => {
                    return Err(Error::InvalidCode {
                        index: i,
                        value: v,
                        encoding: encoding.name(),
                    })
                }
            }
        }
        Ok(Self {
            words,
            len: values.len(),
            encoding,
        })
    }

    pub fn unpack(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.encoding.decode(self.get(i))).collect()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let w = &mut self.words[i / WORD_BITS];
        if bit {
            *w |= 1 << (i % WORD_BITS);
        } else {
            *w &= !(1 << (i % WORD_BITS));
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn popcount(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// True when no bit beyond `len` is set.
    pub fn is_canonical(&self) -> bool {
        self.words.len() == words_for(self.len)
            && self.words.last().is_none_or(|w| w & !tail_mask(self.len) == 0)
    }

    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        canonicalize(&mut words, self.len);
        Self {
            words,
            len: self.len,
            encoding: self.encoding,
        }
    }

    fn check_pair(&self, other: &Self) -> Result<()> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        if self.encoding != other.encoding {
            return Err(Error::EncodingMismatch("operands use different encodings"));
        }
        Ok(())
    }

    fn zip_words(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Self {
        let mut words: Vec<u64> = self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect();
        canonicalize(&mut words, self.len);
        Self {
            words,
            len: self.len,
            encoding: self.encoding,
        }
    }

    pub fn xnor(&self, other: &Self) -> Result<Self> {
        self.check_pair(other)?;
        Ok(self.zip_words(other, |a, b| !(a ^ b)))
    }

    /// Bitwise AND; used to combine membership masks. Lengths must match,
    /// the result takes `self`'s encoding.
    pub fn and(&self, other: &Self) -> Result<Self> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        Ok(self.zip_words(other, |a, b| a & b))
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        Ok(self.zip_words(other, |a, b| a | b))
    }
}

// ---------------------------------------------------------------------------
// word-slice kernels

mod kernels {
    #[inline(always)]
    fn fold(a: &[u64], b: &[u64], f: impl Fn(u64, u64) -> u64) -> u64 {
        a.iter().zip(b).map(|(&x, &y)| f(x, y).count_ones() as u64).sum()
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "popcnt")]
    unsafe fn xor_popcnt(a: &[u64], b: &[u64]) -> u64 {
        fold(a, b, |x, y| x ^ y)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "popcnt")]
    unsafe fn and_popcnt(a: &[u64], b: &[u64]) -> u64 {
        fold(a, b, |x, y| x & y)
    }

    #[cfg(target_arch = "x86_64")]
    fn has_popcnt() -> bool {
        use std::sync::OnceLock;
        static HAS: OnceLock<bool> = OnceLock::new();
        *HAS.get_or_init(|| std::arch::is_x86_feature_detected!("popcnt"))
    }

    /// popcount(a ^ b) over equal-length word slices.
    #[inline]
    pub fn xor_popcount(a: &[u64], b: &[u64]) -> u64 {
        debug_assert_eq!(a.len(), b.len());
        #[cfg(target_arch = "x86_64")]
        if has_popcnt() {
            // SAFETY: the CPU supports popcnt (checked above).
            return unsafe { xor_popcnt(a, b) };
        }
        fold(a, b, |x, y| x ^ y)
    }

    /// popcount(a & b) over equal-length word slices.
    #[inline]
    pub fn and_popcount(a: &[u64], b: &[u64]) -> u64 {
        debug_assert_eq!(a.len(), b.len());
        #[cfg(target_arch = "x86_64")]
        if has_popcnt() {
            // SAFETY: the CPU supports popcnt (checked above).
            return unsafe { and_popcnt(a, b) };
        }
        fold(a, b, |x, y| x & y)
    }
}

pub use kernels::{and_popcount, xor_popcount};

/// ±1 dot product of two canonical signed word slices of logical length `n`.
#[inline]
pub fn signed_dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    n as i64 - 2 * xor_popcount(a, b) as i64
}

/// Integer dot product of two SIGNED planes via xnor and bit counting.
pub fn bitcount_dot(a: &BitPlane, b: &BitPlane) -> Result<i64> {
    a.check_pair(b)?;
    if a.encoding != Encoding::Signed {
        return Err(Error::EncodingMismatch(
            "bitcount_dot needs SIGNED planes; use bitcount_dot_unsigned for {0,1} codes",
        ));
    }
    let matches = a.xnor(b)?.popcount() as i64;
    Ok(2 * matches - a.len as i64)
}

/// Dot product of two UNSIGNED planes: popcount(a AND b).
pub fn bitcount_dot_unsigned(a: &BitPlane, b: &BitPlane) -> Result<i64> {
    a.check_pair(b)?;
    if a.encoding != Encoding::Unsigned {
        return Err(Error::EncodingMismatch("bitcount_dot_unsigned needs UNSIGNED planes"));
    }
    Ok(and_popcount(&a.words, &b.words) as i64)
}

/// Dot product of an UNSIGNED {0,1} plane with a SIGNED ±1 plane:
/// popcount(u AND s) - popcount(u AND NOT s).
pub fn bitcount_dot_mixed(u: &BitPlane, s: &BitPlane) -> Result<i64> {
    if u.len != s.len {
        return Err(Error::LengthMismatch {
            left: u.len,
            right: s.len,
        });
    }
    if u.encoding != Encoding::Unsigned || s.encoding != Encoding::Signed {
        return Err(Error::EncodingMismatch("mixed dot needs (UNSIGNED, SIGNED) operands"));
    }
    let ones = u.popcount() as i64;
    let agree = and_popcount(&u.words, &s.words) as i64;
    // popcount(u & !s) == popcount(u) - popcount(u & s)
    Ok(2 * agree - ones)
}

// ---------------------------------------------------------------------------
// matrices

/// Row-major bit matrix: each row is a plane of `cols` bits, stored
/// contiguously with a stride of `words_for(cols)` words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    encoding: Encoding,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize, encoding: Encoding) -> Self {
        Self {
            rows,
            cols,
            encoding,
            words: vec![0; rows * words_for(cols)],
        }
    }

    pub fn from_planes(planes: &[BitPlane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidArgument("BitMatrix needs at least one row".into()))?;
        let (cols, encoding) = (first.len, first.encoding);
        let mut words = Vec::with_capacity(planes.len() * words_for(cols));
        for p in planes {
            if p.len != cols {
                return Err(Error::LengthMismatch { left: cols, right: p.len });
            }
            if p.encoding != encoding {
                return Err(Error::EncodingMismatch("BitMatrix rows must share an encoding"));
            }
            words.extend_from_slice(&p.words);
        }
        Ok(Self {
            rows: planes.len(),
            cols,
            encoding,
            words,
        })
    }

    /// Build from raw row-major words (stride `words_for(cols)`).
    pub fn from_words(rows: usize, cols: usize, encoding: Encoding, mut words: Vec<u64>) -> Result<Self> {
        let stride = words_for(cols);
        if words.len() != rows * stride {
            return Err(Error::LengthMismatch {
                left: words.len(),
                right: rows * stride,
            });
        }
        if stride > 0 {
            for row in words.chunks_exact_mut(stride) {
                canonicalize(row, cols);
            }
        }
        Ok(Self {
            rows,
            cols,
            encoding,
            words,
        })
    }

    /// Build a matrix whose bit (r, c) is `f(r, c)`.
    pub fn from_fn(rows: usize, cols: usize, encoding: Encoding, f: impl Fn(usize, usize) -> bool) -> Self {
        let stride = words_for(cols);
        let mut words = vec![0u64; rows * stride];
        for r in 0..rows {
            let row = &mut words[r * stride..(r + 1) * stride];
            for c in 0..cols {
                if f(r, c) {
                    row[c / WORD_BITS] |= 1 << (c % WORD_BITS);
                }
            }
        }
        Self {
            rows,
            cols,
            encoding,
            words,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    #[inline]
    pub fn stride(&self) -> usize {
        words_for(self.cols)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        let s = self.stride();
        &self.words[r * s..(r + 1) * s]
    }

    pub fn row_plane(&self, r: usize) -> BitPlane {
        BitPlane {
            words: self.row_words(r).to_vec(),
            len: self.cols,
            encoding: self.encoding,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        (self.row_words(r)[c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }

    /// Decode to row-major code values.
    pub fn unpack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.encoding.decode(self.get(r, c)));
            }
        }
        out
    }

    pub fn is_canonical(&self) -> bool {
        let s = self.stride();
        s == 0 || self.words.chunks_exact(s).all(|row| row.last().is_none_or(|w| w & !tail_mask(self.cols) == 0))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn check_gemm(w: &BitMatrix, a: &BitMatrix) -> Result<()> {
    if w.cols != a.cols {
        return Err(shape_err("binary_gemm", format!("inner dim {}", w.cols), format!("inner dim {}", a.cols)));
    }
    if w.encoding != Encoding::Signed || a.encoding != Encoding::Signed {
        return Err(Error::EncodingMismatch("binary_gemm needs SIGNED operands"));
    }
    Ok(())
}

#[inline]
fn gemm_row(w: &BitMatrix, a: &BitMatrix, i: usize, out: &mut [i32]) {
    let wr = w.row_words(i);
    let n = w.cols;
    for (j, o) in out.iter_mut().enumerate() {
        *o = signed_dot_words(wr, a.row_words(j), n) as i32;
    }
}

/// `out[i][j] = <W row i, A row j>` over ±1 codes. `A` is the activation
/// matrix stored pre-transposed (`p x n`), so both operands reduce over
/// contiguous words. Rows of the output are computed in parallel; each entry
/// is an exact integer so the result does not depend on the thread count.
pub fn binary_gemm(w: &BitMatrix, a: &BitMatrix) -> Result<IntMatrix> {
    check_gemm(w, a)?;
    let (m, p) = (w.rows, a.rows);
    let mut data = vec![0i32; m * p];
    if p > 0 {
        data.par_chunks_mut(p).enumerate().for_each(|(i, out)| gemm_row(w, a, i, out));
    }
    Ok(IntMatrix { rows: m, cols: p, data })
}

/// Single-threaded reference path for [`binary_gemm`].
pub fn binary_gemm_sequential(w: &BitMatrix, a: &BitMatrix) -> Result<IntMatrix> {
    check_gemm(w, a)?;
    let (m, p) = (w.rows, a.rows);
    let mut data = vec![0i32; m * p];
    if p > 0 {
        for (i, out) in data.chunks_mut(p).enumerate() {
            gemm_row(w, a, i, out);
        }
    }
    Ok(IntMatrix { rows: m, cols: p, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn signs(bits: &[bool]) -> Vec<f64> {
        bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn pack_direct_encoding() {
        let p = BitPlane::pack(&[1.0, -1.0, 1.0], Encoding::Signed).unwrap();
        assert_eq!(p.words(), &[0b101]);
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn pack_saturated_word() {
        let p = BitPlane::pack(&[1.0; 64], Encoding::Signed).unwrap();
        assert_eq!(p.words(), &[u64::MAX]);
    }

    #[test]
    fn pack_rejects_non_code_with_index() {
        let err = BitPlane::pack(&[1.0, -1.0, 0.5], Encoding::Signed).unwrap_err();
        assert!(matches!(err, Error::InvalidCode { index: 2, .. }));
        let err = BitPlane::pack(&[0.0, -1.0], Encoding::Unsigned).unwrap_err();
        assert!(matches!(err, Error::InvalidCode { index: 1, .. }));
    }

    #[test]
    fn unpack_constant_planes() {
        assert_eq!(BitPlane::ones(4, Encoding::Signed).unpack(), vec![1.0; 4]);
        assert_eq!(BitPlane::zeros(3, Encoding::Unsigned).unpack(), vec![0.0; 3]);
    }

    #[test]
    fn xnor_identity_and_complement() {
        let a = BitPlane::from_fn(100, Encoding::Signed, |i| i % 3 == 0);
        assert_eq!(a.xnor(&a).unwrap(), BitPlane::ones(100, Encoding::Signed));
        let z = a.xnor(&a.complement()).unwrap();
        assert_eq!(z.popcount(), 0);
        assert!(z.is_canonical());
    }

    #[test]
    fn xnor_rejects_mismatch() {
        let a = BitPlane::zeros(10, Encoding::Signed);
        assert!(a.xnor(&BitPlane::zeros(11, Encoding::Signed)).is_err());
        assert!(a.xnor(&BitPlane::zeros(10, Encoding::Unsigned)).is_err());
    }

    #[test]
    fn dot_small_cases() {
        let a = BitPlane::pack(&[1.0, -1.0, 1.0, -1.0], Encoding::Signed).unwrap();
        let b = BitPlane::pack(&[1.0, 1.0, -1.0, -1.0], Encoding::Signed).unwrap();
        assert_eq!(bitcount_dot(&a, &b).unwrap(), 0);
        let c = BitPlane::from_fn(8, Encoding::Signed, |i| i % 2 == 1);
        assert_eq!(bitcount_dot(&c, &c).unwrap(), 8);
        assert_eq!(bitcount_dot(&c, &c.complement()).unwrap(), -8);
    }

    #[test]
    fn dot_rejects_unsigned() {
        let a = BitPlane::zeros(8, Encoding::Unsigned);
        assert!(matches!(bitcount_dot(&a, &a), Err(Error::EncodingMismatch(_))));
        assert_eq!(bitcount_dot_unsigned(&a, &a).unwrap(), 0);
    }

    #[test]
    fn mixed_dot_matches_reference() {
        let u = BitPlane::pack(&[1.0, 0.0, 1.0, 1.0], Encoding::Unsigned).unwrap();
        let s = BitPlane::pack(&[1.0, 1.0, -1.0, 1.0], Encoding::Signed).unwrap();
        assert_eq!(bitcount_dot_mixed(&u, &s).unwrap(), 1);
    }

    #[test]
    fn exhaustive_dot_small_lengths() {
        for n in 1..=6usize {
            for x in 0u32..(1 << n) {
                for y in 0u32..(1 << n) {
                    let a = BitPlane::from_fn(n, Encoding::Signed, |i| (x >> i) & 1 == 1);
                    let b = BitPlane::from_fn(n, Encoding::Signed, |i| (y >> i) & 1 == 1);
                    let want: f64 = a.unpack().iter().zip(b.unpack()).map(|(p, q)| p * q).sum();
                    assert_eq!(bitcount_dot(&a, &b).unwrap(), want as i64);
                }
            }
        }
    }

    #[test]
    fn gemm_two_by_two_by_hand() {
        // W = [[+1,-1],[-1,+1]], A rows = [[+1,-1],[+1,+1]]
        let w = BitMatrix::from_planes(&[
            BitPlane::pack(&[1.0, -1.0], Encoding::Signed).unwrap(),
            BitPlane::pack(&[-1.0, 1.0], Encoding::Signed).unwrap(),
        ])
        .unwrap();
        let a = BitMatrix::from_planes(&[
            BitPlane::pack(&[1.0, -1.0], Encoding::Signed).unwrap(),
            BitPlane::pack(&[1.0, 1.0], Encoding::Signed).unwrap(),
        ])
        .unwrap();
        let out = binary_gemm(&w, &a).unwrap();
        assert_eq!(out.data, vec![2, 0, -2, 0]);
    }

    #[test]
    fn gemm_saturation() {
        let w = BitMatrix::from_fn(3, 64, Encoding::Signed, |_, _| true);
        let a = BitMatrix::from_fn(5, 64, Encoding::Signed, |_, _| true);
        assert!(binary_gemm(&w, &a).unwrap().data.iter().all(|&v| v == 64));
    }

    #[test]
    fn gemm_rejects_inner_mismatch() {
        let w = BitMatrix::zeros(2, 10, Encoding::Signed);
        let a = BitMatrix::zeros(2, 11, Encoding::Signed);
        assert!(binary_gemm(&w, &a).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
            let v = signs(&bits);
            let p = BitPlane::pack(&v, Encoding::Signed).unwrap();
            prop_assert!(p.is_canonical());
            prop_assert_eq!(p.words().len(), words_for(v.len()));
            prop_assert_eq!(p.unpack(), v);
        }

        #[test]
        fn dot_equals_integer_oracle(
            pair in (1usize..400).prop_flat_map(|n| (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
            ))
        ) {
            let a = BitPlane::pack(&signs(&pair.0), Encoding::Signed).unwrap();
            let b = BitPlane::pack(&signs(&pair.1), Encoding::Signed).unwrap();
            let want: i64 = pair.0.iter().zip(&pair.1).map(|(x, y)| if x == y { 1 } else { -1 }).sum();
            let got = bitcount_dot(&a, &b).unwrap();
            prop_assert_eq!(got, want);
            prop_assert_eq!((got - a.len() as i64).rem_euclid(2), 0);
            prop_assert!(a.xnor(&b).unwrap().is_canonical());
        }

        #[test]
        fn gemm_parallel_matches_sequential(m in 1usize..12, p in 1usize..12, n in 1usize..150, seed in any::<u64>()) {
            let h = |r: usize, c: usize, salt: u64| {
                let x = (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (c as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ seed ^ salt;
                x.wrapping_mul(0x1656_67B1_9E37_79F9).rotate_left(17) & 1 == 1
            };
            let w = BitMatrix::from_fn(m, n, Encoding::Signed, |r, c| h(r, c, 1));
            let a = BitMatrix::from_fn(p, n, Encoding::Signed, |r, c| h(r, c, 2));
            prop_assert_eq!(binary_gemm(&w, &a).unwrap(), binary_gemm_sequential(&w, &a).unwrap());
        }
    }
}
