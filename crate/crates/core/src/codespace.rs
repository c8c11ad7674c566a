//! Code-space arithmetic.
//!
//! Binary codes are packed into 64-bit words, bit `j` of a code living at bit
//! `j % 64` of word `j / 64` (little-endian within each word). Unused trailing
//! bits of the last word are always zero, so word-level XOR + popcount gives
//! the exact Hamming distance and packed files are bit-exact.
//!
//! Target codes are drawn from an i.i.d. Bernoulli prior and embedded into real
//! space by a single global factor `lambda`: `b / lambda`. Under that embedding
//! `lambda^2 * ||b_i/lambda - b_j/lambda||^2 == hamming(b_i, b_j)`, which is why
//! Euclidean training and Hamming retrieval agree.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{wire, Error, Result};

pub const WORD_BITS: usize = 64;

/// Number of 64-bit words needed to hold `bits` bits.
#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of an `bits`-bit code.
#[inline]
fn tail_mask(bits: usize) -> u64 {
    match bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// An `m`-bit binary code, bit-packed.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    words: Vec<u64>,
    bits: usize,
}

impl BinaryCode {
    pub fn zeros(bits: usize) -> Result<Self> {
        if bits == 0 {
            return Err(Error::invalid("code length must be at least 1 bit"));
        }
        Ok(Self { words: vec![0; words_for(bits)], bits })
    }

    /// Packs a sequence of 0/1 digits.
    pub fn from_bits(digits: &[u8]) -> Result<Self> {
        let mut code = Self::zeros(digits.len())?;
        for (j, &d) in digits.iter().enumerate() {
            match d {
                0 => {}
                1 => code.set(j, true),
                other => return Err(Error::invalid(format!("bit {j} has value {other}, expected 0 or 1"))),
            }
        }
        Ok(code)
    }

    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        let mut code = Self::zeros(bits.len())?;
        for (j, &b) in bits.iter().enumerate() {
            code.set(j, b);
        }
        Ok(code)
    }

    /// Wraps packed words. Rejects a wrong word count or set padding bits.
    pub fn from_words(words: Vec<u64>, bits: usize) -> Result<Self> {
        if bits == 0 {
            return Err(Error::invalid("code length must be at least 1 bit"));
        }
        if words.len() != words_for(bits) {
            return Err(Error::LengthMismatch { expected: words_for(bits), actual: words.len() });
        }
        if words[words.len() - 1] & !tail_mask(bits) != 0 {
            return Err(Error::invalid("padding bits beyond the code length must be zero"));
        }
        Ok(Self { words, bits })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, j: usize) -> bool {
        assert!(j < self.bits, "bit index {j} out of range for {}-bit code", self.bits);
        (self.words[j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, j: usize, value: bool) {
        assert!(j < self.bits, "bit index {j} out of range for {}-bit code", self.bits);
        let mask = 1u64 << (j % WORD_BITS);
        if value {
            self.words[j / WORD_BITS] |= mask;
        } else {
            self.words[j / WORD_BITS] &= !mask;
        }
    }

    /// Unpacks to one 0/1 digit per bit.
    pub fn to_bits(&self) -> Vec<u8> {
        (0..self.bits).map(|j| self.get(j) as u8).collect()
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

impl fmt::Debug for BinaryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.to_bits().iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
        write!(f, "BinaryCode({s})")
    }
}

/// A contiguous table of equal-length packed codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryCodeBatch {
    bits: usize,
    words_per_code: usize,
    data: Vec<u64>,
}

impl BinaryCodeBatch {
    pub fn new(bits: usize) -> Result<Self> {
        if bits == 0 {
            return Err(Error::invalid("code length must be at least 1 bit"));
        }
        Ok(Self { bits, words_per_code: words_for(bits), data: Vec::new() })
    }

    pub fn with_capacity(bits: usize, capacity: usize) -> Result<Self> {
        let mut batch = Self::new(bits)?;
        batch.data.reserve(capacity * batch.words_per_code);
        Ok(batch)
    }

    pub fn from_codes(bits: usize, codes: &[BinaryCode]) -> Result<Self> {
        let mut batch = Self::with_capacity(bits, codes.len())?;
        for c in codes {
            batch.push(c)?;
        }
        Ok(batch)
    }

    pub fn push(&mut self, code: &BinaryCode) -> Result<()> {
        if code.len() != self.bits {
            return Err(Error::LengthMismatch { expected: self.bits, actual: code.len() });
        }
        self.data.extend_from_slice(code.words());
        Ok(())
    }

    /// Appends raw packed words; the caller guarantees zeroed padding.
    pub(crate) fn push_words(&mut self, words: &[u64]) {
        debug_assert_eq!(words.len(), self.words_per_code);
        debug_assert_eq!(words[words.len() - 1] & !tail_mask(self.bits), 0);
        self.data.extend_from_slice(words);
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.words_per_code
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u64] {
        &self.data[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn get(&self, i: usize) -> BinaryCode {
        BinaryCode { words: self.row(i).to_vec(), bits: self.bits }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = BinaryCode> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// The packed table, row-major.
    #[inline]
    pub fn as_words(&self) -> &[u64] {
        &self.data
    }

    /// Fraction of ones at each bit position over all rows.
    pub fn bit_means(&self) -> Vec<f64> {
        let n = self.len();
        let mut counts = vec![0usize; self.bits];
        for i in 0..n {
            let row = self.row(i);
            for (j, c) in counts.iter_mut().enumerate() {
                *c += ((row[j / WORD_BITS] >> (j % WORD_BITS)) & 1) as usize;
            }
        }
        counts.into_iter().map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
    }
}

/// How the uniform normalization factor is derived from the prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LambdaMode {
    /// `lambda = sqrt(m * p)`: normalized targets have unit expected squared norm.
    #[default]
    NormMatching,
    /// `lambda = sqrt(m * p^2)`: the squared Bernoulli mean summed over bits.
    SquaredMean,
}

impl LambdaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LambdaMode::NormMatching => "norm-matching",
            LambdaMode::SquaredMean => "paper-literal",
        }
    }
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm-matching" => Ok(LambdaMode::NormMatching),
            "paper-literal" | "squared-mean" => Ok(LambdaMode::SquaredMean),
            other => Err(Error::invalid(format!(
                "unknown lambda mode {other:?} (expected norm-matching or paper-literal)"
            ))),
        }
    }
}

/// Bernoulli prior over `m`-bit codes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodePrior {
    m: usize,
    p: f64,
    lambda_mode: LambdaMode,
}

impl CodePrior {
    pub fn new(m: usize, p: f64, lambda_mode: LambdaMode) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("code length must be at least 1 bit"));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("Bernoulli probability {p} outside [0, 1]")));
        }
        Ok(Self { m, p, lambda_mode })
    }

    /// Balanced prior: every bit is 1 with probability one half.
    pub fn balanced(m: usize, lambda_mode: LambdaMode) -> Result<Self> {
        Self::new(m, 0.5, lambda_mode)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn lambda_mode(&self) -> LambdaMode {
        self.lambda_mode
    }
}

/// Draws `count` codes with i.i.d. Bernoulli(p) bits from a generator seeded by `seed`.
pub fn sample_codes(prior: &CodePrior, count: usize, seed: u64) -> Result<BinaryCodeBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_codes_with(prior, count, &mut rng)
}

/// Same as [`sample_codes`] but draws from a caller-owned generator.
pub fn sample_codes_with<R: Rng + ?Sized>(prior: &CodePrior, count: usize, rng: &mut R) -> Result<BinaryCodeBatch> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let m = prior.m;
    let mut batch = BinaryCodeBatch::with_capacity(m, count)?;
    let wpc = words_for(m);
    let mut words = vec![0u64; wpc];
    for _ in 0..count {
        if prior.p == 0.5 {
            // Each bit of a uniform word is an independent fair coin.
            for w in words.iter_mut() {
                *w = rng.next_u64();
            }
        } else {
            words.fill(0);
            for j in 0..m {
                if rng.random_bool(prior.p) {
                    words[j / WORD_BITS] |= 1u64 << (j % WORD_BITS);
                }
            }
        }
        words[wpc - 1] &= tail_mask(m);
        batch.push_words(&words);
    }
    Ok(batch)
}

/// Uniform normalization factor for the prior.
pub fn normalization_factor(prior: &CodePrior) -> Result<f64> {
    if prior.p == 0.0 {
        return Err(Error::DegeneratePrior);
    }
    let m = prior.m as f64;
    let lambda = match prior.lambda_mode {
        LambdaMode::NormMatching => (m * prior.p).sqrt(),
        LambdaMode::SquaredMean => (m * prior.p * prior.p).sqrt(),
    };
    Ok(lambda)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("normalization factor must be positive and finite, got {lambda}")))
    }
}

/// Embeds a code as `b / lambda`.
pub fn normalize_uniform(code: &BinaryCode, lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let on = 1.0 / lambda;
    Ok((0..code.len()).map(|j| if code.get(j) { on } else { 0.0 }).collect())
}

/// Writes `b / lambda` for a packed row into `out`.
pub fn embed_words_into(words: &[u64], lambda: f64, out: &mut [f64]) {
    let on = 1.0 / lambda;
    for (j, v) in out.iter_mut().enumerate() {
        *v = if (words[j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1 { on } else { 0.0 };
    }
}

/// `f32` form of [`embed_words_into`] for float galleries.
pub fn embed_f32_into(words: &[u64], lambda: f64, out: &mut [f32]) {
    let on = (1.0 / lambda) as f32;
    for (j, v) in out.iter_mut().enumerate() {
        *v = if (words[j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1 { on } else { 0.0 };
    }
}

/// Norms below this are treated as zero.
pub const ZERO_NORM_TOLERANCE: f64 = 1e-12;

/// Scales `v` to unit Euclidean norm.
pub fn normalize_l2(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(j) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("entry {j} of vector to normalize")));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= ZERO_NORM_TOLERANCE {
        return Err(Error::ZeroVector { norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Thresholds each entry at `1 / (2 lambda)`; an entry exactly at the threshold maps to 0.
pub fn binarize(z: &[f64], lambda: f64) -> Result<BinaryCode> {
    check_lambda(lambda)?;
    let threshold = 1.0 / (2.0 * lambda);
    let mut code = BinaryCode::zeros(z.len())?;
    for (j, &x) in z.iter().enumerate() {
        if x > threshold {
            code.set(j, true);
        }
    }
    Ok(code)
}

/// Hamming distance by XOR and population count over packed words.
pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), actual: b.len() });
    }
    Ok(hamming_words(a.words(), b.words()))
}

/// Unchecked word-level Hamming distance; slices must have equal length.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

const CODES_MAGIC: &[u8; 4] = b"ABCB";
const CODES_VERSION: u32 = 1;

/// Writes a code table in the `ABCB` layout:
/// magic, u32 version, u64 n, u32 m, then n rows of ceil(m/64) little-endian u64 words.
pub fn write_codes<W: Write>(w: &mut W, codes: &BinaryCodeBatch) -> Result<()> {
    let m = u32::try_from(codes.bits()).map_err(|_| Error::invalid("code length exceeds u32"))?;
    w.write_all(CODES_MAGIC)?;
    w.write_all(&CODES_VERSION.to_le_bytes())?;
    w.write_all(&(codes.len() as u64).to_le_bytes())?;
    w.write_all(&m.to_le_bytes())?;
    for word in codes.as_words() {
        w.write_all(&word.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_codes<R: Read>(r: &mut R) -> Result<BinaryCodeBatch> {
    wire::magic(r, CODES_MAGIC)?;
    wire::version(r, CODES_VERSION)?;
    let n = wire::u64(r, "code count")?;
    let m = wire::u32(r, "code length")? as usize;
    if m == 0 {
        return Err(Error::Format("code length 0 in header".into()));
    }
    let wpc = words_for(m);
    let mut batch = BinaryCodeBatch::new(m)?;
    let mut row = vec![0u64; wpc];
    for i in 0..n {
        for w in row.iter_mut() {
            *w = wire::u64(r, "code words")?;
        }
        if row[wpc - 1] & !tail_mask(m) != 0 {
            return Err(Error::Format(format!("record {i} has non-zero padding bits")));
        }
        batch.push_words(&row);
    }
    wire::end(r)?;
    Ok(batch)
}

pub fn save_codes(path: impl AsRef<Path>, codes: &BinaryCodeBatch) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codes(&mut w, codes)?;
    w.flush()?;
    Ok(())
}

pub fn load_codes(path: impl AsRef<Path>) -> Result<BinaryCodeBatch> {
    read_codes(&mut BufReader::new(File::open(path)?))
}
