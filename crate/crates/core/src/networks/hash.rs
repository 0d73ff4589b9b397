//! Packed binary codes and Hamming-distance retrieval.

use std::time::Instant;

use rand::Rng;

use super::encoder::logistic_noise;
use crate::error::{Error, Result};
use crate::ndcore::{dot, sigmoid, Matrix2D, MlpParams};
use crate::rng::{stream, Stream};

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// One code of `bits` bits packed little-endian into `u64` words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitCode {
    bits: usize,
    words: Vec<u64>,
}

impl BitCode {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = vec![0u64; words_for(bits.len())];
        for (k, &b) in bits.iter().enumerate() {
            if b {
                words[k / 64] |= 1 << (k % 64);
            }
        }
        BitCode {
            bits: bits.len(),
            words,
        }
    }

    /// Parses a string of `0`/`1`, first character is bit 0.
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .enumerate()
            .map(|(k, c)| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Parse {
                    row: k,
                    msg: format!("bit character {c:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_bits(&bits))
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, k: usize) -> bool {
        self.words[k / 64] >> (k % 64) & 1 == 1
    }

    pub fn to_bitstring(&self) -> String {
        (0..self.bits).map(|k| if self.bit(k) { '1' } else { '0' }).collect()
    }
}

/// Number of differing bits between equally packed codes.
#[inline]
pub fn hamming_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// `1 − hamming / bits`: 1 for identical codes, 0 for complementary ones.
pub fn hamming_sim(a: &BitCode, b: &BitCode) -> Result<f64> {
    if a.bits != b.bits {
        return Err(Error::shape("hamming_sim", a.bits, b.bits));
    }
    if a.bits == 0 {
        return Ok(1.0);
    }
    Ok(1.0 - f64::from(hamming_distance(&a.words, &b.words)) / a.bits as f64)
}

/// Codes for a batch of examples, plus the probabilities they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryCodebook {
    code_bits: usize,
    words: Vec<u64>,
    /// `p = σ(z)` per example and bit.
    soft_probs: Matrix2D,
    /// The emitted bit values: hard `{0, 1}` or the relaxed sample.
    values: Matrix2D,
    ids: Vec<usize>,
}

/// Samples one Bernoulli(`σ(z)`) bit per encoder output via the binary
/// Gumbel-softmax: `bit = σ((z + L)/t)` with logistic noise `L`. With `hard`
/// the emitted values are rounded to `{0, 1}`; the packed codes are always
/// the rounded bits. Deterministic in `seed`.
pub fn encode_codes(
    encoder: &MlpParams,
    batch: &Matrix2D,
    gumbel_temp: f64,
    seed: u64,
    hard: bool,
) -> Result<BinaryCodebook> {
    if gumbel_temp <= 0.0 || !gumbel_temp.is_finite() {
        return Err(Error::Range {
            what: "gumbel temperature",
            detail: format!("{gumbel_temp} must be positive"),
        });
    }
    let (z, _) = encoder.forward(batch)?;
    let noise = logistic_noise(z.rows(), z.cols(), &mut stream(seed, Stream::Gumbel));
    codebook_from_logits(&z, Some(&noise), gumbel_temp, hard, (0..z.rows()).collect())
}

/// Builds a codebook from encoder logits. `noise = None` thresholds at `p = 0.5`.
pub fn codebook_from_logits(
    z: &Matrix2D,
    noise: Option<&Matrix2D>,
    gumbel_temp: f64,
    hard: bool,
    ids: Vec<usize>,
) -> Result<BinaryCodebook> {
    let (n, bits) = z.shape();
    if ids.len() != n {
        return Err(Error::shape("codebook ids", n, ids.len()));
    }
    let wpc = words_for(bits);
    let mut words = vec![0u64; n * wpc];
    let mut values = Matrix2D::zeros(n, bits);
    for r in 0..n {
        for k in 0..bits {
            let l = z[(r, k)] + noise.map_or(0.0, |m| m[(r, k)]);
            let on = l > 0.0;
            if on {
                words[r * wpc + k / 64] |= 1 << (k % 64);
            }
            values[(r, k)] = if hard {
                f64::from(u8::from(on))
            } else {
                sigmoid(l / gumbel_temp)
            };
        }
    }
    Ok(BinaryCodebook {
        code_bits: bits,
        words,
        soft_probs: z.map(sigmoid),
        values,
        ids,
    })
}

impl BinaryCodebook {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code_bits(&self) -> usize {
        self.code_bits
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn soft_probs(&self) -> &Matrix2D {
        &self.soft_probs
    }

    pub fn values(&self) -> &Matrix2D {
        &self.values
    }

    pub fn words(&self, row: usize) -> &[u64] {
        let w = words_for(self.code_bits);
        &self.words[row * w..(row + 1) * w]
    }

    pub fn code(&self, row: usize) -> BitCode {
        BitCode {
            bits: self.code_bits,
            words: self.words(row).to_vec(),
        }
    }

    /// Hamming similarity between two rows of the book.
    pub fn sim(&self, a: usize, b: usize) -> f64 {
        1.0 - f64::from(hamming_distance(self.words(a), self.words(b))) / self.code_bits as f64
    }

    /// Hamming similarity between a row and an outside code.
    pub fn sim_to(&self, row: usize, code: &BitCode) -> Result<f64> {
        if code.bits != self.code_bits {
            return Err(Error::shape("codebook sim_to", self.code_bits, code.bits));
        }
        Ok(1.0 - f64::from(hamming_distance(self.words(row), &code.words)) / self.code_bits as f64)
    }

    /// `id,bitstring` lines, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (r, id) in self.ids.iter().enumerate() {
            out.push_str(&format!("{id},{}\n", self.code(r).to_bitstring()));
        }
        out
    }
}

/// Index of the best-scoring row; ties go to the lowest index.
fn argmax_by(n: usize, score: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for r in 0..n {
        let s = score(r);
        if s > best_score {
            best = r;
            best_score = s;
        }
    }
    best
}

/// Brute-force nearest code by Hamming distance.
pub fn hamming_scan_top1(packed: &[u64], words_per_code: usize, query: &[u64]) -> usize {
    let mut best = 0;
    let mut best_d = u32::MAX;
    for (r, code) in packed.chunks_exact(words_per_code).enumerate() {
        let d = hamming_distance(code, query);
        if d < best_d {
            best = r;
            best_d = d;
        }
    }
    best
}

/// Brute-force nearest embedding by cosine, over unit-normalized rows.
pub fn cosine_scan_top1(normalized: &Matrix2D, query: &[f64]) -> usize {
    argmax_by(normalized.rows(), |r| dot(normalized.row(r), query))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashBenchReport {
    pub n_codes: usize,
    pub code_bits: usize,
    pub embed_dim: usize,
    pub trials: usize,
    pub hamming_ns_per_query: f64,
    pub dense_ns_per_query: f64,
    /// Top-1 rows found by each scan, one per trial query.
    pub hamming_top1: Vec<usize>,
    pub dense_top1: Vec<usize>,
    /// Whether both scans agree on a constructed set of one-hot embeddings and
    /// their exact binarizations.
    pub constructed_agree: bool,
}

impl HashBenchReport {
    pub fn speedup(&self) -> f64 {
        self.dense_ns_per_query / self.hamming_ns_per_query
    }
}

fn unit_rows<R: Rng>(n: usize, d: usize, rng: &mut R) -> Matrix2D {
    let mut m = Matrix2D::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape");
    for r in 0..n {
        let row = m.row_mut(r);
        let norm = dot(row, row).sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    m
}

/// Times a brute-force Hamming scan against a brute-force dense cosine scan
/// over seeded random data. Timings vary between runs; everything else is a
/// function of `seed`.
pub fn bench_hash(
    n_codes: usize,
    code_bits: usize,
    embed_dim: usize,
    trials: usize,
    seed: u64,
) -> Result<HashBenchReport> {
    if n_codes < 1000 || code_bits == 0 || embed_dim == 0 || trials == 0 {
        return Err(Error::Config(format!(
            "bench-hash needs n_codes >= 1000 and positive bits, dim and trials \
             (got {n_codes}, {code_bits}, {embed_dim}, {trials})"
        )));
    }
    let mut rng = stream(seed, Stream::Bench);
    let wpc = words_for(code_bits);
    let mask = |w: usize| -> u64 {
        let used = (code_bits - 64 * w).min(64);
        if used == 64 {
            u64::MAX
        } else {
            (1u64 << used) - 1
        }
    };
    let random_code =
        |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u64> { (0..wpc).map(|w| rng.random::<u64>() & mask(w)).collect() };
    let packed: Vec<u64> = (0..n_codes).flat_map(|_| random_code(&mut rng)).collect();
    let code_queries: Vec<Vec<u64>> = (0..trials).map(|_| random_code(&mut rng)).collect();
    let dense = unit_rows(n_codes, embed_dim, &mut rng);
    let dense_queries = unit_rows(trials, embed_dim, &mut rng);

    let start = Instant::now();
    let hamming_top1: Vec<usize> = code_queries
        .iter()
        .map(|q| std::hint::black_box(hamming_scan_top1(&packed, wpc, q)))
        .collect();
    let hamming_ns = start.elapsed().as_nanos() as f64 / trials as f64;

    let start = Instant::now();
    let dense_top1: Vec<usize> = (0..trials)
        .map(|t| std::hint::black_box(cosine_scan_top1(&dense, dense_queries.row(t))))
        .collect();
    let dense_ns = start.elapsed().as_nanos() as f64 / trials as f64;

    Ok(HashBenchReport {
        n_codes,
        code_bits,
        embed_dim,
        trials,
        hamming_ns_per_query: hamming_ns,
        dense_ns_per_query: dense_ns,
        hamming_top1,
        dense_top1,
        constructed_agree: one_hot_agreement(embed_dim.min(256), 4 * embed_dim.min(256)),
    })
}

/// Rows are one-hot on `r % dim`; codes are their exact binarization. Every
/// one-hot query must retrieve the same row through both scans.
pub fn one_hot_agreement(dim: usize, n: usize) -> bool {
    let mut dense = Matrix2D::zeros(n, dim);
    let mut codes = Vec::with_capacity(n);
    for r in 0..n {
        dense[(r, r % dim)] = 1.0;
        let bits: Vec<bool> = (0..dim).map(|k| k == r % dim).collect();
        codes.push(BitCode::from_bits(&bits));
    }
    let wpc = words_for(dim);
    let packed: Vec<u64> = codes.iter().flat_map(|c| c.words.clone()).collect();
    (0..dim).all(|h| {
        let mut q = vec![0.0; dim];
        q[h] = 1.0;
        let bits: Vec<bool> = (0..dim).map(|k| k == h).collect();
        let qc = BitCode::from_bits(&bits);
        hamming_scan_top1(&packed, wpc, &qc.words) == cosine_scan_top1(&dense, &q)
    })
}
