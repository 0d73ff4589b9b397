//! The Siamese retriever, the matching kernel, and the binary-hash fast path.

mod encoder;
mod hash;

use serde::{Deserialize, Serialize};

pub use encoder::{logistic_noise, CodeMode, Encoding, Head, NORM_EPS};
pub use hash::{
    bench_hash, codebook_from_logits, cosine_scan_top1, encode_codes, hamming_distance, hamming_scan_top1, hamming_sim,
    one_hot_agreement, BinaryCodebook, BitCode, HashBenchReport,
};

use crate::error::{Error, Result};
use crate::ndcore::{sigmoid, Matrix2D, MlpParams};

/// Pair retriever `f(x_i, x_j) = σ(score(x_i, x_j)/τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseNet {
    pub encoder: MlpParams,
    pub tau: f64,
    pub head: Head,
}

/// Kernel `c(x_q, x_j) = softmax_j score(x_q, x_j)` over a candidate set.
///
/// With `tied` set the encoder is kept equal to the Siamese encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingNet {
    pub encoder: MlpParams,
    pub head: Head,
    pub tied: bool,
}

impl SiameseNet {
    pub fn new(encoder: MlpParams, tau: f64, head: Head) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(SiameseNet { encoder, tau, head })
    }

    /// Probability from a pair score.
    #[inline]
    pub fn prob_from_score(&self, score: f64) -> f64 {
        sigmoid(score / self.tau)
    }
}

fn pair_batch(a: &[f64], b: &[f64]) -> Result<Matrix2D> {
    if a.len() != b.len() {
        return Err(Error::shape("pair inputs", a.len(), b.len()));
    }
    Matrix2D::from_rows(&[a, b])
}

/// `f(x_i, x_j; T)`. Hash heads use thresholded codes.
pub fn siamese_prob(net: &SiameseNet, x_i: &[f64], x_j: &[f64]) -> Result<f64> {
    let e = Encoding::new(
        &net.encoder,
        net.head,
        &pair_batch(x_i, x_j)?,
        CodeMode::StraightThrough,
        None,
    )?;
    Ok(net.prob_from_score(e.score(0, 1)))
}

/// Normalized kernel weights of `query` against each candidate row.
pub fn match_kernel(net: &MatchingNet, query: &[f64], candidates: &Matrix2D) -> Result<Vec<f64>> {
    if candidates.rows() == 0 {
        return Err(Error::RetrievalEmpty);
    }
    let q = Matrix2D::from_rows(&[query])?;
    let all = q.vstack(candidates)?;
    let e = Encoding::new(&net.encoder, net.head, &all, CodeMode::StraightThrough, None)?;
    let scores: Vec<f64> = (1..all.rows()).map(|j| e.score(0, j)).collect();
    Ok(softmax(&scores))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// The `k` candidates with the highest score, best first; equal scores are
/// ordered by ascending id. Asking for more than exist returns them all.
pub fn retrieve_topk(score: impl Fn(usize) -> f64, ids: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Range {
            what: "k",
            detail: "must be at least 1".into(),
        });
    }
    let mut scored: Vec<(f64, usize)> = ids.iter().map(|&id| (score(id), id)).collect();
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    scored.sort_by(by_rank);
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}
