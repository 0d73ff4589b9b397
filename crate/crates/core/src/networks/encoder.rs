use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{dot, sigmoid, Matrix2D, MlpCache, MlpParams};

/// Guard on embedding norms in the cosine head.
pub const NORM_EPS: f64 = 1e-12;

/// How an encoder's output is turned into the features that pairs are scored on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Head {
    /// Unit-normalized embeddings; pair score is the cosine similarity.
    Cosine,
    /// Binary codes of `code_bits` bits (the encoder output width); pair
    /// score is `2·hamming_sim − 1`, which is the cosine of the ±1 codes.
    Hash { code_bits: usize, gumbel_temp: f64 },
}

impl Head {
    pub fn is_hash(&self) -> bool {
        matches!(self, Head::Hash { .. })
    }
}

/// How a hash head binarizes its Bernoulli probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeMode {
    /// Relaxed bits `σ((z + L)/t)`, fully differentiable.
    Soft,
    /// Hard bits `1[z + L > 0]` forward, gradient of the relaxation backward.
    StraightThrough,
}

/// Logistic noise `log u − log(1 − u)`, one entry per code bit.
pub fn logistic_noise<R: Rng + ?Sized>(rows: usize, bits: usize, rng: &mut R) -> Matrix2D {
    let data = (0..rows * bits)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            u.ln() - (-u).ln_1p()
        })
        .collect();
    Matrix2D::from_vec(rows, bits, data).expect("noise shape")
}

/// A batch pushed through an encoder and its head, with everything needed to
/// score pairs of rows and to backpropagate pair-score gradients.
#[derive(Debug, Clone)]
pub struct Encoding {
    head: Head,
    cache: MlpCache,
    /// Cosine: normalized embeddings. Hash: bits (hard or relaxed).
    feats: Matrix2D,
    /// Cosine: guarded norms. Hash: per-row bit sums.
    aux: Vec<f64>,
    /// Hash only: `∂bit/∂z` of the relaxation.
    dbit_dz: Option<Matrix2D>,
}

impl Encoding {
    /// Encodes `x`. For hash heads `noise` (rows × bits) perturbs the logits;
    /// `None` means zero noise, i.e. thresholding at `p = 0.5`.
    pub fn new(params: &MlpParams, head: Head, x: &Matrix2D, mode: CodeMode, noise: Option<&Matrix2D>) -> Result<Self> {
        let (z, cache) = params.forward(x)?;
        match head {
            Head::Cosine => {
                let mut feats = z;
                let mut norms = Vec::with_capacity(feats.rows());
                for r in 0..feats.rows() {
                    let row = feats.row_mut(r);
                    let n = dot(row, row).sqrt().max(NORM_EPS);
                    row.iter_mut().for_each(|v| *v /= n);
                    norms.push(n);
                }
                Ok(Encoding {
                    head,
                    cache,
                    feats,
                    aux: norms,
                    dbit_dz: None,
                })
            }
            Head::Hash { code_bits, gumbel_temp } => {
                if z.cols() != code_bits {
                    return Err(Error::shape("hash head", code_bits, z.cols()));
                }
                if let Some(nz) = noise {
                    if nz.shape() != z.shape() {
                        return Err(Error::shape(
                            "gumbel noise",
                            format!("{}x{}", z.rows(), z.cols()),
                            format!("{}x{}", nz.rows(), nz.cols()),
                        ));
                    }
                }
                let mut feats = Matrix2D::zeros(z.rows(), code_bits);
                let mut dbit = Matrix2D::zeros(z.rows(), code_bits);
                for (k, &zv) in z.data().iter().enumerate() {
                    let l = zv + noise.map_or(0.0, |n| n.data()[k]);
                    let s = sigmoid(l / gumbel_temp);
                    feats.data_mut()[k] = match mode {
                        CodeMode::Soft => s,
                        CodeMode::StraightThrough => f64::from(u8::from(l > 0.0)),
                    };
                    dbit.data_mut()[k] = s * (1.0 - s) / gumbel_temp;
                }
                let aux = (0..feats.rows()).map(|r| feats.row(r).iter().sum()).collect();
                Ok(Encoding {
                    head,
                    cache,
                    feats,
                    aux,
                    dbit_dz: Some(dbit),
                })
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.feats.rows()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn feats(&self) -> &Matrix2D {
        &self.feats
    }

    #[inline]
    pub fn score(&self, i: usize, j: usize) -> f64 {
        let d = dot(self.feats.row(i), self.feats.row(j));
        match self.head {
            Head::Cosine => d,
            Head::Hash { code_bits, .. } => {
                let b = code_bits as f64;
                1.0 - 2.0 * (self.aux[i] + self.aux[j]) / b + 4.0 * d / b
            }
        }
    }

    pub fn zero_grad(&self) -> Matrix2D {
        Matrix2D::zeros(self.feats.rows(), self.feats.cols())
    }

    /// Adds `g·∂score(i, j)/∂feats` into `grad`.
    #[inline]
    pub fn add_score_grad(&self, grad: &mut Matrix2D, i: usize, j: usize, g: f64) {
        if g == 0.0 {
            return;
        }
        match self.head {
            Head::Cosine => {
                for k in 0..self.feats.cols() {
                    grad[(i, k)] += g * self.feats[(j, k)];
                    grad[(j, k)] += g * self.feats[(i, k)];
                }
            }
            Head::Hash { code_bits, .. } => {
                let b = code_bits as f64;
                for k in 0..self.feats.cols() {
                    grad[(i, k)] += g * (4.0 * self.feats[(j, k)] - 2.0) / b;
                    grad[(j, k)] += g * (4.0 * self.feats[(i, k)] - 2.0) / b;
                }
            }
        }
    }

    /// Pulls a gradient with respect to the features back to the encoder
    /// parameters.
    pub fn backward(&self, params: &MlpParams, grad_feats: &Matrix2D) -> Result<MlpParams> {
        if grad_feats.shape() != self.feats.shape() {
            return Err(Error::shape(
                "encoding backward",
                format!("{}x{}", self.feats.rows(), self.feats.cols()),
                format!("{}x{}", grad_feats.rows(), grad_feats.cols()),
            ));
        }
        let mut dz = grad_feats.clone();
        match &self.dbit_dz {
            None => {
                for r in 0..dz.rows() {
                    let e = self.feats.row(r);
                    let n = self.aux[r];
                    let row = dz.row_mut(r);
                    if n > NORM_EPS {
                        let proj = dot(e, row);
                        for (d, &ev) in row.iter_mut().zip(e) {
                            *d = (*d - ev * proj) / n;
                        }
                    } else {
                        row.iter_mut().for_each(|d| *d /= NORM_EPS);
                    }
                }
            }
            Some(dbit) => {
                for (d, &s) in dz.data_mut().iter_mut().zip(dbit.data()) {
                    *d *= s;
                }
            }
        }
        Ok(params.backward(&self.cache, &dz)?.0)
    }
}
