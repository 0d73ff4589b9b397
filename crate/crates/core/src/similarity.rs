//! The learnable "ground-truth" similarity matrix over training examples.
//!
//! Each unordered pair `i < j` owns one free logit `θ_ij` and
//! `A_ij = A_ji = σ(θ_ij)`, so symmetry and the range `(0, 1)` hold by
//! construction no matter how the logits are updated. The diagonal is not
//! stored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{adam_step, sigmoid, AdamHyper, AdamState, Matrix2D};

/// Position of the pair `(i, j)`, `i < j < n`, in the packed upper triangle.
#[inline]
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

pub fn num_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Iterates `(i, j)` with `i < j < n` in packed order.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    logits: Vec<f64>,
    adam: AdamState,
}

/// Logit used for the label-informed initialization.
pub const LABEL_INIT_LOGIT: f64 = 2.0;

impl SimilarityMatrix {
    /// All logits zero, i.e. every off-diagonal entry is 0.5.
    pub fn new(n: usize) -> Self {
        SimilarityMatrix {
            n,
            logits: vec![0.0; num_pairs(n)],
            adam: AdamState::new(num_pairs(n)),
        }
    }

    /// `+2` for same-label pairs and `−2` otherwise.
    pub fn from_labels(labels: &[usize]) -> Self {
        let n = labels.len();
        let mut m = Self::new(n);
        for (k, (i, j)) in pairs(n).enumerate() {
            m.logits[k] = if labels[i] == labels[j] {
                LABEL_INIT_LOGIT
            } else {
                -LABEL_INIT_LOGIT
            };
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_pairs(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn set_logits(&mut self, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.logits.len() {
            return Err(Error::shape(
                "SimilarityMatrix::set_logits",
                self.logits.len(),
                logits.len(),
            ));
        }
        self.logits = logits;
        Ok(())
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    fn index(&self, i: usize, j: usize) -> Result<usize> {
        if i >= self.n || j >= self.n {
            return Err(Error::Range {
                what: "similarity index",
                detail: format!("({i}, {j}) with n = {}", self.n),
            });
        }
        if i == j {
            return Err(Error::DiagonalAccess(i));
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        Ok(pair_index(self.n, a, b))
    }

    pub fn value(&self, i: usize, j: usize) -> Result<f64> {
        Ok(sigmoid(self.logits[self.index(i, j)?]))
    }

    /// `A` for every stored pair, in packed order.
    pub fn values(&self) -> Vec<f64> {
        self.logits.iter().map(|&t| sigmoid(t)).collect()
    }

    /// Chain rule through the sigmoid: `∂/∂θ = ∂/∂A · A·(1 − A)`.
    pub fn chain_to_logits(&self, grad_a: &[f64]) -> Result<Vec<f64>> {
        if grad_a.len() != self.logits.len() {
            return Err(Error::shape("chain_to_logits", self.logits.len(), grad_a.len()));
        }
        Ok(grad_a
            .iter()
            .zip(&self.logits)
            .map(|(g, &t)| {
                let a = sigmoid(t);
                g * a * (1.0 - a)
            })
            .collect())
    }

    /// One Adam step on the logits given a gradient with respect to `A`.
    pub fn update(&mut self, grad_a: &[f64], hyper: &AdamHyper) -> Result<()> {
        if grad_a.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("similarity gradient".into()));
        }
        let grad_theta = self.chain_to_logits(grad_a)?;
        adam_step(&mut self.logits, &grad_theta, &mut self.adam, hyper)
    }

    /// Dense symmetric view of the given subset, with 1.0 on the diagonal.
    pub fn snapshot(&self, ids: &[usize]) -> Result<Matrix2D> {
        let mut seen = ids.to_vec();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(w[0]));
        }
        let k = ids.len();
        let mut m = Matrix2D::identity(k);
        for a in 0..k {
            for b in a + 1..k {
                let v = self.value(ids[a], ids[b])?;
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
        }
        Ok(m)
    }

    /// Mean of `A` over same-label pairs and over different-label pairs.
    /// Either mean is NaN when no such pair exists.
    pub fn class_means(&self, labels: &[usize]) -> (f64, f64) {
        let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
        for ((i, j), &t) in pairs(self.n).zip(&self.logits) {
            if labels[i] == labels[j] {
                intra += sigmoid(t);
                n_intra += 1;
            } else {
                inter += sigmoid(t);
                n_inter += 1;
            }
        }
        (intra / n_intra as f64, inter / n_inter as f64)
    }
}

/// CSV rendering of a snapshot: an `id` header column, then one column per id.
pub fn snapshot_csv(ids: &[usize], snapshot: &Matrix2D) -> String {
    let mut out = String::from("id");
    for id in ids {
        out.push_str(&format!(",{id}"));
    }
    out.push('\n');
    for (r, id) in ids.iter().enumerate() {
        out.push_str(&id.to_string());
        for v in snapshot.row(r) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn packed_indexing_covers_every_pair_once() {
        let n = 7;
        let idx: Vec<usize> = pairs(n).map(|(i, j)| pair_index(n, i, j)).collect();
        assert_eq!(idx, (0..num_pairs(n)).collect::<Vec<_>>());
    }

    #[test]
    fn fresh_matrix_is_half() {
        let m = SimilarityMatrix::new(5);
        assert_eq!(m.value(1, 3).unwrap(), 0.5);
        let s = m.snapshot(&[0, 2, 4]).unwrap();
        assert_eq!(s.data(), &[1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0]);
        assert_eq!(s, s.transpose());
        assert_eq!(m.snapshot(&[3]).unwrap().data(), &[1.0]);
    }

    #[test]
    fn access_errors() {
        let m = SimilarityMatrix::new(4);
        assert!(matches!(m.value(2, 2), Err(Error::DiagonalAccess(2))));
        assert!(matches!(m.value(0, 4), Err(Error::Range { .. })));
        assert!(matches!(m.snapshot(&[1, 2, 1]), Err(Error::DuplicateId(1))));
    }

    #[test]
    fn value_is_monotone_in_logit() {
        let mut m = SimilarityMatrix::new(8);
        let k = pair_index(8, 3, 7);
        let mut prev = 0.0;
        for t in [-40.0, -5.0, -1.0, 0.0, 1.0, 5.0, 40.0] {
            let mut l = m.logits().to_vec();
            l[k] = t;
            m.set_logits(l).unwrap();
            let v = m.value(7, 3).unwrap();
            assert!(v > prev);
            assert_eq!(v, m.value(3, 7).unwrap());
            prev = v;
        }
        assert!(prev > 1.0 - 1e-15);
    }

    #[test]
    fn chain_rule_at_zero_logit() {
        let m = SimilarityMatrix::new(3);
        assert_eq!(m.chain_to_logits(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(m.chain_to_logits(&[1.0, -2.0, 4.0]).unwrap(), vec![0.25, -0.5, 1.0]);
        assert!(m.chain_to_logits(&[1.0]).is_err());
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let mut m = SimilarityMatrix::new(4);
        let logits: Vec<f64> = (0..6).map(|k| (k as f64 - 2.5) * 0.9).collect();
        m.set_logits(logits.clone()).unwrap();
        let g = m.chain_to_logits(&[1.0; 6]).unwrap();
        for (k, &t) in logits.iter().enumerate() {
            let eps = 1e-6;
            let fd = (sigmoid(t + eps) - sigmoid(t - eps)) / (2.0 * eps);
            assert!((g[k] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn update_descends() {
        let mut m = SimilarityMatrix::new(4);
        let before = m.clone();
        m.update(&[0.0; 6], &AdamHyper::new(1e-3, 0.0)).unwrap();
        assert_eq!(m.logits(), before.logits());

        let mut g = vec![0.0; 6];
        g[pair_index(4, 1, 2)] = 0.7;
        m.update(&g, &AdamHyper::new(1e-3, 1e-3)).unwrap();
        assert!(m.value(1, 2).unwrap() < 0.5);
        assert!(matches!(
            m.update(&[f64::NAN; 6], &AdamHyper::new(1e-3, 0.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn update_follows_scalar_adam() {
        let mut m = SimilarityMatrix::new(2);
        let h = AdamHyper::new(1e-3, 1e-3);
        let (mut th, mut mo, mut ve) = (0.0f64, 0.0f64, 0.0f64);
        for (t, g_a) in [0.3, -0.1, 0.8, 0.2].into_iter().enumerate() {
            m.update(&[g_a], &h).unwrap();
            let a = sigmoid(th);
            let g = g_a * a * (1.0 - a) + 1e-3 * th;
            mo = 0.9 * mo + 0.1 * g;
            ve = 0.999 * ve + 0.001 * g * g;
            let k = t as i32 + 1;
            th -= 1e-3 * (mo / (1.0 - 0.9f64.powi(k))) / ((ve / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((m.logits()[0] - th).abs() < 1e-16);
        }
    }

    #[test]
    fn label_init_and_class_means() {
        let labels = [0, 0, 1, 1, 1];
        let m = SimilarityMatrix::from_labels(&labels);
        let (intra, inter) = m.class_means(&labels);
        assert!((intra - sigmoid(2.0)).abs() < 1e-15);
        assert!((inter - sigmoid(-2.0)).abs() < 1e-15);
    }

    #[test]
    fn snapshot_csv_layout() {
        let m = SimilarityMatrix::new(3);
        let csv = snapshot_csv(&[2, 0], &m.snapshot(&[2, 0]).unwrap());
        assert_eq!(csv, "id,2,0\n2,1,0.5\n0,0.5,1\n");
    }

    proptest! {
        #[test]
        fn updates_keep_symmetry_and_range(grads in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 10), 1..20)) {
            let mut m = SimilarityMatrix::new(5);
            for g in &grads {
                m.update(g, &AdamHyper::new(0.5, 1e-3)).unwrap();
            }
            for i in 0..5 {
                for j in 0..5 {
                    if i != j {
                        let v = m.value(i, j).unwrap();
                        prop_assert!(v > 0.0 && v < 1.0);
                        prop_assert_eq!(v, m.value(j, i).unwrap());
                    }
                }
            }
        }
    }
}
