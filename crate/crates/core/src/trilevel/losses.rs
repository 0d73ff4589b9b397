use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::{log_sigmoid, sigmoid, Matrix2D, MlpParams};
use crate::networks::{retrieve_topk, CodeMode, Encoding, Head, MatchingNet, SiameseNet};
use crate::similarity::{num_pairs, pair_index, SimilarityMatrix};

use super::settings::{LossMode, PredictMode};

/// Bounds on the Siamese probability inside the stage-one loss.
pub const PROB_CLAMP: f64 = 1e-7;
/// Floor on the predicted probability of the true class before the log.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

/// Per-iteration logistic noise for the hash heads, one row per training
/// example followed by one row per validation example. `None` thresholds the
/// relaxation at zero noise.
#[derive(Debug, Clone, Default)]
pub struct Noise {
    pub siamese: Option<Matrix2D>,
    pub matching: Option<Matrix2D>,
}

/// The data and switches that every stage loss is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub loss_mode: LossMode,
    pub predict_mode: PredictMode,
    pub allow_self_match: bool,
    pub code_mode: CodeMode,
    pub noise: &'a Noise,
}

#[derive(Debug, Clone)]
pub struct SiameseLoss {
    pub loss: f64,
    pub grad_t: MlpParams,
    /// `∂loss/∂A`, dense over every stored pair; zero outside the batch.
    pub grad_a: Vec<f64>,
    pub clamps: usize,
}

#[derive(Debug, Clone)]
pub struct MatchLoss {
    pub loss: f64,
    pub grad_t: MlpParams,
    pub grad_s: MlpParams,
    pub clamps: usize,
}

impl<'a> LossContext<'a> {
    fn encode(
        &self,
        params: &MlpParams,
        head: Head,
        noise: Option<&Matrix2D>,
        train_rows: &[usize],
        val_rows: &[usize],
    ) -> Result<Encoding> {
        let mut x = self.train.features().select_rows(train_rows);
        if !val_rows.is_empty() {
            x = x.vstack(&self.val.features().select_rows(val_rows))?;
        }
        let noise = match (head, noise) {
            (Head::Hash { .. }, Some(n)) => {
                let n_train = self.train.len();
                let rows: Vec<usize> = train_rows
                    .iter()
                    .copied()
                    .chain(val_rows.iter().map(|r| n_train + r))
                    .collect();
                Some(n.select_rows(&rows))
            }
            _ => None,
        };
        Encoding::new(params, head, &x, self.code_mode, noise.as_ref())
    }
}

fn check_rows(rows: &[usize], n: usize, what: &'static str) -> Result<()> {
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Range {
            what,
            detail: format!("row {r} with {n} rows"),
        });
    }
    Ok(())
}

/// Stage-one loss over every pair `i < j` inside `batch` (training rows).
pub fn loss_siamese(ctx: &LossContext, sim: &SimilarityMatrix, t: &SiameseNet, batch: &[usize]) -> Result<SiameseLoss> {
    let n = ctx.train.len();
    check_rows(batch, n, "siamese batch")?;
    if sim.n() != n {
        return Err(Error::shape("similarity matrix", n, sim.n()));
    }
    let mut rows = batch.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let enc = ctx.encode(&t.encoder, t.head, ctx.noise.siamese.as_ref(), &rows, &[])?;
    let mut grad_feats = enc.zero_grad();
    let mut grad_a = vec![0.0; num_pairs(n)];
    let n_pairs = (rows.len() * rows.len().saturating_sub(1) / 2).max(1) as f64;
    let (mut loss, mut clamps) = (0.0, 0);
    let logits = sim.logits();
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            let k = pair_index(n, rows[a], rows[b]);
            let target = sigmoid(logits[k]);
            let x = enc.score(a, b) / t.tau;
            let f = sigmoid(x);
            let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&f);
            let (log_f, log_1mf) = if clamped {
                clamps += 1;
                let fc = f.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                (fc.ln(), (-fc).ln_1p())
            } else {
                (log_sigmoid(x), log_sigmoid(-x))
            };
            let (term, dx, da) = match ctx.loss_mode {
                LossMode::Bce => (
                    -(target * log_f + (1.0 - target) * log_1mf),
                    f - target,
                    log_1mf - log_f,
                ),
                LossMode::Literal => (-target * log_f, -target * (1.0 - f), -log_f),
            };
            loss += term;
            grad_a[k] = da / n_pairs;
            if !clamped {
                enc.add_score_grad(&mut grad_feats, a, b, dx / (t.tau * n_pairs));
            }
        }
    }
    Ok(SiameseLoss {
        loss: loss / n_pairs,
        grad_t: enc.backward(&t.encoder, &grad_feats)?,
        grad_a,
        clamps,
    })
}

/// Prediction for one query row of an encoding pair: candidates, their
/// normalized weights, and the class distribution.
struct QueryPrediction {
    cands: Vec<usize>,
    /// `σ(−score_T/τ)` per candidate, i.e. `1 − f`.
    one_minus_f: Vec<f64>,
    weights: Vec<f64>,
    dist: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn predict_query(
    t_enc: &Encoding,
    s_enc: &Encoding,
    tau: f64,
    q: usize,
    n_cand: usize,
    exclude: Option<usize>,
    mode: PredictMode,
    labels: &[usize],
    n_classes: usize,
) -> Result<QueryPrediction> {
    let pool: Vec<usize> = (0..n_cand).filter(|&j| Some(j) != exclude).collect();
    if pool.is_empty() {
        return Err(Error::RetrievalEmpty);
    }
    let x = |j: usize| t_enc.score(q, j) / tau;
    let cands = match mode {
        PredictMode::Soft => pool,
        PredictMode::TopK(k) => {
            let mut c = retrieve_topk(x, &pool, k)?;
            // Summation order must not depend on the mode.
            c.sort_unstable();
            c
        }
    };
    let mut one_minus_f = Vec::with_capacity(cands.len());
    let mut u = Vec::with_capacity(cands.len());
    for &j in &cands {
        let xj = x(j);
        one_minus_f.push(sigmoid(-xj));
        u.push(log_sigmoid(xj) + s_enc.score(q, j));
    }
    let weights = crate::networks::softmax(&u);
    let mut dist = vec![0.0; n_classes];
    for (&j, &w) in cands.iter().zip(&weights) {
        dist[labels[j]] += w;
    }
    Ok(QueryPrediction {
        cands,
        one_minus_f,
        weights,
        dist,
    })
}

/// A query with its label and the candidate it must not match.
#[derive(Debug, Clone, Copy)]
struct Query {
    row: usize,
    label: usize,
    exclude: Option<usize>,
}

/// Mean of `−log ŷ[y]` over the queries, candidates being encoding rows
/// `0..n_cand` (the training set).
fn match_loss(
    ctx: &LossContext,
    t: &SiameseNet,
    s: &MatchingNet,
    t_enc: &Encoding,
    s_enc: &Encoding,
    queries: &[Query],
) -> Result<MatchLoss> {
    if queries.is_empty() {
        return Err(Error::Range {
            what: "query batch",
            detail: "empty".into(),
        });
    }
    let labels = ctx.train.labels();
    let n_cand = ctx.train.len();
    let scale = 1.0 / queries.len() as f64;
    let mut g_t = t_enc.zero_grad();
    let mut g_s = s_enc.zero_grad();
    let (mut loss, mut clamps) = (0.0, 0);
    for q in queries {
        let pred = predict_query(
            t_enc,
            s_enc,
            t.tau,
            q.row,
            n_cand,
            q.exclude,
            ctx.predict_mode,
            labels,
            ctx.train.n_classes(),
        )?;
        let y_hat = pred.dist[q.label];
        if y_hat < LIKELIHOOD_FLOOR {
            loss -= LIKELIHOOD_FLOOR.ln();
            clamps += 1;
            continue;
        }
        loss -= y_hat.ln();
        for (c, &j) in pred.cands.iter().enumerate() {
            let p = pred.weights[c];
            let hit = if labels[j] == q.label { p / y_hat } else { 0.0 };
            let du = scale * (p - hit);
            t_enc.add_score_grad(&mut g_t, q.row, j, du * pred.one_minus_f[c] / t.tau);
            s_enc.add_score_grad(&mut g_s, q.row, j, du);
        }
    }
    Ok(MatchLoss {
        loss: loss * scale,
        grad_t: t_enc.backward(&t.encoder, &g_t)?,
        grad_s: s_enc.backward(&s.encoder, &g_s)?,
        clamps,
    })
}

/// Stage-two loss: each training row in `batch` queries the training set,
/// itself excluded unless self-matches are allowed.
pub fn loss_matching(ctx: &LossContext, t_prime: &SiameseNet, s: &MatchingNet, batch: &[usize]) -> Result<MatchLoss> {
    let n = ctx.train.len();
    check_rows(batch, n, "matching batch")?;
    let all: Vec<usize> = (0..n).collect();
    let t_enc = ctx.encode(&t_prime.encoder, t_prime.head, ctx.noise.siamese.as_ref(), &all, &[])?;
    let s_enc = ctx.encode(&s.encoder, s.head, ctx.noise.matching.as_ref(), &all, &[])?;
    let labels = ctx.train.labels();
    let queries: Vec<Query> = batch
        .iter()
        .map(|&r| Query {
            row: r,
            label: labels[r],
            exclude: (!ctx.allow_self_match).then_some(r),
        })
        .collect();
    match_loss(ctx, t_prime, s, &t_enc, &s_enc, &queries)
}

/// Validation loss: rows of the validation set query the whole training set.
pub fn loss_validation(
    ctx: &LossContext,
    t_prime: &SiameseNet,
    s_prime: &MatchingNet,
    val_batch: &[usize],
) -> Result<MatchLoss> {
    let n = ctx.train.len();
    check_rows(val_batch, ctx.val.len(), "validation batch")?;
    let all: Vec<usize> = (0..n).collect();
    let t_enc = ctx.encode(
        &t_prime.encoder,
        t_prime.head,
        ctx.noise.siamese.as_ref(),
        &all,
        val_batch,
    )?;
    let s_enc = ctx.encode(
        &s_prime.encoder,
        s_prime.head,
        ctx.noise.matching.as_ref(),
        &all,
        val_batch,
    )?;
    let labels = ctx.val.labels();
    let queries: Vec<Query> = val_batch
        .iter()
        .enumerate()
        .map(|(k, &r)| Query {
            row: n + k,
            label: labels[r],
            exclude: None,
        })
        .collect();
    match_loss(ctx, t_prime, s_prime, &t_enc, &s_enc, &queries)
}

/// How codes are produced when predicting outside of training.
#[derive(Debug, Clone, Copy, Default)]
pub struct Inference<'a> {
    /// Logistic noise for the Siamese and matching hash heads, one row per
    /// training example followed by one per query. `None` thresholds.
    pub noise_t: Option<&'a Matrix2D>,
    pub noise_s: Option<&'a Matrix2D>,
}

/// Class distributions for each row of `queries` against the training set.
/// `exclude[q]` names a training row that query `q` must not retrieve.
pub fn predict(
    t: &SiameseNet,
    s: &MatchingNet,
    train: &Dataset,
    queries: &Matrix2D,
    mode: PredictMode,
    exclude: &[Option<usize>],
    inference: Inference,
) -> Result<Vec<Vec<f64>>> {
    if exclude.len() != queries.rows() {
        return Err(Error::shape("predict exclusions", queries.rows(), exclude.len()));
    }
    if queries.cols() != train.dim() {
        return Err(Error::shape("predict queries", train.dim(), queries.cols()));
    }
    let n = train.len();
    let x = train.features().vstack(queries)?;
    let t_enc = Encoding::new(&t.encoder, t.head, &x, CodeMode::StraightThrough, inference.noise_t)?;
    let s_enc = Encoding::new(&s.encoder, s.head, &x, CodeMode::StraightThrough, inference.noise_s)?;
    (0..queries.rows())
        .map(|q| {
            predict_query(
                &t_enc,
                &s_enc,
                t.tau,
                n + q,
                n,
                exclude[q],
                mode,
                train.labels(),
                train.n_classes(),
            )
            .map(|p| p.dist)
        })
        .collect()
}
