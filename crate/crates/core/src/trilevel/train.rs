use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Episode, Standardizer};
use crate::error::{Error, Result};
use crate::ndcore::{cosine_lr, sgd_momentum_step, AdamHyper, Matrix2D, MlpParams, MomentumState};
use crate::networks::{
    codebook_from_logits, logistic_noise, BinaryCodebook, CodeMode, Encoding, Head, MatchingNet, SiameseNet,
};
use crate::rng::{stream, Stream};
use crate::similarity::{pairs, SimilarityMatrix};

use super::hypergrad::{hypergrad_a, virtual_step_t};
use super::losses::{
    loss_matching, loss_siamese, loss_validation, predict, Inference, LossContext, Noise, LIKELIHOOD_FLOOR,
};
use super::settings::{LbeConfig, PredictMode, SimInit, XiPolicy};

/// Everything that evolves during training, plus what prediction needs
/// afterwards: the standardized training set and its standardizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbeState {
    pub config: LbeConfig,
    pub siamese: SiameseNet,
    pub matching: MatchingNet,
    pub sim: SimilarityMatrix,
    pub t_momentum: MomentumState,
    pub s_momentum: MomentumState,
    pub xi_t: f64,
    pub xi_s: f64,
    /// Outer iterations taken so far.
    pub step: usize,
    pub standardizer: Standardizer,
    pub train: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_t: f64,
    pub loss_s: f64,
    pub loss_val: f64,
    pub val_top1: f64,
    pub alpha_t: f64,
    pub alpha_s: f64,
    pub intra_a_mean: f64,
    pub inter_a_mean: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_T,loss_S,loss_val,val_top1,alpha_T,alpha_S,intra_A_mean,inter_A_mean";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_t,
            self.loss_s,
            self.loss_val,
            self.val_top1,
            self.alpha_t,
            self.alpha_s,
            self.intra_a_mean,
            self.inter_a_mean
        )
    }
}

/// Header plus one row per epoch.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

impl LbeState {
    /// Fresh networks and similarity matrix for `train` (raw features).
    pub fn init(config: &LbeConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        let standardizer = Standardizer::fit(train);
        let train = standardizer.apply(train)?;
        let mut rng = stream(config.seed, Stream::Init);
        let dims = |head: Head| {
            let mut d = vec![train.dim()];
            d.extend(&config.hidden);
            d.push(config.output_dim(head));
            d
        };
        let t_head = config.siamese_head();
        let s_head = config.matching_head();
        let t_enc = MlpParams::init(&dims(t_head), &mut rng)?;
        let s_enc = if config.tie_weights {
            t_enc.clone()
        } else {
            MlpParams::init(&dims(s_head), &mut rng)?
        };
        let sim = match config.sim_init {
            SimInit::Uniform => SimilarityMatrix::new(train.len()),
            SimInit::Labels => SimilarityMatrix::from_labels(train.labels()),
        };
        let (xi_t, xi_s) = match config.xi {
            XiPolicy::Scheduled => (config.opt_t.lr, config.opt_s.lr),
            XiPolicy::Fixed { t, s } => (t, s),
        };
        Ok(LbeState {
            t_momentum: MomentumState::new(t_enc.num_params()),
            s_momentum: MomentumState::new(s_enc.num_params()),
            siamese: SiameseNet::new(t_enc, config.tau, t_head)?,
            matching: MatchingNet {
                encoder: s_enc,
                head: s_head,
                tied: config.tie_weights,
            },
            sim,
            xi_t,
            xi_s,
            step: 0,
            standardizer,
            train,
            config: config.clone(),
        })
    }

    fn check_finite(&self) -> bool {
        self.siamese.encoder.flat().iter().all(|v| v.is_finite())
            && self.matching.encoder.flat().iter().all(|v| v.is_finite())
            && self.sim.logits().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Default)]
struct Accum {
    loss_t: f64,
    loss_s: f64,
    loss_val: f64,
    alpha_t: f64,
    alpha_s: f64,
    n: usize,
}

/// Algorithm driver. Calls `observe(epochs_done, &state)` once before the
/// first epoch and after every epoch.
pub fn train_lbe_with<F>(
    config: &LbeConfig,
    train: &Dataset,
    val: &Dataset,
    mut observe: F,
) -> Result<(LbeState, Vec<EpochMetrics>)>
where
    F: FnMut(usize, &LbeState),
{
    let mut state = LbeState::init(config, train)?;
    let val = state.standardizer.apply(val)?;
    if val.n_classes() != state.train.n_classes() {
        return Err(Error::shape(
            "validation classes",
            state.train.n_classes(),
            val.n_classes(),
        ));
    }
    observe(0, &state);
    let n = state.train.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total = config.epochs * per_epoch;
    let mut batch_rng = stream(config.seed, Stream::Batching);
    let mut gumbel_rng = stream(config.seed, Stream::Gumbel);
    let adam = AdamHyper::new(config.opt_a.lr, config.opt_a.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut batch_rng);
        let mut acc = Accum::default();
        for (it, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let mut val_batch = index::sample(&mut batch_rng, val.len(), config.batch_size.min(val.len())).into_vec();
            val_batch.sort_unstable();
            let noise = draw_noise(&state, val.len(), &mut gumbel_rng);
            outer_iteration(&mut state, &val, &batch, &val_batch, &noise, total, &adam, &mut acc).map_err(|e| {
                Error::NonFinite(format!(
                    "training aborted at epoch {epoch}, iteration {it}, step {}: {e}",
                    state.step
                ))
            })?;
        }
        let m = acc.n.max(1) as f64;
        let (intra, inter) = state.sim.class_means(state.train.labels());
        let report = evaluate_prepared(&state, &val, false)?;
        let metrics = EpochMetrics {
            epoch,
            loss_t: acc.loss_t / m,
            loss_s: acc.loss_s / m,
            loss_val: acc.loss_val / m,
            val_top1: report.top1,
            alpha_t: acc.alpha_t / m,
            alpha_s: acc.alpha_s / m,
            intra_a_mean: intra,
            inter_a_mean: inter,
        };
        history.push(metrics);
        observe(epoch, &state);
        if config.patience > 0 {
            let v = acc.loss_val / m;
            if v < best_val {
                best_val = v;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
    }
    Ok((state, history))
}

pub fn train_lbe(config: &LbeConfig, train: &Dataset, val: &Dataset) -> Result<(LbeState, Vec<EpochMetrics>)> {
    train_lbe_with(config, train, val, |_, _| {})
}

fn draw_noise(state: &LbeState, n_val: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Noise {
    let rows = state.train.len() + n_val;
    let draw = |head: Head, rng: &mut rand_chacha::ChaCha8Rng| match head {
        Head::Hash { code_bits, .. } => Some(logistic_noise(rows, code_bits, rng)),
        Head::Cosine => None,
    };
    let siamese = draw(state.siamese.head, rng);
    let matching = draw(state.matching.head, rng);
    Noise { siamese, matching }
}

#[allow(clippy::too_many_arguments)]
fn outer_iteration(
    state: &mut LbeState,
    val: &Dataset,
    batch: &[usize],
    val_batch: &[usize],
    noise: &Noise,
    total: usize,
    adam: &AdamHyper,
    acc: &mut Accum,
) -> Result<()> {
    let cfg = state.config.clone();
    let lr_t = cosine_lr(state.step, total, cfg.opt_t.lr)?;
    let lr_s = cosine_lr(state.step, total, cfg.opt_s.lr)?;
    (state.xi_t, state.xi_s) = match cfg.xi {
        XiPolicy::Scheduled => (lr_t, lr_s),
        XiPolicy::Fixed { t, s } => (t, s),
    };
    let train = state.train.clone();
    let ctx = LossContext {
        train: &train,
        val,
        loss_mode: cfg.loss_mode,
        predict_mode: cfg.predict_mode,
        allow_self_match: cfg.allow_self_match,
        code_mode: cfg.train_code_mode(),
        noise,
    };

    // 1. Similarity matrix.
    if cfg.freeze_a {
        acc.loss_val += loss_validation(&ctx, &state.siamese, &state.matching, val_batch)?.loss;
    } else {
        let r = hypergrad_a(
            &ctx,
            &state.sim,
            &state.siamese,
            &state.matching,
            batch,
            val_batch,
            state.xi_t,
            state.xi_s,
        )?;
        state.sim.update(&r.grad_a, adam)?;
        acc.loss_val += r.loss_val;
        acc.alpha_t += r.alpha_t;
        acc.alpha_s += r.alpha_s;
    }

    // 2. Matching network, against the virtual step of the Siamese network
    //    under the updated A.
    let (t_prime, _) = virtual_step_t(&ctx, &state.sim, &state.siamese, batch, state.xi_t)?;
    let l2 = loss_matching(&ctx, &t_prime, &state.matching, batch)?;
    let s = cfg.opt_s;
    if state.matching.tied {
        sgd_momentum_step(
            state.siamese.encoder.flat_mut(),
            l2.grad_s.flat(),
            &mut state.t_momentum,
            lr_s,
            s.momentum,
            s.weight_decay,
        )?;
        state.matching.encoder = state.siamese.encoder.clone();
    } else {
        sgd_momentum_step(
            state.matching.encoder.flat_mut(),
            l2.grad_s.flat(),
            &mut state.s_momentum,
            lr_s,
            s.momentum,
            s.weight_decay,
        )?;
    }

    // 3. Siamese network.
    let l1 = loss_siamese(&ctx, &state.sim, &state.siamese, batch)?;
    let t = cfg.opt_t;
    sgd_momentum_step(
        state.siamese.encoder.flat_mut(),
        l1.grad_t.flat(),
        &mut state.t_momentum,
        lr_t,
        t.momentum,
        t.weight_decay,
    )?;
    if state.matching.tied {
        state.matching.encoder = state.siamese.encoder.clone();
    }

    state.step += 1;
    acc.loss_t += l1.loss;
    acc.loss_s += l2.loss;
    acc.n += 1;
    if !(l1.loss.is_finite() && l2.loss.is_finite()) || !state.check_finite() {
        return Err(Error::NonFinite(format!(
            "loss_T={} loss_S={} xi_T={} xi_S={}",
            l1.loss, l2.loss, state.xi_t, state.xi_s
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: PredictMode,
    /// Skip training examples whose id equals the query's id.
    pub exclude_self: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub top1: f64,
    /// Only when there are more than five classes.
    pub top5: Option<f64>,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    pub mean_loss: f64,
}

/// Accuracy and loss of the trained predictor on `test` (raw features).
pub fn evaluate(state: &LbeState, test: &Dataset, opts: EvalOptions) -> Result<EvalReport> {
    if test.dim() != state.train.dim() {
        return Err(Error::shape("evaluation features", state.train.dim(), test.dim()));
    }
    let prepared = state.standardizer.apply(test)?;
    let mut s = state.clone();
    s.config.predict_mode = opts.mode;
    evaluate_prepared(&s, &prepared, opts.exclude_self)
}

/// Class distributions for each row of `test` (raw features).
pub fn predict_dataset(state: &LbeState, test: &Dataset, opts: EvalOptions) -> Result<Vec<Vec<f64>>> {
    let prepared = state.standardizer.apply(test)?;
    let mut s = state.clone();
    s.config.predict_mode = opts.mode;
    predict_prepared(&s, &prepared, opts.exclude_self)
}

fn predict_prepared(state: &LbeState, test: &Dataset, exclude_self: bool) -> Result<Vec<Vec<f64>>> {
    if test.n_classes() > state.train.n_classes() {
        return Err(Error::shape(
            "evaluation classes",
            state.train.n_classes(),
            test.n_classes(),
        ));
    }
    let exclude: Vec<Option<usize>> = if exclude_self {
        let rows: HashMap<usize, usize> = state.train.ids().iter().enumerate().map(|(r, &id)| (id, r)).collect();
        test.ids().iter().map(|id| rows.get(id).copied()).collect()
    } else {
        vec![None; test.len()]
    };
    let rows = state.train.len() + test.len();
    let (noise_t, noise_s) = if state.config.stochastic_eval {
        let mut rng = stream(state.config.seed, Stream::Eval);
        let draw = |head: Head, rng: &mut rand_chacha::ChaCha8Rng| match head {
            Head::Hash { code_bits, .. } => Some(logistic_noise(rows, code_bits, rng)),
            Head::Cosine => None,
        };
        let t = draw(state.siamese.head, &mut rng);
        (t, draw(state.matching.head, &mut rng))
    } else {
        (None, None)
    };
    let inference = Inference {
        noise_t: noise_t.as_ref(),
        noise_s: noise_s.as_ref(),
    };
    predict(
        &state.siamese,
        &state.matching,
        &state.train,
        test.features(),
        state.config.predict_mode,
        &exclude,
        inference,
    )
}

/// Position of the first largest entry.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

fn evaluate_prepared(state: &LbeState, test: &Dataset, exclude_self: bool) -> Result<EvalReport> {
    let dists = predict_prepared(state, test, exclude_self)?;
    let c = state.train.n_classes();
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    let (mut top1, mut top5, mut loss) = (0usize, 0usize, 0.0);
    for (d, &y) in dists.iter().zip(test.labels()) {
        totals[y] += 1;
        if argmax(d) == y {
            top1 += 1;
            hits[y] += 1;
        }
        // Rank with ties broken towards the lower class index, as argmax does.
        let rank = (0..c).filter(|&k| d[k] > d[y] || (d[k] == d[y] && k < y)).count();
        if rank < 5 {
            top5 += 1;
        }
        loss -= d[y].max(LIKELIHOOD_FLOOR).ln();
    }
    let n = test.len() as f64;
    Ok(EvalReport {
        n: test.len(),
        top1: top1 as f64 / n,
        top5: (c > 5).then(|| top5 as f64 / n),
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        mean_loss: loss / n,
    })
}

/// Trains on the support set with the query set as validation data and
/// returns query accuracy.
pub fn run_episode(config: &LbeConfig, episode: &Episode) -> Result<f64> {
    let (state, _) = train_lbe(config, &episode.support, &episode.query)?;
    let prepared = state.standardizer.apply(&episode.query)?;
    Ok(evaluate_prepared(&state, &prepared, false)?.top1)
}

/// Mean retriever probability `f` over training pairs whose `A` entry
/// exceeds `min_a`, with thresholded codes. `None` when no pair qualifies.
pub fn mean_pair_prob(state: &LbeState, min_a: f64) -> Result<Option<f64>> {
    let enc = Encoding::new(
        &state.siamese.encoder,
        state.siamese.head,
        state.train.features(),
        CodeMode::StraightThrough,
        None,
    )?;
    let a = state.sim.values();
    let (mut total, mut count) = (0.0, 0usize);
    for (k, (i, j)) in pairs(state.train.len()).enumerate() {
        if a[k] > min_a {
            total += state.siamese.prob_from_score(enc.score(i, j));
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// `k` distinct training rows (all of them if fewer), ascending, drawn from
/// the run seed. The same rows serve every snapshot of a run.
pub fn snapshot_rows(state: &LbeState, k: usize) -> Vec<usize> {
    let n = state.train.len();
    let mut rows = index::sample(&mut stream(state.config.seed, Stream::Eval), n, k.min(n)).into_vec();
    rows.sort_unstable();
    rows
}

/// Dense `k × k` view of `A` over the given training rows.
pub fn similarity_snapshot(state: &LbeState, rows: &[usize]) -> Result<Matrix2D> {
    state.sim.snapshot(rows)
}

/// One row of a retrieval listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: usize,
    pub score: f64,
    pub label: usize,
    /// Retrieved label equals the query label.
    pub correct: bool,
}

/// The `k` training examples the Siamese retriever rates most similar to row
/// `query` of `data` (raw features). A training example sharing the query's
/// id is skipped. Codes are thresholded; ties go to the lower id.
pub fn retrieve(state: &LbeState, data: &Dataset, query: usize, k: usize) -> Result<Vec<Retrieved>> {
    if query >= data.len() {
        return Err(Error::Range {
            what: "query row",
            detail: format!("{query} with {} examples", data.len()),
        });
    }
    if data.dim() != state.train.dim() {
        return Err(Error::shape("retrieval features", state.train.dim(), data.dim()));
    }
    let q = state.standardizer.apply(data)?.features().select_rows(&[query]);
    let x = state.train.features().vstack(&q)?;
    let enc = Encoding::new(
        &state.siamese.encoder,
        state.siamese.head,
        &x,
        CodeMode::StraightThrough,
        None,
    )?;
    let qrow = state.train.len();
    let qid = data.ids()[query];
    let ylabel = data.labels()[query];
    let mut cands: Vec<usize> = (0..qrow).filter(|&r| state.train.ids()[r] != qid).collect();
    let score = |r: usize| state.siamese.prob_from_score(enc.score(r, qrow));
    cands.sort_by(|&a, &b| {
        score(b)
            .total_cmp(&score(a))
            .then(state.train.ids()[a].cmp(&state.train.ids()[b]))
    });
    cands.truncate(k);
    Ok(cands
        .into_iter()
        .map(|r| {
            let label = state.train.labels()[r];
            Retrieved {
                id: state.train.ids()[r],
                score: score(r),
                label,
                correct: label == ylabel,
            }
        })
        .collect())
}

impl LbeState {
    /// Thresholded codes of the training set for each hashed network, tagged
    /// `T` or `S`.
    pub fn codebooks(&self) -> Result<Vec<(&'static str, BinaryCodebook)>> {
        let mut out = Vec::new();
        for (tag, enc, head) in [
            ("T", &self.siamese.encoder, self.siamese.head),
            ("S", &self.matching.encoder, self.matching.head),
        ] {
            if head.is_hash() {
                let (z, _) = enc.forward(self.train.features())?;
                out.push((
                    tag,
                    codebook_from_logits(&z, None, 1.0, true, self.train.ids().to_vec())?,
                ));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_blobs, make_episode, split};
    use crate::trilevel::Variant;

    fn small() -> LbeConfig {
        LbeConfig {
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        }
    }

    fn data(seed: u64) -> (Dataset, Dataset) {
        split(&gen_blobs(3, 10, 4, 1.0, seed).unwrap(), 0.2, seed).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let (train, val) = data(1);
        let cfg = LbeConfig { epochs: 0, ..small() };
        let (state, history) = train_lbe(&cfg, &train, &val).unwrap();
        assert!(history.is_empty());
        assert_eq!(state, LbeState::init(&cfg, &train).unwrap());
        assert_eq!(metrics_csv(&history), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn training_is_deterministic() {
        let (train, val) = data(2);
        let a = train_lbe(&small(), &train, &val).unwrap();
        let b = train_lbe(&small(), &train, &val).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 3);
        let c = train_lbe(&LbeConfig { seed: 9, ..small() }, &train, &val).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn a_stays_symmetric_and_in_range() {
        let (train, val) = data(3);
        let (state, history) = train_lbe(&small(), &train, &val).unwrap();
        assert!(state.sim.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_ne!(state.sim.logits(), SimilarityMatrix::new(train.len()).logits());
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(state.sim.value(i, j).unwrap(), state.sim.value(j, i).unwrap());
                }
            }
        }
        for m in &history {
            assert!(m.alpha_t > 0.0 && m.alpha_s > 0.0);
            assert!(m.loss_t.is_finite() && m.loss_s.is_finite() && m.loss_val.is_finite());
        }
        assert_eq!(state.step, 3 * train.len().div_ceil(8));
    }

    #[test]
    fn frozen_a_is_untouched() {
        let (train, val) = data(4);
        let cfg = LbeConfig {
            freeze_a: true,
            sim_init: SimInit::Labels,
            ..small()
        };
        let (state, history) = train_lbe(&cfg, &train, &val).unwrap();
        assert_eq!(state.sim, SimilarityMatrix::from_labels(state.train.labels()));
        assert!(history.iter().all(|m| m.alpha_t == 0.0));
    }

    #[test]
    fn tied_networks_stay_equal() {
        let (train, val) = data(5);
        let cfg = LbeConfig {
            tie_weights: true,
            ..small()
        };
        let (state, _) = train_lbe(&cfg, &train, &val).unwrap();
        assert_eq!(state.siamese.encoder, state.matching.encoder);
        let init = LbeState::init(&cfg, &train).unwrap();
        assert_ne!(state.siamese.encoder, init.siamese.encoder);
    }

    #[test]
    fn hashed_variants_train() {
        let (train, val) = data(6);
        for variant in [Variant::FastT, Variant::FastS, Variant::FastTS] {
            for straight_through in [false, true] {
                let cfg = LbeConfig {
                    variant,
                    straight_through,
                    code_bits: 16,
                    ..small()
                };
                let (state, history) = train_lbe(&cfg, &train, &val).unwrap();
                assert_eq!(history.len(), 3);
                assert_eq!(state.siamese.head.is_hash(), variant.hashes_siamese());
                assert_eq!(state.matching.head.is_hash(), variant.hashes_matching());
            }
        }
    }

    #[test]
    fn patience_stops_early() {
        let (train, val) = data(7);
        let cfg = LbeConfig {
            epochs: 40,
            patience: 1,
            opt_t: crate::trilevel::SgdConfig {
                lr: 5.0,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            ..small()
        };
        let (_, history) = train_lbe(&cfg, &train, &val).unwrap();
        assert!(history.len() < 40);
    }

    #[test]
    fn divergence_aborts() {
        let (train, val) = data(8);
        let cfg = LbeConfig {
            // Decay alone overflows the parameters within two steps.
            opt_s: crate::trilevel::SgdConfig {
                lr: f64::MAX,
                momentum: 0.0,
                weight_decay: 1.0,
            },
            ..small()
        };
        let err = train_lbe(&cfg, &train, &val).unwrap_err();
        assert!(
            matches!(&err, Error::NonFinite(msg) if msg.contains("epoch 1")),
            "{err}"
        );
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let (train, _) = data(9);
        let state = LbeState::init(&small(), &train).unwrap();
        let r = evaluate(
            &state,
            &train,
            EvalOptions {
                mode: PredictMode::TopK(1),
                exclude_self: false,
            },
        )
        .unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.top5, None);
        assert!(r.per_class.iter().all(|&a| a == Some(1.0)));
    }

    #[test]
    fn soft_and_full_topk_evaluate_identically() {
        let (train, val) = data(10);
        let state = LbeState::init(&small(), &train).unwrap();
        let opts = |mode| EvalOptions {
            mode,
            exclude_self: false,
        };
        let soft = evaluate(&state, &val, opts(PredictMode::Soft)).unwrap();
        let full = evaluate(&state, &val, opts(PredictMode::TopK(train.len()))).unwrap();
        assert_eq!(soft, full);
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        use rand::Rng;
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = stream(seed, Stream::Data);
            let mut draw = |n: usize| {
                let x = Matrix2D::from_vec(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                Dataset::new(x, (0..n).map(|i| i % 3).collect(), 3).unwrap()
            };
            let (train, test) = (draw(60), draw(60));
            let state = LbeState::init(&LbeConfig { seed, ..small() }, &train).unwrap();
            total += evaluate(
                &state,
                &test,
                EvalOptions {
                    mode: PredictMode::Soft,
                    exclude_self: false,
                },
            )
            .unwrap()
            .top1;
        }
        assert!((total / 10.0 - 1.0 / 3.0).abs() <= 0.1, "{}", total / 10.0);
    }

    #[test]
    fn top5_needs_more_than_five_classes() {
        let data = gen_blobs(7, 4, 3, 1.0, 11).unwrap();
        let state = LbeState::init(&small(), &data).unwrap();
        let r = evaluate(
            &state,
            &data,
            EvalOptions {
                mode: PredictMode::Soft,
                exclude_self: true,
            },
        )
        .unwrap();
        let top5 = r.top5.unwrap();
        assert!(top5 >= r.top1);
        assert!(evaluate(
            &state,
            &gen_blobs(7, 4, 2, 1.0, 1).unwrap(),
            EvalOptions {
                mode: PredictMode::Soft,
                exclude_self: false
            }
        )
        .is_err());
    }

    #[test]
    fn identical_episode_is_solved() {
        let x = Matrix2D::from_rows(&[[3.0, 0.0], [-3.0, 0.5], [3.0, 0.0], [-3.0, 0.5]]).unwrap();
        let pool = Dataset::new(x, vec![0, 1, 0, 1], 2).unwrap();
        let episode = make_episode(&pool, 2, 1, 1, 3).unwrap();
        let cfg = LbeConfig { epochs: 5, ..small() };
        assert_eq!(run_episode(&cfg, &episode).unwrap(), 1.0);
        assert_eq!(
            run_episode(&cfg, &episode).unwrap(),
            run_episode(&cfg, &episode).unwrap()
        );
    }

    #[test]
    fn retrieval_listing() {
        let data = gen_blobs(3, 10, 2, 0.5, 4).unwrap();
        let (state, _) = train_lbe(&small(), &data, &data).unwrap();
        let all = retrieve(&state, &data, 0, 1000).unwrap();
        assert_eq!(all.len(), data.len() - 1);
        assert!(all.iter().all(|r| r.id != data.ids()[0]));
        for w in all.windows(2) {
            assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id));
        }
        for r in &all {
            assert_eq!(r.correct, r.label == data.labels()[0]);
        }
        assert_eq!(retrieve(&state, &data, 0, 3).unwrap(), all[..3].to_vec());
        assert!(matches!(
            retrieve(&state, &data, data.len(), 1),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn codebooks_only_for_hashed_nets() {
        let data = gen_blobs(2, 5, 2, 0.5, 4).unwrap();
        let books = |variant| {
            let cfg = LbeConfig { variant, ..small() };
            let state = LbeState::init(&cfg, &data).unwrap();
            state
                .codebooks()
                .unwrap()
                .into_iter()
                .map(|(t, b)| (t, b.len(), b.code_bits()))
                .collect::<Vec<_>>()
        };
        assert!(books(Variant::Lbe).is_empty());
        assert_eq!(books(Variant::FastT), vec![("T", 10, 32)]);
        assert_eq!(books(Variant::FastTS), vec![("T", 10, 32), ("S", 10, 32)]);
    }
}
