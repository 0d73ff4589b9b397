//! Desk-scale acceptance criteria. Each check returns an [`Outcome`]; the
//! `acceptance` test target runs them all.

use std::time::{Duration, Instant};

use lbe::config::RunConfig;
use lbe::trilevel::{mean_pair_prob, train_lbe, train_lbe_with, LbeConfig, LossMode, Variant};

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;

/// Final val top-1, intra- and inter-class mean of `A`, and wall time, for
/// the default blobs task at `seed`.
pub struct BlobRun {
    pub top1: f64,
    pub intra: f64,
    pub inter: f64,
    pub elapsed: Duration,
}

pub fn blob_run(seed: u64, tweak: impl Fn(&mut LbeConfig)) -> BlobRun {
    let mut cfg = RunConfig::default();
    cfg.lbe.seed = seed;
    tweak(&mut cfg.lbe);
    let (train, val) = cfg.load_split().expect("blobs");
    let start = Instant::now();
    let (_, history) = train_lbe(&cfg.lbe, &train, &val).expect("training");
    let last = history.last().expect("500 epochs");
    BlobRun {
        top1: last.val_top1,
        intra: last.intra_a_mean,
        inter: last.inter_a_mean,
        elapsed: start.elapsed(),
    }
}

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let report = lbe_cli::grad_check(1).expect("grad checks");
    let elapsed = start.elapsed();
    let worst = report.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    outcome(
        report.all_passed() && elapsed < Duration::from_secs(10),
        format!(
            "{} checks, worst rel error {worst:.2e}, {elapsed:.2?}",
            report.checks.len()
        ),
    )
}

pub fn hypergradients() -> Outcome {
    let start = Instant::now();
    let checks = lbe::oracle::hypergrad_checks(20, 1).expect("oracle");
    let elapsed = start.elapsed();
    let min_cos = checks.iter().filter_map(|c| c.cosine).fold(1.0, f64::min);
    let max_rel = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    outcome(
        checks.len() == 20 && min_cos >= 0.99 && max_rel <= 1e-2 && elapsed < Duration::from_secs(60),
        format!("20 instances, min cosine {min_cos:.6}, max rel L2 {max_rel:.2e}, {elapsed:.2?}"),
    )
}

pub fn hvps() -> Outcome {
    let checks = lbe::oracle::hvp_checks(50, 1).expect("hvp checks");
    let (rule, cases): (Vec<_>, Vec<_>) = checks.iter().partition(|c| c.name == "fd-hvp/alpha-rule");
    let max_rel = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let alpha = lbe::trilevel::fd_alpha(2.0);
    outcome(
        cases.len() == 50 && cases.iter().all(|c| c.passed) && rule.iter().all(|c| c.passed) && alpha == 0.005,
        format!("50 cases, max rel {max_rel:.2e}; alpha at |v|=2 is {alpha}"),
    )
}

pub fn blobs(vanilla: &[BlobRun]) -> Outcome {
    let top1 = mean(&vanilla.iter().map(|r| r.top1).collect::<Vec<_>>());
    let intra = mean(&vanilla.iter().map(|r| r.intra).collect::<Vec<_>>());
    let inter = mean(&vanilla.iter().map(|r| r.inter).collect::<Vec<_>>());
    let slowest = vanilla.iter().map(|r| r.elapsed).max().unwrap_or_default();
    outcome(
        top1 >= 0.95 && inter < 0.1 && intra - inter >= 0.3 && slowest < Duration::from_secs(120),
        format!(
            "seeds 1-10: val top-1 {top1:.4}, inter {inter:.4}, intra-inter {:.4}, slowest run {slowest:.2?}",
            intra - inter
        ),
    )
}

pub fn hash_parity(vanilla: &[BlobRun]) -> Outcome {
    let base = mean(&vanilla.iter().map(|r| r.top1).collect::<Vec<_>>());
    let mut ok = true;
    let mut parts = vec![format!("lbe {base:.4}")];
    for variant in [Variant::FastT, Variant::FastS, Variant::FastTS] {
        let top1: Vec<f64> = SEEDS
            .map(|s| {
                blob_run(s, |c| {
                    c.variant = variant;
                    c.straight_through = true;
                })
                .top1
            })
            .collect();
        let m = mean(&top1);
        let gap = 100.0 * (base - m).abs();
        ok &= gap <= 2.0;
        parts.push(format!("{} {m:.4} ({gap:.2} pts)", variant.name()));
    }
    let bench = lbe_cli::bench(100_000, 64, 64, 50, 1).expect("bench");
    ok &= bench.speedup() >= 2.0 && bench.constructed_agree;
    parts.push(format!("hamming scan {:.1}x faster", bench.speedup()));
    outcome(ok, parts.join(", "))
}

pub fn few_shot() -> Outcome {
    let cfg = RunConfig::parse(
        "dataset.n_classes = 10\ndataset.per_class = 20\n\
         episode.n_way = 5\nepisode.k_shot = 1\nepisode.q_query = 5\n\
         episode.episodes = 10\nepisode.seeds = 10\nepisode.epochs = 20\nseed = 1\n",
    )
    .expect("config");
    let s = cfg.run_episodes().expect("episodes");
    outcome(
        s.accuracies.len() == 100 && s.mean() >= 0.60,
        format!(
            "{} episodes, accuracy {:.4} ± {:.4} over seeds 1-10",
            s.accuracies.len(),
            s.mean(),
            s.std_over_seeds()
        ),
    )
}

pub fn determinism() -> Outcome {
    let run = || {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = RunConfig {
            output_dir: dir.path().join("run"),
            ..RunConfig::default()
        };
        lbe_cli::train(&cfg).expect("train");
        std::fs::read(dir.path().join("run/metrics.csv")).expect("metrics")
    };
    let (a, b) = (run(), run());
    outcome(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}

/// Mean `f` over all training pairs (every `A` entry is positive) after
/// 200 epochs with `A` frozen at its uniform start.
fn frozen_pair_prob(seed: u64, tau: f64, mode: LossMode) -> f64 {
    let mut cfg = RunConfig::default();
    cfg.lbe = LbeConfig {
        seed,
        tau,
        loss_mode: mode,
        freeze_a: true,
        epochs: 200,
        ..cfg.lbe
    };
    let (train, val) = cfg.load_split().expect("blobs");
    let mut last = f64::NAN;
    train_lbe_with(&cfg.lbe, &train, &val, |_, s| {
        last = mean_pair_prob(s, 0.0).expect("pairs").expect("nonempty");
    })
    .expect("training");
    last
}

pub fn literal_degeneracy() -> Outcome {
    // f = σ(cos/τ) never exceeds σ(1/τ), so τ = 1 caps f at 0.731.
    let literal: Vec<f64> = (1..=3).map(|s| frozen_pair_prob(s, 0.1, LossMode::Literal)).collect();
    let bce = frozen_pair_prob(1, 0.1, LossMode::Bce);
    let at_unit_tau = frozen_pair_prob(1, 1.0, LossMode::Literal);
    let worst = literal.iter().copied().fold(1.0, f64::min);
    outcome(
        worst > 0.99,
        format!(
            "tau 0.1 literal min over seeds 1-3 {worst:.5}; bce {bce:.4}; tau 1 literal {at_unit_tau:.4} of cap {:.4}",
            1.0 / (1.0 + (-1.0f64).exp())
        ),
    )
}
