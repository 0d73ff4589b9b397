//! Subcommand bodies for the `lbe` binary. They return structured results
//! so tests can inspect them without spawning a process.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lbe::config::{EpisodeSummary, RunConfig};
use lbe::datasets::{load_csv, save_csv, Dataset};
use lbe::networks::{bench_hash, HashBenchReport};
use lbe::oracle::{gradient_checks, hvp_checks, hypergrad_checks, richardson_check, OracleReport};
use lbe::similarity::snapshot_csv;
use lbe::trilevel::{
    evaluate, metrics_csv, retrieve, similarity_snapshot, snapshot_rows, train_lbe_with, EpochMetrics, EvalOptions,
    EvalReport, LbeState, PredictMode,
};
use lbe::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }

    fn abort(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_ABORT,
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Bad inputs are usage errors; anything that goes wrong while computing is
/// an abort.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Contract(_) | Error::DiagonalAccess(_) | Error::RetrievalEmpty => {
                CliError::abort(e)
            }
            Error::Io { .. } => CliError::abort(e),
            _ => CliError::usage(e),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::abort(format!("writing {}: {e}", path.display())))
}

fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("reading {}: {e}", path.display())))
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    RunConfig::parse(&read_to_string(path)?).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn load_state(path: &Path) -> CliResult<LbeState> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn load_data(path: &Path) -> CliResult<Dataset> {
    load_csv(path).map_err(|e| match e {
        Error::Io { .. } => CliError::usage(e),
        e => CliError::from(e),
    })
}

#[derive(Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub state: LbeState,
    pub snapshot_epochs: Vec<usize>,
}

/// Runs a configured training job and writes its artifacts under the
/// configured output directory:
/// `config.txt`, `train.csv`, `val.csv`, `metrics.csv`, `final_state.json`,
/// `snapshot_epoch_<E>.csv` at the first, middle and last epoch, and
/// `codebook_<T|S>.csv` for hashed networks. On a training abort the last
/// completed state goes to `abort_state.json` and the message to `abort.txt`.
pub fn train(config: &RunConfig) -> CliResult<TrainOutput> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::abort(format!("creating {}: {e}", dir.display())))?;
    let (train_set, val_set) = config.load_split()?;
    write(&dir.join("config.txt"), config.to_text())?;
    save_csv(&train_set, dir.join("train.csv"))?;
    save_csv(&val_set, dir.join("val.csv"))?;

    let epochs = config.lbe.epochs;
    let mut wanted = vec![0, epochs / 2, epochs];
    wanted.dedup();
    let mut snapshot_epochs = Vec::new();
    let mut last: Option<LbeState> = None;
    let mut failure: Option<CliError> = None;
    let result = train_lbe_with(&config.lbe, &train_set, &val_set, |epoch, state| {
        if wanted.contains(&epoch) && failure.is_none() {
            let rows = snapshot_rows(state, config.snapshot_size);
            let ids: Vec<usize> = rows.iter().map(|&r| state.train.ids()[r]).collect();
            let written = similarity_snapshot(state, &rows)
                .map_err(CliError::from)
                .and_then(|m| write(&dir.join(format!("snapshot_epoch_{epoch}.csv")), snapshot_csv(&ids, &m)));
            match written {
                Ok(()) => snapshot_epochs.push(epoch),
                Err(e) => failure = Some(e),
            }
        }
        last = Some(state.clone());
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let (state, history) = match result {
        Ok(r) => r,
        Err(e) => {
            if let Some(s) = &last {
                let json = serde_json::to_string(s).map_err(CliError::abort)?;
                write(&dir.join("abort_state.json"), json)?;
            }
            write(&dir.join("abort.txt"), format!("{e}\n"))?;
            return Err(CliError::from(e));
        }
    };
    // Early stopping can end before the planned last epoch.
    if snapshot_epochs.last() != Some(&history.len()) {
        let rows = snapshot_rows(&state, config.snapshot_size);
        let ids: Vec<usize> = rows.iter().map(|&r| state.train.ids()[r]).collect();
        let m = similarity_snapshot(&state, &rows)?;
        write(
            &dir.join(format!("snapshot_epoch_{}.csv", history.len())),
            snapshot_csv(&ids, &m),
        )?;
        snapshot_epochs.push(history.len());
    }
    write(&dir.join("metrics.csv"), metrics_csv(&history))?;
    write(
        &dir.join("final_state.json"),
        serde_json::to_string(&state).map_err(CliError::abort)?,
    )?;
    for (tag, book) in state.codebooks()? {
        write(&dir.join(format!("codebook_{tag}.csv")), book.to_csv())?;
    }
    Ok(TrainOutput {
        dir,
        history,
        state,
        snapshot_epochs,
    })
}

/// `soft` or `topk:K`.
pub fn parse_mode(s: &str) -> CliResult<PredictMode> {
    match s.split_once(':') {
        None if s == "soft" => Ok(PredictMode::Soft),
        Some(("topk", k)) => match k.parse() {
            Ok(k) if k > 0 => Ok(PredictMode::TopK(k)),
            _ => Err(CliError::usage(format!("invalid k in mode {s:?}"))),
        },
        _ => Err(CliError::usage(format!("unknown mode {s:?}: expected soft or topk:K"))),
    }
}

pub fn render_eval(r: &EvalReport) -> String {
    let mut out = format!("n {}\ntop1 {}\n", r.n, r.top1);
    if let Some(t5) = r.top5 {
        let _ = writeln!(out, "top5 {t5}");
    }
    let _ = writeln!(out, "mean_loss {}", r.mean_loss);
    out
}

pub fn eval(state: &LbeState, data: &Dataset, mode: Option<PredictMode>, exclude_self: bool) -> CliResult<EvalReport> {
    let opts = EvalOptions {
        mode: mode.unwrap_or(state.config.predict_mode),
        exclude_self,
    };
    Ok(evaluate(state, data, opts)?)
}

/// Tab-separated `id score label correct` rows for the `k` nearest training
/// examples to the example with id `query`.
pub fn retrieve_tsv(state: &LbeState, data: &Dataset, query: usize, k: usize) -> CliResult<String> {
    let row = data
        .ids()
        .iter()
        .position(|&id| id == query)
        .ok_or_else(|| CliError::usage(format!("query id {query} is not in the dataset")))?;
    let mut out = String::from("id\tscore\tlabel\tcorrect\n");
    for r in retrieve(state, data, row, k)? {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.id, r.score, r.label, u8::from(r.correct));
    }
    Ok(out)
}

pub fn grad_check(seed: u64) -> CliResult<OracleReport> {
    Ok(OracleReport::new(gradient_checks(seed)?)?)
}

/// Hypergradients against the perturbation oracle on 20 tiny instances,
/// finite-difference products against exact ones on 50 cases, and the
/// oracle's own step-halving consistency.
pub fn oracle_check(seed: u64) -> CliResult<OracleReport> {
    let mut checks = hypergrad_checks(20, seed)?;
    checks.extend(hvp_checks(50, seed)?);
    checks.push(richardson_check(seed)?);
    Ok(OracleReport::new(checks)?)
}

pub fn bench(n: usize, bits: usize, dim: usize, trials: usize, seed: u64) -> CliResult<HashBenchReport> {
    Ok(bench_hash(n, bits, dim, trials, seed)?)
}

pub fn render_bench(r: &HashBenchReport) -> String {
    let head: Vec<String> = r.hamming_top1.iter().take(8).map(ToString::to_string).collect();
    format!(
        "n_codes {} code_bits {} embed_dim {} trials {}\n\
         path\tns_per_query\n\
         hamming\t{:.0}\n\
         dense\t{:.0}\n\
         speedup {:.2}\n\
         hamming_top1 {}\n\
         one_hot_agreement {}\n",
        r.n_codes,
        r.code_bits,
        r.embed_dim,
        r.trials,
        r.hamming_ns_per_query,
        r.dense_ns_per_query,
        r.speedup(),
        head.join(","),
        r.constructed_agree
    )
}

/// Runs the few-shot protocol and writes `episodes.csv` under the output
/// directory.
pub fn episode(config: &RunConfig) -> CliResult<EpisodeSummary> {
    let summary = config.run_episodes()?;
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| CliError::abort(format!("creating {}: {e}", config.output_dir.display())))?;
    let mut csv = String::from("seed,episode,accuracy\n");
    let per = config.episode.episodes;
    for (k, acc) in summary.accuracies.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{acc}", summary.seeds[k / per], k % per);
    }
    write(&config.output_dir.join("episodes.csv"), csv)?;
    Ok(summary)
}

pub fn render_episodes(s: &EpisodeSummary) -> String {
    let mut out = String::new();
    for (seed, acc) in s.seeds.iter().zip(&s.per_seed) {
        let _ = writeln!(out, "seed {seed} accuracy {acc:.4}");
    }
    let _ = writeln!(
        out,
        "accuracy {:.4} ± {:.4} over {} episodes ({} seeds)",
        s.mean(),
        s.std_over_seeds(),
        s.accuracies.len(),
        s.seeds.len()
    );
    out
}
