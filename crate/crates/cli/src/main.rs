use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lbe_cli::{CliError, CliResult, EXIT_CHECK_FAILED, EXIT_OK};

#[derive(Parser)]
#[command(name = "lbe", version, about = "Train and inspect learning-by-examples models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write run artifacts.
    Train { config: PathBuf },
    /// Accuracy of a saved state on a dataset CSV.
    Eval {
        state: PathBuf,
        data: PathBuf,
        /// `soft` or `topk:K`; defaults to the state's own mode.
        #[arg(long)]
        mode: Option<String>,
        /// Never let an example retrieve a training example with its own id.
        #[arg(long)]
        exclude_self: bool,
        /// Also write the metrics to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k training examples for one query, as TSV.
    Retrieve {
        state: PathBuf,
        data: PathBuf,
        /// Query example id.
        #[arg(long)]
        query: usize,
        #[arg(short)]
        k: usize,
    },
    /// Analytic gradients against central differences.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Hypergradients and Hessian-vector products against independent oracles.
    OracleCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "oracle-check.csv")]
        csv: PathBuf,
    },
    /// Time a Hamming scan against a dense cosine scan.
    BenchHash {
        #[arg(long, default_value_t = 100_000)]
        n_codes: usize,
        #[arg(long, default_value_t = 64)]
        code_bits: usize,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Fail unless the Hamming scan is at least this many times faster.
        #[arg(long)]
        min_speedup: Option<f64>,
    },
    /// Few-shot protocol from a config file.
    Episode { config: PathBuf },
}

fn write_out(path: &PathBuf, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError {
        code: lbe_cli::EXIT_ABORT,
        message: format!("writing {}: {e}", path.display()),
    })
}

fn run(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Train { config } => {
            let cfg = lbe_cli::load_config(&config)?;
            let out = lbe_cli::train(&cfg)?;
            match out.history.last() {
                Some(m) => println!(
                    "trained {} epochs: val_top1 {} loss_val {} intra_A {} inter_A {}",
                    out.history.len(),
                    m.val_top1,
                    m.loss_val,
                    m.intra_a_mean,
                    m.inter_a_mean
                ),
                None => println!("trained 0 epochs"),
            }
            println!("artifacts in {}", out.dir.display());
            Ok(EXIT_OK)
        }
        Command::Eval {
            state,
            data,
            mode,
            exclude_self,
            out,
        } => {
            let state = lbe_cli::load_state(&state)?;
            let data = lbe_cli::load_data(&data)?;
            let mode = mode.as_deref().map(lbe_cli::parse_mode).transpose()?;
            let text = lbe_cli::render_eval(&lbe_cli::eval(&state, &data, mode, exclude_self)?);
            print!("{text}");
            if let Some(path) = out {
                write_out(&path, &text)?;
            }
            Ok(EXIT_OK)
        }
        Command::Retrieve { state, data, query, k } => {
            let state = lbe_cli::load_state(&state)?;
            let data = lbe_cli::load_data(&data)?;
            print!("{}", lbe_cli::retrieve_tsv(&state, &data, query, k)?);
            Ok(EXIT_OK)
        }
        Command::GradCheck { seed, csv } => {
            let report = lbe_cli::grad_check(seed)?;
            print!("{}", report.render());
            if let Some(path) = csv {
                write_out(&path, &report.to_csv())?;
            }
            Ok(if report.all_passed() {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            })
        }
        Command::OracleCheck { seed, csv } => {
            let report = lbe_cli::oracle_check(seed)?;
            print!("{}", report.render());
            write_out(&csv, &report.to_csv())?;
            Ok(if report.all_passed() {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            })
        }
        Command::BenchHash {
            n_codes,
            code_bits,
            embed_dim,
            trials,
            seed,
            min_speedup,
        } => {
            let r = lbe_cli::bench(n_codes, code_bits, embed_dim, trials, seed)?;
            print!("{}", lbe_cli::render_bench(&r));
            let fast_enough = min_speedup.is_none_or(|m| r.speedup() >= m);
            Ok(if r.constructed_agree && fast_enough {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            })
        }
        Command::Episode { config } => {
            let cfg = lbe_cli::load_config(&config)?;
            print!("{}", lbe_cli::render_episodes(&lbe_cli::episode(&cfg)?));
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    };
    ExitCode::from(code as u8)
}
