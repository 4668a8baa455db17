use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evaug_client::{Client, ClientError};
use evaug_core::api::{DiversityRequest, ErrorKind, PllModel, PllRequest};
use evaug_core::event_model::read_sentences;
use evaug_core::orchestrator::config::MaskedLmSpec;
use evaug_core::orchestrator::report::to_table;
use evaug_core::orchestrator::store::CHECKPOINT_ROOT_ENV;
use evaug_core::orchestrator::{Phase, PhaseReport, RetrainOptions, RunConfig, RunData, RunStore};
use evaug_core::scoring::{Prf, ScoreReport};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "evaug", version, about = "Event extraction data augmentation with a learned filter")]
struct Cli {
    /// Service to talk to; an in-process one is started when absent.
    #[arg(long, env = "EVAUG_SERVER", global = true)]
    server: Option<String>,
    /// Checkpoint root of the in-process service.
    #[arg(long, env = CHECKPOINT_ROOT_ENV, default_value = "checkpoints", global = true)]
    checkpoint_root: PathBuf,
    /// Print raw JSON responses instead of tables.
    #[arg(long, global = true)]
    json: bool,
    /// Print the published default hyperparameters and exit.
    #[arg(long)]
    paper_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run pretraining phases (all three in order when --phase is absent).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
    },
    /// Run or resume reinforcement retraining.
    Retrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue this run from its last complete epoch.
        #[arg(long, conflicts_with = "run_id")]
        resume: Option<String>,
        /// Id for a new run.
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Corpus fluency or novelty.
    Metrics(MetricsArgs),
    /// Score predicted records against gold.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Render F1, reward and PLL curves of a run as SVG.
    Plot {
        #[arg(long)]
        run: String,
        /// Also copy the charts here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Generator,
    Policy,
    Extractor,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    Pll,
    Diversity,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long, value_enum)]
    which: Which,
    /// Corpus to score (pll) or generated corpus (diversity). Plain text is
    /// one sentence per line; `.jsonl` files contribute their contexts.
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    /// Reference corpus for diversity.
    #[arg(long, required_if_eq("which", "diversity"))]
    original: Vec<PathBuf>,
    /// n-gram orders for diversity.
    #[arg(long = "n", default_values_t = [2, 3])]
    orders: Vec<usize>,
    /// Uniform model over this many types.
    #[arg(long, conflicts_with_all = ["fit", "config"])]
    vocab_size: Option<usize>,
    /// Unigram model fitted to this corpus.
    #[arg(long, conflicts_with = "config")]
    fit: Vec<PathBuf>,
    /// Use the masked LM of this run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let code = match e.kind() {
            Some(ErrorKind::InvalidInput | ErrorKind::Config | ErrorKind::Data) => 3,
            Some(ErrorKind::MissingState) => 4,
            Some(ErrorKind::ConfigMismatch | ErrorKind::Busy) => 5,
            Some(ErrorKind::CoverageNotReached | ErrorKind::SingleClass) => 6,
            _ => 7,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<evaug_core::Error> for Failure {
    fn from(e: evaug_core::Error) -> Self {
        Failure::input(e.to_string())
    }
}

impl From<evaug_core::DataError> for Failure {
    fn from(e: evaug_core::DataError) -> Self {
        Failure::input(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("response serializes"));
    } else {
        print!("{}", text());
    }
}

fn print_defaults() {
    let cfg = RunConfig::default();
    println!("{:<26} {:<14} note", "key", "value");
    for (key, value, note) in RunConfig::published_defaults() {
        println!("{key:<26} {value:<14} {note}");
    }
    println!("\nfull default config:\n{}", cfg.to_json_pretty());
}

fn prf_table(r: &ScoreReport) -> String {
    let line = |name: &str, p: &Prf| format!("{name:<8} {:>6.3} {:>6.3} {:>6.3}\n", p.precision, p.recall, p.f1);
    format!("{:<8} {:>6} {:>6} {:>6}\n{}{}", "", "P", "R", "F1", line("Trig-C", &r.trigger), line("Arg-C", &r.argument))
}

fn phase_line(report: &PhaseReport) -> String {
    match report {
        PhaseReport::Generator(t) => {
            let cov = t.points.last().map_or(0.0, |p| p.coverage);
            format!("generator: stopped at epoch {}, coverage {cov:.4}", t.stopped_epoch)
        }
        PhaseReport::Policy(p) => {
            let prec = p.points.iter().find(|x| x.epoch == p.stopped_epoch).map_or(0.0, |x| x.precision);
            let mut line = format!("policy: kept epoch {}, held-out precision {prec:.4}", p.stopped_epoch);
            if let Some(d) = &p.deviation {
                line.push_str(&format!(" ({d})"));
            }
            line
        }
        PhaseReport::Extractor(e) => format!(
            "extractor: {} epochs, final loss {:.4}",
            e.extractor_losses.len(),
            e.extractor_losses.last().copied().unwrap_or(0.0)
        ),
    }
}

/// Sentences of a corpus file: contexts of a `.jsonl` dataset, else lines.
fn read_corpus(path: &Path) -> Result<Vec<String>, Failure> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(read_sentences(path)?.into_iter().map(|s| s.context).collect());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn read_corpora(paths: &[PathBuf]) -> Result<Vec<String>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_corpus(p)?);
    }
    Ok(out)
}

fn pll_model(args: &MetricsArgs) -> Result<PllModel, Failure> {
    if let Some(v) = args.vocab_size {
        return Ok(PllModel::Uniform { vocab_size: v });
    }
    if !args.fit.is_empty() {
        return Ok(PllModel::Unigram {
            fit: read_corpora(&args.fit)?,
        });
    }
    let Some(path) = &args.config else {
        return Err(Failure::input("pll needs one of --vocab-size, --fit or --config"));
    };
    let cfg = RunConfig::load(path)?;
    match cfg.backends.masked_lm {
        MaskedLmSpec::Uniform { vocab_size } => Ok(PllModel::Uniform { vocab_size }),
        MaskedLmSpec::Unigram => Ok(PllModel::Unigram {
            fit: RunData::load(&cfg)?.train_contexts(),
        }),
        MaskedLmSpec::Plugin { .. } => Err(Failure::input(format!(
            "{}: backends.masked_lm: plugin models are scored during runs, not by `metrics`",
            path.display()
        ))),
    }
}

async fn metrics(client: &Client, args: MetricsArgs, json: bool) -> Outcome {
    let corpus = read_corpora(&args.corpus)?;
    let (value, text) = match args.which {
        Which::Pll => {
            let report = client
                .pll(&PllRequest {
                    sentences: corpus,
                    model: pll_model(&args)?,
                })
                .await?;
            let text = format!("pll {:.6} over {} sentences\n", report.mean, report.per_sentence.len());
            (serde_json::to_value(&report), text)
        }
        Which::Diversity => {
            let request = DiversityRequest {
                generated: corpus,
                original: read_corpora(&args.original)?,
                orders: args.orders.clone(),
            };
            let resp = client.diversity(&request).await?;
            let text = resp
                .reports
                .iter()
                .map(|r| format!("distinct-{} {:.6} ({} novel of {})\n", r.n, r.ratio, r.novel_distinct, r.total_distinct))
                .collect();
            (serde_json::to_value(&resp), text)
        }
    };
    let value = value.expect("report serializes");
    let out = args.out.unwrap_or_else(|| {
        PathBuf::from(match args.which {
            Which::Pll => "metrics_pll.json",
            Which::Diversity => "metrics_diversity.json",
        })
    });
    let body = serde_json::to_string_pretty(&value).expect("report serializes") + "\n";
    std::fs::write(&out, body).map_err(|e| Failure::input(format!("{}: {e}", out.display())))?;
    emit(json, &value, || text);
    Ok(())
}

async fn run(cli: Cli, client: &Client) -> Outcome {
    let json = cli.json;
    match cli.command.expect("checked by caller") {
        Command::Pretrain { config, phase } => {
            let cfg = RunConfig::load(&config)?;
            let phase = phase.map(|p| match p {
                PhaseArg::Generator => Phase::Generator,
                PhaseArg::Policy => Phase::Policy,
                PhaseArg::Extractor => Phase::Extractor,
            });
            let resp = client.pretrain(cfg, phase).await?;
            emit(json, &resp, || {
                let mut s: String = resp.phases.iter().map(|p| phase_line(&p.report) + "\n").collect();
                if let Some(p) = resp.phases.last() {
                    s.push_str(&format!("states in {}\n", p.state_dir.display()));
                }
                s
            });
            Ok(())
        }
        Command::Retrain {
            config,
            resume,
            run_id,
            stop_after,
        } => {
            let cfg = RunConfig::load(&config)?;
            let options = RetrainOptions { run_id, resume, stop_after };
            let out = client.retrain(cfg, options).await?;
            emit(json, &out, || {
                let mut s = to_table(&out.report);
                s.push_str(&format!(
                    "run {}: epochs 1..={}, best epoch {} (trig F1 {:.4}, arg F1 {:.4})\nreport {}\n",
                    out.run_id,
                    out.last_epoch,
                    out.best.epoch,
                    out.best.trigger_f1,
                    out.best.argument_f1,
                    out.run_dir.join("report.csv").display()
                ));
                s
            });
            match (&out.stop_reason, out.finished || stop_after.is_some()) {
                (Some(reason), false) => Err(Failure {
                    code: 8,
                    message: format!("run {} incomplete: {reason}", out.run_id),
                }),
                _ => Ok(()),
            }
        }
        Command::Metrics(args) => metrics(client, args, json).await,
        Command::Evaluate { pred, gold } => {
            let pred = read_sentences(&pred)?;
            let gold = read_sentences(&gold)?;
            let report = client.evaluate(pred, gold).await?;
            emit(json, &report, || prf_table(&report));
            Ok(())
        }
        Command::Plot { run, out } => {
            let resp = client.plot(&run).await?;
            let mut paths = resp.written.clone();
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
                paths.clear();
                for c in &resp.charts {
                    let p = dir.join(&c.name);
                    std::fs::write(&p, &c.svg).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
                    paths.push(p);
                }
            }
            emit(json, &paths, || paths.iter().map(|p| format!("{}\n", p.display())).collect());
            Ok(())
        }
    }
}

async fn start(cli: &Cli) -> Result<Client, Failure> {
    if let Some(url) = &cli.server {
        return Ok(Client::new(url.clone()));
    }
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| Failure { code: 7, message: format!("cannot start local service: {e}") })?;
    let addr = listener.local_addr().map_err(|e| Failure { code: 7, message: e.to_string() })?;
    let state = evaug_server::AppState::new(RunStore::new(&cli.checkpoint_root));
    tokio::spawn(evaug_server::serve(listener, state, std::future::pending()));
    Ok(Client::new(format!("http://{addr}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.paper_defaults {
        print_defaults();
        return ExitCode::SUCCESS;
    }
    if cli.command.is_none() {
        eprintln!("error: a subcommand is required (try --help)");
        return ExitCode::from(2);
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    let result = rt.block_on(async {
        let client = start(&cli).await?;
        run(cli, &client).await
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
