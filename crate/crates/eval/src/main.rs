use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emagate_core::model::{LmModel, ModelConfig};
use emagate_core::train::{train, AdamConfig, ByteVocab, TrainConfig};
use emagate_eval::report::write_output;
use emagate_eval::{
    load_records, parse_metric_list, render_csv, render_markdown, run_eval, threads_from_env, Embeddings, EvalConfig,
    EvalError, Result, Setting,
};
use emagate_metrics::{HashEmbedder, Sidecar};

#[derive(Parser)]
#[command(name = "emagate", version, about = "Score QA answers with text metrics, or train the toy language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score candidate answers against references.
    Score(ScoreArgs),
    /// Train the byte-level language model on a text file.
    Train(TrainArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Zs,
    Sim,
    Mmr,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(clap::Args)]
struct ScoreArgs {
    /// JSONL records with id, question, reference, candidate and optional contexts.
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated metric names, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "rouge-l,bertscore,moverscore")]
    metrics: Vec<String>,
    /// JSON embedding sidecar keyed by record id.
    #[arg(long, conflicts_with = "hash_embed")]
    embeddings: Option<PathBuf>,
    /// Embed with the seeded hash embedder (token identity only, no semantics).
    #[arg(long)]
    hash_embed: bool,
    #[arg(long, value_enum, default_value = "zs")]
    setting: SettingArg,
    #[arg(long, default_value_t = 0.5)]
    mmr_lambda: f64,
    /// Contexts kept by MMR (all by default).
    #[arg(long)]
    mmr_k: Option<usize>,
    /// ROUGE F-measure β.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// ROUGE-W run-weight exponent.
    #[arg(long, default_value_t = 1.2)]
    alpha_w: f64,
    /// MoverScore n-gram order.
    #[arg(long, default_value_t = 1)]
    ngram: usize,
    /// Layer power-mean exponent for MoverScore, WMD and SMD.
    #[arg(long, default_value_t = 1.0)]
    power: f64,
    /// 1-based BERTScore layer.
    #[arg(long)]
    layer: Option<usize>,
    /// Weight embedding metrics by idf over the run's references.
    #[arg(long)]
    idf: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    hash_layers: usize,
    #[arg(long, default_value_t = 32)]
    hash_width: usize,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Training text; every distinct byte becomes a token.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, default_value_t = 8)]
    chunk: usize,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV (step,loss); stdout when absent.
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_output(p, text),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|source| EvalError::Io {
            path: "<stdout>".into(),
            source,
        }),
    }
}

fn score(a: ScoreArgs) -> Result<()> {
    let metrics = parse_metric_list(&a.metrics).map_err(EvalError::Config)?;
    let records = load_records(&a.input)?;
    let embeddings = match (&a.embeddings, a.hash_embed) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|source| EvalError::Io {
                path: p.clone(),
                source,
            })?;
            let sc: Sidecar = serde_json::from_str(&text)
                .map_err(|e| EvalError::Input(format!("{}: {e}", p.display())))?;
            for (id, e) in &sc {
                let texts = [&e.candidate, &e.reference].into_iter().chain(e.question.as_ref()).chain(&e.contexts);
                for t in texts {
                    t.validate().map_err(|err| EvalError::Input(format!("{}: item {id}: {err}", p.display())))?;
                }
            }
            Embeddings::Sidecar(sc)
        }
        (None, true) => Embeddings::Hash(
            HashEmbedder::new(a.seed, a.hash_layers, a.hash_width).map_err(|e| EvalError::Config(e.to_string()))?,
        ),
        (None, false) => Embeddings::None,
    };
    let setting = match a.setting {
        SettingArg::Zs => Setting::Zs,
        SettingArg::Sim => Setting::Sim,
        SettingArg::Mmr => Setting::Mmr,
    };
    let cfg = EvalConfig {
        beta: a.beta,
        alpha_w: a.alpha_w,
        ngram: a.ngram,
        power: a.power,
        bert_layer: a.layer,
        idf: a.idf,
        mmr_lambda: a.mmr_lambda,
        mmr_k: a.mmr_k,
        seed: a.seed,
        hash_layers: a.hash_layers,
        hash_width: a.hash_width,
        threads: threads_from_env()?,
    };
    let report = run_eval(&records, &metrics, &embeddings, setting, &cfg)?;
    let text = match a.format {
        Format::Csv => render_csv(&report),
        Format::Md => render_markdown(&[&report])?,
    };
    emit(a.out.as_ref(), &text)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let bytes = std::fs::read(&a.corpus).map_err(|source| EvalError::Io {
        path: a.corpus.clone(),
        source,
    })?;
    let vocab = ByteVocab::from_text(&bytes);
    let corpus = vocab.encode(&bytes)?;
    let mut config = ModelConfig::new(vocab.len(), a.d, a.blocks);
    config.block.chunk = a.chunk;
    let mut model = LmModel::<f64>::init(config, a.seed)?;
    let cfg = TrainConfig {
        steps: a.steps,
        window: a.window,
        batch: a.batch,
        seed: a.seed,
        adam: AdamConfig {
            lr: a.lr,
            ..Default::default()
        },
    };
    let report = train(&mut model, &corpus, &cfg)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    emit(a.loss_out.as_ref(), &csv)?;
    model.save(&a.out, &vocab.labels())?;
    eprintln!(
        "final loss {:.6}, perplexity {:.4}, checkpoint {}",
        report.final_eval_loss,
        report.final_eval_loss.exp(),
        a.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(a) => score(a),
        Command::Train(a) => train_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
