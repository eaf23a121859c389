use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use medprompt::corpus::{self, Corpus, XmlDocument};
use medprompt::embedding::{EmbedderEndpoint, EmbeddingStore, DEFAULT_INSTRUCTION};
use medprompt::qtype::{self, CentroidModel};
use medprompt::runner::{self, EmbedderConfig, ExperimentConfig, RunReport, TableFormat};
use medprompt::vindex::TypePartitionedIndex;

#[derive(Parser)]
#[command(name = "medprompt", version, about = "Few-shot prompting workbench for closed-book medical QA")]
struct Cli {
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Medquad,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Markdown,
    Csv,
}

impl From<OutputFormat> for TableFormat {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Markdown => TableFormat::Markdown,
            OutputFormat::Csv => TableFormat::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw corpora into `corpus.jsonl` (from the inputs, or from the config's corpora).
    Ingest {
        #[arg(long, value_enum)]
        format: Option<InputFormat>,
        /// Source name for JSONL input.
        #[arg(long, default_value = "icliniq")]
        source: String,
        /// Answer word cap; defaults to 300 for MedQuAD and 150 for JSONL.
        #[arg(long)]
        cap: Option<usize>,
        /// Also write `finetune.jsonl`.
        #[arg(long)]
        finetune: bool,
        inputs: Vec<PathBuf>,
    },
    /// Print corpus statistics as JSON.
    Stats { corpus: PathBuf },
    /// Split a corpus into `train.jsonl` and `test.jsonl`.
    Split {
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Embed a corpus's questions into `store.jsonl`.
    Embed {
        corpus: PathBuf,
        /// Use the mock embedder with this dimension.
        #[arg(long, conflicts_with = "endpoint")]
        mock_dim: Option<usize>,
        /// Base URL of an embedding service.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        instruction: Option<String>,
    },
    /// Build the type-partitioned index into `index/`.
    Index {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the nearest-centroid classifier into `classifier.jsonl`.
    TrainClassifier {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Store and corpus to report held-out accuracy on.
        #[arg(long, requires = "eval_corpus")]
        eval_store: Option<PathBuf>,
        #[arg(long, requires = "eval_store")]
        eval_corpus: Option<PathBuf>,
    },
    /// Run the experiment described by --config.
    Run,
    /// Repeat the experiment once per k.
    AblateK {
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
    /// Render a saved report as a table.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: OutputFormat,
    },
}

fn stage<T>(name: &str, r: medprompt::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| match e {
        e @ medprompt::Error::Stage { .. } => anyhow!(e),
        e => anyhow!("stage {name} failed: {e}"),
    })
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| anyhow!("--config is required"))?;
    let mut config = stage("config", ExperimentConfig::load(path))?;
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stage("ingest", Corpus::load_jsonl(name, path))
}

fn ingest_inputs(format: InputFormat, source: &str, cap: Option<usize>, inputs: &[PathBuf]) -> anyhow::Result<Corpus> {
    if inputs.is_empty() {
        bail!("no input files given");
    }
    let (ingested, default_cap) = match format {
        InputFormat::Medquad => {
            let docs = inputs
                .iter()
                .map(|p| XmlDocument::read(p))
                .collect::<medprompt::Result<Vec<_>>>()
                .and_then(|d| corpus::parse_medquad(&d));
            (stage("ingest", docs)?, corpus::MEDQUAD_WORD_CAP)
        }
        InputFormat::Jsonl => {
            let mut bytes = Vec::new();
            for p in inputs {
                bytes.extend(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
                if !bytes.ends_with(b"\n") {
                    bytes.push(b'\n');
                }
            }
            (stage("ingest", corpus::parse_jsonl(&bytes, source))?, corpus::ICLINIQ_WORD_CAP)
        }
    };
    eprintln!("ingested {} pairs, skipped {}", ingested.corpus.len(), ingested.skipped);
    stage("ingest", corpus::truncate_answers(&ingested.corpus, cap.unwrap_or(default_cap)))
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Ingest {
            format,
            source,
            cap,
            finetune,
            inputs,
        } => {
            let corpus = match (format, &cli.config) {
                (Some(f), _) => ingest_inputs(*f, source, *cap, inputs)?,
                (None, Some(_)) => stage("ingest", runner::prepare_data(&load_config(cli)?))?.merged,
                (None, None) => bail!("give --format with input files, or --config"),
            };
            let dir = out_dir(cli)?;
            stage("ingest", corpus.save_jsonl(&dir.join("corpus.jsonl")))?;
            if *finetune {
                let path = dir.join("finetune.jsonl");
                let f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                stage(
                    "ingest",
                    corpus::write_finetune_jsonl(&corpus::build_finetune_records(&corpus), std::io::BufWriter::new(f)),
                )?;
            }
        }
        Command::Stats { corpus } => {
            let stats = stage("stats", corpus::stats(&load_corpus(corpus)?))?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Split { corpus, train_fraction } => {
            let c = load_corpus(corpus)?;
            let spec = stage("split", corpus::SplitSpec::new(*train_fraction, cli.seed.unwrap_or(0)))?;
            let (train, test) = stage("split", corpus::split(&c, &spec))?;
            let dir = out_dir(cli)?;
            stage("split", train.save_jsonl(&dir.join("train.jsonl")))?;
            stage("split", test.save_jsonl(&dir.join("test.jsonl")))?;
            eprintln!("train {} / test {}", train.len(), test.len());
        }
        Command::Embed {
            corpus,
            mock_dim,
            endpoint,
            instruction,
        } => {
            let c = load_corpus(corpus)?;
            let (embedder_config, config_instruction) = match (mock_dim, endpoint, &cli.config) {
                (Some(dim), _, _) => (EmbedderConfig::Mock { dim: *dim }, None),
                (_, Some(url), _) => (EmbedderConfig::Http(EmbedderEndpoint::new(url.clone())), None),
                (_, _, Some(_)) => {
                    let config = load_config(cli)?;
                    (config.embedder, Some(config.instruction))
                }
                _ => bail!("give --mock-dim, --endpoint or --config"),
            };
            let instruction = instruction
                .clone()
                .or(config_instruction)
                .unwrap_or_else(|| DEFAULT_INSTRUCTION.to_string());
            let embedder = stage("embed", runner::build_embedder(&embedder_config))?;
            let items: Vec<(String, String)> =
                c.pairs.iter().map(|p| (p.id.clone(), p.question.clone())).collect();
            let store = stage("embed", EmbeddingStore::build(embedder.as_ref(), &instruction, &items))?;
            stage("embed", store.save(&out_dir(cli)?.join("store.jsonl")))?;
        }
        Command::Index { store, corpus } => {
            let s = stage("index", EmbeddingStore::load(store))?;
            let index = stage("index", TypePartitionedIndex::build(&s, &load_corpus(corpus)?))?;
            stage("index", index.save(&out_dir(cli)?.join("index")))?;
            eprintln!("{} vectors, {} type blocks", index.all_block.len(), index.blocks.len());
        }
        Command::TrainClassifier {
            store,
            corpus,
            eval_store,
            eval_corpus,
        } => {
            let s = stage("classify", EmbeddingStore::load(store))?;
            let model: CentroidModel = stage("classify", qtype::train_centroids(&s, &load_corpus(corpus)?))?;
            stage("classify", model.save(&out_dir(cli)?.join("classifier.jsonl")))?;
            if let (Some(es), Some(ec)) = (eval_store, eval_corpus) {
                let es = stage("classify", EmbeddingStore::load(es))?;
                let eval = stage("classify", qtype::eval_classifier(&model, &es, &load_corpus(ec)?))?;
                println!("{}", serde_json::to_string_pretty(&eval)?);
            }
        }
        Command::Run => {
            let report = runner::run(&load_config(cli)?).map_err(|e| anyhow!(e))?;
            print!("{}", stage("report", runner::render_table(&report.table_rows(), TableFormat::Markdown))?);
            eprintln!("report digest {}", report.digest);
        }
        Command::AblateK { k } => {
            let reports = runner::ablate_k(&load_config(cli)?, k).map_err(|e| anyhow!(e))?;
            print!("{}", stage("report", runner::render_ablation(&reports, TableFormat::Markdown))?);
        }
        Command::Report { report, format } => {
            let r = stage("report", RunReport::load(report))?;
            match &cli.out {
                Some(_) => {
                    let path = stage("report", runner::write_tables(&r, (*format).into(), &out_dir(cli)?, "report"))?;
                    eprintln!("wrote {}", path.display());
                }
                None => print!("{}", stage("report", runner::render_table(&r.table_rows(), (*format).into()))?),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
