//! `concaps`: build corpora, train, decode, and score captions.
//!
//! Every command prints a JSON summary on stdout. Failures print
//! `{"error": {"kind", "message"}}` on stderr and exit with status 1 (2 for
//! usage errors).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use concaps_core::commands::{
    self, CaptionSource, CohscoreArgs, CorpusSource, EvaluateArgs, GenerateArgs, MetricModels,
};
use concaps_core::corpus::synth::SynthConfig;
use concaps_core::corpus::Split;
use concaps_core::decode::{DecodeConfig, HoriHead, ScoreWeights};
use concaps_core::eval::PairScope;
use concaps_core::parallel::Parallelism;
use concaps_core::Error;

#[derive(Parser)]
#[command(name = "concaps", version, about = "Coherent entity-aware multi-image captioning")]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (or normalize an existing one) into a directory.
    BuildCorpus(BuildCorpus),
    /// Corpus statistics as JSON.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        entities: Option<PathBuf>,
    },
    /// Train a model from a TOML or JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override total_steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the seed (CONCAPS_SEED takes precedence over the file, this flag over both).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the four loss weights: gen,vert,hori1,hori2.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Decode captions with the two-level beam search.
    Generate(Generate),
    /// Caption-quality and optional coherence metrics for decoded captions.
    Evaluate(Evaluate),
    /// Horizontal coherence scores of decoded or reference captions.
    Cohscore(Cohscore),
}

#[derive(Args)]
struct BuildCorpus {
    #[arg(long)]
    out: PathBuf,
    /// Normalize this JSONL corpus instead of generating one.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long, requires = "fixture")]
    entities: Option<PathBuf>,
    /// Generator settings (TOML or JSON); flags below override them.
    #[arg(long, conflicts_with = "fixture")]
    synth_config: Option<PathBuf>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    mean_images: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Dev => Some(Split::Dev),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Hori1,
    Hori2,
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, short = 'w', default_value_t = 3)]
    w: usize,
    #[arg(long, default_value_t = 3)]
    beam_size: usize,
    /// Candidates per image (defaults to the beam size).
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long, value_enum, default_value = "hori1")]
    hori_head: HeadArg,
    #[arg(long, default_value_t = 1.0)]
    gen_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    vert_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    hori_weight: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairsArg {
    All,
    WithinWindow,
}

#[derive(Args)]
struct MetricFlags {
    /// Metric checkpoint trained with lambdas 0,0,1,0.
    #[arg(long)]
    metric1: Option<PathBuf>,
    /// Metric checkpoint trained with lambdas 0,0,0,1.
    #[arg(long)]
    metric2: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pairs: PairsArg,
    /// Window for `--pairs within-window`.
    #[arg(long, default_value_t = 3)]
    window: usize,
}

impl MetricFlags {
    fn models(&self) -> MetricModels {
        MetricModels {
            hori1: self.metric1.clone(),
            hori2: self.metric2.clone(),
            scope: match self.pairs {
                PairsArg::All => PairScope::All,
                PairsArg::WithinWindow => PairScope::WithinWindow(self.window),
            },
        }
    }
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    decoded: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    entities: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    metrics: MetricFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Cohscore {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    entities: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Decoded JSONL; the corpus captions are scored when absent.
    #[arg(long)]
    decoded: Option<PathBuf>,
    /// Also score entity-scrambled copies of the captions, drawn with this seed.
    #[arg(long)]
    scramble_seed: Option<u64>,
    #[command(flatten)]
    metrics: MetricFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> concaps_core::Result<serde_json::Value> {
    let parallelism = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    match cli.command {
        Command::BuildCorpus(a) => {
            let source = match a.fixture {
                Some(corpus) => CorpusSource::Fixture {
                    corpus,
                    entities: a.entities,
                },
                None => {
                    let mut cfg = match &a.synth_config {
                        Some(p) => parse_synth(p)?,
                        None => SynthConfig::default(),
                    };
                    if let Some(n) = a.n_docs {
                        cfg.n_docs = n;
                    }
                    if let Some(m) = a.mean_images {
                        cfg.mean_images_per_doc = m;
                    }
                    if let Some(s) = a.seed {
                        cfg.seed = s;
                    }
                    CorpusSource::Synthetic(cfg)
                }
            };
            commands::build_corpus(&source, &a.out)
        }
        Command::Stats { corpus, entities } => {
            let s = commands::stats(&corpus, entities.as_deref())?;
            Ok(serde_json::to_value(s).expect("stats serialize"))
        }
        Command::Train {
            config,
            out,
            steps,
            seed,
            lambdas,
        } => {
            let mut cfg = commands::load_train_config(&config)?;
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lambdas {
                if l.len() != 4 {
                    return Err(Error::Config(format!("--lambdas takes 4 values, got {}", l.len())));
                }
                cfg.coherence = cfg.coherence.clone().with_lambdas(l[0], l[1], l[2], l[3]);
            }
            cfg.parallelism = parallelism;
            commands::train_command(&cfg, &out)
        }
        Command::Generate(a) => commands::generate(&GenerateArgs {
            checkpoint: &a.checkpoint,
            corpus: &a.corpus,
            features: &a.features,
            split: a.split.split(),
            decode: DecodeConfig {
                beam_size: a.beam_size,
                candidates: a.candidates,
                w: a.w,
                weights: ScoreWeights {
                    gen: a.gen_weight,
                    vert: a.vert_weight,
                    hori: a.hori_weight,
                },
                hori_head: match a.hori_head {
                    HeadArg::Hori1 => HoriHead::Hori1,
                    HeadArg::Hori2 => HoriHead::Hori2,
                },
            },
            out: &a.out,
            parallelism,
        }),
        Command::Evaluate(a) => commands::evaluate(&EvaluateArgs {
            decoded: &a.decoded,
            corpus: &a.corpus,
            entities: a.entities.as_deref(),
            features: a.features.as_deref(),
            split: a.split.split(),
            metrics: a.metrics.models(),
            out: &a.out,
            parallelism,
        }),
        Command::Cohscore(a) => commands::cohscore(&CohscoreArgs {
            corpus: &a.corpus,
            features: &a.features,
            entities: a.entities.as_deref(),
            split: a.split.split(),
            captions: match a.decoded {
                Some(p) => CaptionSource::Decoded(p),
                None => CaptionSource::References,
            },
            scramble_seed: a.scramble_seed,
            metrics: a.metrics.models(),
            out: a.out.as_deref(),
            parallelism,
        }),
    }
}

fn parse_synth(path: &std::path::Path) -> concaps_core::Result<SynthConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let err = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
