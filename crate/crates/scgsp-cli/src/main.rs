use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scgsp::corpus::{
    build_concept_vocabulary, generate_synthetic_corpus, label_corpus, load_corpus,
    load_predictions, load_vocabulary, save_corpus, save_predictions, save_vocabulary,
    tagged_captions, ConceptVocabulary, Corpus, EmbeddingTable, SyntheticSpec,
};
use scgsp::detector::{train_detector, DetectorConfig, DetectorParams};
use scgsp::harness::{self, RunConfig, TrainState};
use scgsp::metrics;
use scgsp::{Error, Result};

#[derive(Parser)]
#[command(name = "scgsp", about = "Concept-guided diverse video caption set prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Corpus file pair shared by most subcommands.
#[derive(Args)]
struct CorpusArgs {
    /// Video features JSONL
    #[arg(long)]
    videos: PathBuf,
    /// Captions JSONL
    #[arg(long)]
    captions: PathBuf,
}

/// Word-embedding source for concept vectors.
#[derive(Args)]
struct EmbeddingArgs {
    /// Optional word-embedding text file; missing words get seeded random vectors
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Seed for the random embedding fallback
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
}

impl EmbeddingArgs {
    fn table(&self) -> Result<EmbeddingTable> {
        match &self.embeddings {
            Some(path) => EmbeddingTable::load(path, self.embed_seed),
            None => Ok(EmbeddingTable::random(self.embed_seed)),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted concepts
    GenCorpus {
        #[arg(long)]
        out_videos: PathBuf,
        #[arg(long)]
        out_captions: PathBuf,
        #[arg(long, default_value_t = 500)]
        num_videos: usize,
        #[arg(long, default_value_t = 8)]
        n_frames: usize,
        #[arg(long, default_value_t = 64)]
        d_f: usize,
        #[arg(long, default_value_t = 30)]
        concept_pool: usize,
        #[arg(long, default_value_t = 4)]
        concepts_per_video: usize,
        #[arg(long, default_value_t = 6)]
        captions_per_video: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the concept vocabulary from a corpus
    BuildVocab {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long, default_value_t = 1000)]
        n_c: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the offline concept detector
    TrainDetector {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 256)]
        d_h: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the caption-set model
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        /// Flat key = value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set lambda_d=0
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Resume from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory receiving best.ckpt, last.ckpt, and train_log.jsonl
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Decode caption sets from a checkpoint
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction sets against reference captions
    Eval {
        #[arg(long)]
        preds: PathBuf,
        /// Reference captions JSONL
        #[arg(long)]
        refs: PathBuf,
        /// Video features JSONL matching the references
        #[arg(long)]
        videos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one ablation axis
    Ablate {
        /// One of: lambda, lambda_d, prefix_length, random_query_fraction, cls_head
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Project per-video encodings to 2-D
    Project {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_plot: PathBuf,
    },
}

fn load_run_config(config: &Option<PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {:?}", item)))?;
        cfg.set_key(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn load_labeled(corpus: &CorpusArgs, vocab: &ConceptVocabulary) -> Result<Corpus> {
    let mut c = load_corpus(&corpus.videos, &corpus.captions)?;
    label_corpus(&mut c, vocab)?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            out_videos,
            out_captions,
            num_videos,
            n_frames,
            d_f,
            concept_pool,
            concepts_per_video,
            captions_per_video,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec {
                num_videos,
                n_frames,
                d_f,
                concept_pool_size: concept_pool,
                concepts_per_video,
                captions_per_video,
                noise_scale: noise,
            };
            let corpus = generate_synthetic_corpus(&spec, seed)?;
            save_corpus(&corpus, &out_videos, &out_captions)?;
            println!(
                "wrote {} videos to {} and captions to {}",
                corpus.videos.len(),
                out_videos.display(),
                out_captions.display()
            );
        }
        Command::BuildVocab { corpus, emb, n_c, out } => {
            let c = load_corpus(&corpus.videos, &corpus.captions)?;
            let table = emb.table()?;
            let vocab = build_concept_vocabulary(&tagged_captions(&c), n_c, &table)?;
            save_vocabulary(&vocab, &out)?;
            println!("wrote {} concepts to {}", vocab.size(), out.display());
        }
        Command::TrainDetector {
            corpus,
            emb,
            vocab,
            epochs,
            lr,
            batch,
            d_h,
            seed,
            out,
        } => {
            let table = emb.table()?;
            let vocab = load_vocabulary(&vocab, &table)?;
            let c = load_labeled(&corpus, &vocab)?;
            let d_f = c
                .videos
                .first()
                .map(|v| v.features.ncols())
                .ok_or_else(|| Error::Data("empty corpus".into()))?;
            let config = DetectorConfig {
                d_f,
                d_h,
                n_c: vocab.size(),
                epochs,
                lr,
                batch,
                seed,
                ..DetectorConfig::default()
            };
            let params = train_detector(&c, config)?;
            params.save(&out)?;
            println!(
                "trained detector (final loss {:.6}) -> {}",
                params.final_loss,
                out.display()
            );
        }
        Command::Train {
            corpus,
            emb,
            vocab,
            detector,
            config,
            overrides,
            resume,
            out_dir,
        } => {
            let cfg = load_run_config(&config, &overrides)?;
            cfg.validate()?;
            let table = emb.table()?;
            let vocab = load_vocabulary(&vocab, &table)?;
            let c = load_labeled(&corpus, &vocab)?;
            let det = DetectorParams::load(&detector)?;
            let resume_state = resume.as_deref().map(TrainState::load).transpose()?;
            std::fs::create_dir_all(&out_dir)?;
            let mut log = std::io::BufWriter::new(std::fs::File::create(
                out_dir.join("train_log.jsonl"),
            )?);
            let out = harness::train(&cfg, &c, &vocab, &det, resume_state, Some(&mut log))?;
            drop(log);
            out.best.save(&out_dir.join("best.ckpt"))?;
            out.last.save(&out_dir.join("last.ckpt"))?;
            let last = out.history.last();
            println!(
                "trained {} epochs (final loss {:.4}, best val oracle CIDEr {:.4}) -> {}",
                cfg.epochs,
                last.map(|h| h.mean_loss).unwrap_or(f64::NAN),
                out.best.best_val_cider,
                out_dir.display()
            );
        }
        Command::Infer {
            ckpt,
            corpus,
            emb,
            vocab,
            detector,
            beam,
            out,
        } => {
            let state = TrainState::load(&ckpt)?;
            let table = emb.table()?;
            let vocab = load_vocabulary(&vocab, &table)?;
            let c = load_labeled(&corpus, &vocab)?;
            let det = DetectorParams::load(&detector)?;
            let preds = harness::infer(&state, &c, &det, &vocab, beam)?;
            save_predictions(&out, &preds)?;
            println!("wrote {} prediction sets to {}", preds.len(), out.display());
        }
        Command::Eval {
            preds,
            refs,
            videos,
            out,
        } => {
            let preds = load_predictions(&preds)?;
            let c = load_corpus(&videos, &refs)?;
            let report = metrics::evaluate(&preds, &c, BTreeMap::new())?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "oracle CIDEr {:.4}  Div-1 {:.4}  m-BLEU {:.4}  self-CIDEr {:.4} -> {}",
                report.mean.oracle_cider,
                report.mean.div1,
                report.mean.m_bleu,
                report.mean.self_cider,
                out.display()
            );
        }
        Command::Ablate {
            axis,
            corpus,
            emb,
            vocab,
            detector,
            config,
            overrides,
            out_dir,
        } => {
            let cfg = load_run_config(&config, &overrides)?;
            cfg.validate()?;
            let table = emb.table()?;
            let vocab = load_vocabulary(&vocab, &table)?;
            let c = load_labeled(&corpus, &vocab)?;
            let det = DetectorParams::load(&detector)?;
            let report = harness::ablate(&cfg, &axis, &c, &vocab, &det)?;
            std::fs::create_dir_all(&out_dir)?;
            report.write_csv(&out_dir.join(format!("ablation_{}.csv", axis)))?;
            report.write_plot(&out_dir.join(format!("ablation_{}.svg", axis)))?;
            print!("{}", report.table());
        }
        Command::Project {
            ckpt,
            corpus,
            emb,
            vocab,
            detector,
            out_csv,
            out_plot,
        } => {
            let state = TrainState::load(&ckpt)?;
            let table = emb.table()?;
            let vocab = load_vocabulary(&vocab, &table)?;
            let c = load_labeled(&corpus, &vocab)?;
            let det = DetectorParams::load(&detector)?;
            let proj = harness::project_encodings(&state, &c, &det, &vocab)?;
            proj.write_csv(&out_csv)?;
            proj.write_plot(&out_plot)?;
            println!(
                "{} points, mean intra-set distance {:.4}, mean inter-set distance {:.4}",
                proj.points.len(),
                proj.mean_intra_set_distance,
                proj.mean_inter_set_distance
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
