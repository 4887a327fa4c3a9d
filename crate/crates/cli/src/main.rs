use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use spkver::metrics::{parse_scores, parse_trials, split_scored, write_scores, write_trials, MetricSummary};
use spkver::pipeline::{
    extract_embeddings, features_from_wav_list, generate_synthetic_corpus, gradient_suite, score_trials, train_backend, train_extractor,
    write_skip_manifest, Archive, BackendKind, Checkpoint, EmbeddingSet, ExperimentConfig, FeatureSet, GradSuiteOptions, Scorer,
};

/// Speaker embedding training, extraction, scoring and evaluation.
#[derive(Parser)]
#[command(name = "spkver", version)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "SPKVER_THREADS", default_value_t = 0)]
    threads: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Cosine,
    Csml,
    LdaPlda,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScorerArg {
    Cosine,
    Csml,
    Plda,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled feature corpus.
    Synth {
        /// Experiment config; only its [corpus] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        first_speaker: Option<usize>,
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the MFCC frontend over a list of `id path [speaker]` lines.
    Mfcc {
        #[arg(long)]
        list: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train an embedding extractor.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training features; defaults to paths.train_features.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Held-out features for per-epoch cosine EER and model selection.
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Total epochs, overriding the config.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Best checkpoint.
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the final state here.
        #[arg(long)]
        last: Option<PathBuf>,
        /// Per-epoch log as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Extract one embedding per utterance.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Where to list utterances too short for the network.
        #[arg(long)]
        skipped: Option<PathBuf>,
    },
    /// Fit a scoring backend on labeled embeddings.
    BackendTrain {
        #[arg(long, value_enum)]
        kind: BackendArg,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip mean subtraction for cosine and CSML.
        #[arg(long)]
        no_center: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score a trial list.
    Score {
        #[arg(long, value_enum)]
        backend: ScorerArg,
        /// Trained backend; optional for plain cosine scoring.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// EER and minDCF of a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long = "p-target", default_values_t = vec![0.01, 0.001])]
        p_target: Vec<f64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write every labeled pair of an embedding archive as a trial list.
    Trials {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive, loss and both networks.
    Gradcheck {
        #[arg(long, default_value_t = 12)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 7)]
        blocks: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        primitives_only: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_archive(path: &Path) -> Result<Archive> {
    Archive::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_features(path: &Path) -> Result<FeatureSet> {
    Ok(FeatureSet::from_archive(&read_archive(path)?)?)
}

fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    Ok(EmbeddingSet::from_archive(&read_archive(path)?)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, speakers, utterances, first_speaker, separation, seed, out } => {
            let mut spec = load_config(config.as_deref())?.corpus;
            spec.n_speakers = speakers.unwrap_or(spec.n_speakers);
            spec.utterances_per_speaker = utterances.unwrap_or(spec.utterances_per_speaker);
            spec.first_speaker = first_speaker.unwrap_or(spec.first_speaker);
            spec.separation = separation.unwrap_or(spec.separation);
            spec.seed = seed.unwrap_or(spec.seed);
            let set = generate_synthetic_corpus(&spec)?;
            set.to_archive()?.write(&out)?;
            println!("wrote {} utterances from {} speakers to {}", set.len(), spec.n_speakers, out.display());
        }
        Command::Mfcc { list, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let text = std::fs::read_to_string(&list).with_context(|| format!("reading {}", list.display()))?;
            let base = list.parent().unwrap_or(Path::new("."));
            let set = features_from_wav_list(&text, base, &cfg.frontend)?;
            set.to_archive()?.write(&out)?;
            println!("wrote features for {} utterances to {}", set.len(), out.display());
        }
        Command::Train { config, train, valid, epochs, resume, out, last, log } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let train_path = train.or_else(|| cfg.paths.train_features.clone()).context("no training features given (--train or paths.train_features)")?;
            let data = read_features(&train_path)?;
            let valid = valid.map(|p| read_features(&p)).transpose()?;
            let resume = resume.map(|p| Checkpoint::load(&p).with_context(|| format!("loading checkpoint {}", p.display()))).transpose()?;
            let outcome = train_extractor(&cfg, &data, valid.as_ref(), resume)?;
            for e in &outcome.log {
                match e.val_eer {
                    Some(v) => println!("epoch {:3}  step {:6}  loss {:.5}  val EER {:.3}%", e.epoch, e.step, e.mean_loss, 100.0 * v),
                    None => println!("epoch {:3}  step {:6}  loss {:.5}", e.epoch, e.step, e.mean_loss),
                }
            }
            outcome.best.save(&out)?;
            if let Some(p) = last {
                outcome.last.save(&p)?;
            }
            if let Some(p) = log {
                write_text(&p, &serde_json::to_string_pretty(&outcome.log)?)?;
            }
            println!("wrote checkpoint (epoch {}) to {}", outcome.best.epoch, out.display());
        }
        Command::Extract { checkpoint, features, out, skipped } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let set = read_features(&features)?;
            let (emb, skip) = extract_embeddings(&ckpt.model, &set)?;
            emb.to_archive()?.write(&out)?;
            if let Some(p) = skipped {
                write_text(&p, &write_skip_manifest(&skip))?;
            }
            println!("wrote {} embeddings to {} ({} skipped)", emb.len(), out.display(), skip.len());
        }
        Command::BackendTrain { kind, embeddings, config, no_center, out } => {
            let mut cfg = load_config(config.as_deref())?.backend;
            cfg.kind = match kind {
                BackendArg::Cosine => BackendKind::Cosine,
                BackendArg::Csml => BackendKind::Csml,
                BackendArg::LdaPlda => BackendKind::LdaPlda,
            };
            cfg.center = cfg.center && !no_center;
            let (scorer, trace) = train_backend(&cfg, &read_embeddings(&embeddings)?)?;
            if let Some(t) = trace {
                println!("csml: best epoch {} of {}, validation EER per epoch {:?}", t.best_epoch, t.losses.len(), t.val_eer);
            }
            scorer.save(&out)?;
            println!("wrote {} backend to {}", scorer.name(), out.display());
        }
        Command::Score { backend, model, embeddings, trials, out } => {
            let scorer = match (&model, backend) {
                (None, ScorerArg::Cosine) => Scorer::Cosine { mean: None },
                (None, _) => bail!("--model is required for this backend"),
                (Some(p), _) => Scorer::load(p).with_context(|| format!("loading backend {}", p.display()))?,
            };
            let want = match backend {
                ScorerArg::Cosine => "cosine",
                ScorerArg::Csml => "csml",
                ScorerArg::Plda => "plda",
            };
            if scorer.name() != want {
                bail!("backend file holds a {} model, not {want}", scorer.name());
            }
            let text = std::fs::read_to_string(&trials).with_context(|| format!("reading {}", trials.display()))?;
            let scored = score_trials(&scorer, &read_embeddings(&embeddings)?, &parse_trials(&text)?)?;
            write_text(&out, &write_scores(&scored))?;
            println!("scored {} trials into {}", scored.len(), out.display());
        }
        Command::Eval { scores, p_target, json } => {
            let text = std::fs::read_to_string(&scores).with_context(|| format!("reading {}", scores.display()))?;
            let (s, t) = split_scored(&parse_scores(&text)?);
            let summary = MetricSummary::compute(&s, &t, &p_target)?;
            print!("{}", summary.table());
            if let Some(p) = json {
                write_text(&p, &serde_json::to_string_pretty(&summary)?)?;
            }
        }
        Command::Trials { embeddings, out } => {
            let trials = read_embeddings(&embeddings)?.all_pairs();
            if trials.is_empty() {
                bail!("no labeled pairs in {}", embeddings.display());
            }
            write_text(&out, &write_trials(&trials))?;
            println!("wrote {} trials to {}", trials.len(), out.display());
        }
        Command::Gradcheck { coords, seed, frames, blocks, tolerance, primitives_only } => {
            let opts = GradSuiteOptions { coords_per_tensor: coords, seed, frames, resnet_blocks: blocks, primitives_only, ..Default::default() };
            let cases = gradient_suite(&opts)?;
            let mut failed = 0;
            for c in &cases {
                let ok = c.max_rel_error < tolerance;
                failed += usize::from(!ok);
                println!("{:28} {:10.3e} {:6} checked {:4} skipped  {}", c.name, c.max_rel_error, c.checked, c.skipped, if ok { "PASS" } else { "FAIL" });
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks above {tolerance:e}", cases.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
