use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dst_core::config::RunConfig;
use dst_core::corpus::{gen_synthetic, load_corpus, save_corpus, Dialogue, Schema};
use dst_core::encoder::Tokenizer;
use dst_core::eval::{self, CorpusPredictions, WeightedTagCase};
use dst_core::protodst::{self, ProtoCheckpoint};
use dst_core::tracker::{self, ConceptDB, TrackerConfig};
use dst_core::training::{self, Checkpoint, TokenDropoutMode};
use dst_core::{DstError, Result};

#[derive(Parser, Debug)]
#[command(name = "dst", version, about = "Extractive dialogue state tracking trained without span labels")]
struct Cli {
    /// TOML file with [generator], [split], [encoder], [train], [proto] and [tracker] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and its train/dev/test splits.
    GenCorpus,
    /// Train the tracker.
    Train(TrainArgs),
    /// Train the attention-based span tagger on value queries.
    ProtoTrain(CorpusArgs),
    /// Replace span labels with spans found by a trained tagger.
    Autolabel(AutolabelArgs),
    /// Write predicted dialogue states as JSON lines.
    Track(TrackArgs),
    /// Score predicted states against gold.
    Evaluate(TrackArgs),
    /// Tune the value-matching threshold on a dev set.
    SweepTau(SweepTauArgs),
    /// Tagging accuracy of the span tagger as a function of the closing threshold.
    SweepNu(SweepNuArgs),
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    p_td: Option<f64>,
    #[arg(long)]
    p_hd: Option<f64>,
    /// random_token or unk_token.
    #[arg(long)]
    p_unk_mode: Option<TokenDropoutMode>,
    #[arg(long)]
    inform_masking: Option<bool>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct AutolabelArgs {
    #[arg(long)]
    proto: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    nu: Option<f64>,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    /// Disable value matching and use extracted spans only.
    #[arg(long)]
    no_vm: bool,
}

#[derive(Args, Debug)]
struct SweepTauArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dev: PathBuf,
}

#[derive(Args, Debug)]
struct SweepNuArgs {
    #[arg(long)]
    proto: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    schema: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GenCorpus => gen_corpus(&cfg, out),
        Command::Train(a) => {
            if let Some(v) = a.epochs {
                cfg.train.max_epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.p_td {
                cfg.train.p_td = v;
            }
            if let Some(v) = a.p_hd {
                cfg.train.p_hd = v;
            }
            if let Some(v) = a.p_unk_mode {
                cfg.train.p_unk_mode = v;
            }
            if let Some(v) = a.inform_masking {
                cfg.train.inform_masking = v;
            }
            if let Some(v) = a.tau {
                cfg.train.tau = v;
            }
            cfg.validate()?;
            train(&cfg, &a, out)
        }
        Command::ProtoTrain(a) => {
            if let Some(v) = a.epochs {
                cfg.proto.max_epochs = v;
            }
            cfg.validate()?;
            let schema = Schema::load(&a.schema)?;
            let corpus = load_corpus(&a.corpus, &schema)?;
            let tok = Tokenizer::build(&corpus, &schema, 1)?;
            let ckpt = protodst::proto_train(&corpus, &tok, &cfg.encoder, &cfg.proto)?;
            ckpt.save(&out.join("proto.json"))?;
            eval::write_text(&out.join("proto_digest.txt"), &format!("{}\n", ckpt.digest()?))?;
            info!("proto tagger trained with {} restarts", ckpt.restarts);
            Ok(())
        }
        Command::Autolabel(a) => {
            let proto = ProtoCheckpoint::load(&a.proto)?;
            let mut pcfg = proto.config.clone();
            if let Some(nu) = a.nu {
                pcfg.nu = nu;
            }
            pcfg.validate()?;
            let schema = Schema::load(&a.schema)?;
            let corpus = load_corpus(&a.corpus, &schema)?;
            let (labeled, stats) = protodst::autolabel(&proto.model, &corpus, &schema, &pcfg)?;
            save_corpus(&out.join("autolabeled.jsonl"), &labeled)?;
            eval::write_text(&out.join("rejections.csv"), &stats.to_csv())?;
            Ok(())
        }
        Command::Track(a) => {
            let (ckpt, corpus, db) = load_for_tracking(&a.checkpoint, &a.corpus)?;
            let tcfg = tracker_config(&cfg.tracker, &ckpt, a.tau, a.no_vm);
            let mut records = Vec::new();
            for d in &corpus {
                records.extend(tracker::track_dialogue(&ckpt.model, &db, d, &ckpt.schema, &tcfg)?);
            }
            tracker::write_jsonl(&out.join("states.jsonl"), &records)
        }
        Command::Evaluate(a) => {
            let (ckpt, corpus, db) = load_for_tracking(&a.checkpoint, &a.corpus)?;
            let tcfg = tracker_config(&cfg.tracker, &ckpt, a.tau, a.no_vm);
            let records = CorpusPredictions::compute(&ckpt.model, &db, &corpus)?.track(&corpus, &ckpt.schema, &db, &tcfg)?;
            let report = eval::report(&corpus, &records, &ckpt.schema)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| DstError::Checkpoint(e.to_string()))?;
            eval::write_text(&out.join("report.json"), &json)?;
            eval::write_text(&out.join("report.csv"), &eval::report_csv(&report))?;
            eval::write_text(&out.join("gate_confusion.csv"), &confusion_csv(&report.gate_confusion))?;
            let flat: Vec<_> = records.into_iter().flatten().collect();
            tracker::write_jsonl(&out.join("states.jsonl"), &flat)?;
            println!("jga {:.4} slot_gate_accuracy {:.4} turns {}", report.jga, report.slot_gate_accuracy, report.turn_count);
            Ok(())
        }
        Command::SweepTau(a) => {
            let (ckpt, dev, db) = load_for_tracking(&a.checkpoint, &a.dev)?;
            let preds = CorpusPredictions::compute(&ckpt.model, &db, &dev)?;
            let sweep = eval::sweep_tau(&preds, &dev, &ckpt.schema, &db, &cfg.tracker, &eval::tau_grid())?;
            eval::write_curve(out, "tau_sweep", "dev JGA by tau", "tau", "jga", &sweep.curve)?;
            eval::write_text(&out.join("best_tau.txt"), &format!("{}\n", sweep.best_tau))?;
            println!("best tau {:.1}", sweep.best_tau);
            Ok(())
        }
        Command::SweepNu(a) => {
            let proto = ProtoCheckpoint::load(&a.proto)?;
            let schema = Schema::load(&a.schema)?;
            let corpus = load_corpus(&a.corpus, &schema)?;
            let cases: Vec<WeightedTagCase> = protodst::positive_cases(&proto.model, &corpus, &proto.config)?;
            let curve = eval::nu_sweep(&cases, &eval::nu_grid())?;
            eval::write_curve(out, "nu_sweep", "tagging joint accuracy by nu", "nu", "tagging_joint_accuracy", &curve)?;
            Ok(())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> DstError {
    DstError::Io { path: path.display().to_string(), source: e }
}

fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (schema, corpus) = gen_synthetic(&cfg.generator, cfg.seed)?;
    schema.save(&out.join("schema.json"))?;
    save_corpus(&out.join("corpus.jsonl"), &corpus)?;
    let n_train = (corpus.len() as f64 * cfg.split.train).round() as usize;
    let n_dev = (corpus.len() as f64 * cfg.split.dev).round() as usize;
    let (train, rest) = corpus.split_at(n_train.min(corpus.len()));
    let (dev, test) = rest.split_at(n_dev.min(rest.len()));
    save_corpus(&out.join("train.jsonl"), train)?;
    save_corpus(&out.join("dev.jsonl"), dev)?;
    save_corpus(&out.join("test.jsonl"), test)?;
    info!("{} dialogues: {} train, {} dev, {} test", corpus.len(), train.len(), dev.len(), test.len());
    Ok(())
}

fn train(cfg: &RunConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    let schema = Schema::load(&a.schema)?;
    let train_set = load_corpus(&a.train, &schema)?;
    let dev = load_corpus(&a.dev, &schema)?;
    let tok = Tokenizer::build(&train_set, &schema, 1)?;
    let outcome = training::train(&train_set, &dev, &schema, tok, cfg.encoder.clone(), &cfg.train)?;
    outcome.checkpoint.save(&out.join("checkpoint.json"))?;
    eval::write_text(&out.join("train_log.csv"), &outcome.log.to_csv())?;
    eval::write_text(&out.join("checkpoint_digest.txt"), &format!("{}\n", outcome.checkpoint.digest()?))?;
    let curve: Vec<(f64, f64)> = outcome.log.dev_curve().into_iter().map(|(e, j)| (e as f64, j)).collect();
    eval::write_curve(out, "dev_jga", "dev JGA by epoch", "epoch", "dev_jga", &curve)?;
    println!(
        "best dev jga {:.4} at epoch {} after {} epochs",
        outcome.checkpoint.best_dev_jga, outcome.checkpoint.best_epoch, outcome.epochs_run
    );
    Ok(())
}

fn load_for_tracking(checkpoint: &Path, corpus: &Path) -> Result<(Checkpoint, Vec<Dialogue>, ConceptDB)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let corpus = load_corpus(corpus, &ckpt.schema)?;
    if corpus.is_empty() {
        return Err(DstError::Empty("corpus has no dialogues".into()));
    }
    let db = ConceptDB::build(&ckpt.model, &ckpt.schema)?;
    Ok((ckpt, corpus, db))
}

/// The checkpoint's tuned threshold applies unless the command line names one.
fn tracker_config(base: &TrackerConfig, ckpt: &Checkpoint, tau: Option<f64>, no_vm: bool) -> TrackerConfig {
    if no_vm {
        return TrackerConfig { l2_rule: base.l2_rule, ..TrackerConfig::no_vm() };
    }
    TrackerConfig { tau: tau.unwrap_or(ckpt.train_config.tau), ..*base }
}

fn confusion_csv(m: &[Vec<usize>]) -> String {
    let labels: Vec<&str> = dst_core::heads::GateClass::ALL.iter().map(|g| g.as_str()).collect();
    let mut s = format!("gold\\pred,{}\n", labels.join(","));
    for (label, row) in labels.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        s.push_str(&format!("{label},{}\n", cells.join(",")));
    }
    s
}
