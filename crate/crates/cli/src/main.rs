//! Command-line front end: prepare splits, train, evaluate, dump attention
//! matrices and run the gradient checks.

mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use wsdattn::checks::{architecture_checks, operation_checks};
use wsdattn::data::{build_vocab, parse_corpus, read_corpus, split_corpus, SenseCorpus, SplitManifest, Split};
use wsdattn::eval::{dump_attention, evaluate, EvalOptions, EvalReport, SenseInventory};
use wsdattn::model::Checkpoint;
use wsdattn::training::{train_with_hook, TrainOutcome};
use wsdattn::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "wsdattn", version, about = "Attention-fusion encoder-decoder models for word sense disambiguation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a corpus into train/dev/test and write the split manifest.
    Prepare {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Run directory; defaults to runs/<architecture>-seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        /// Checkpoint directory (a run's `best/`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus to evaluate on; every sentence is used.
        #[arg(long)]
        test: PathBuf,
        /// Where to write report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Name of the training data in the report.
        #[arg(long, default_value = "train")]
        train_name: String,
        /// Predict the most frequent sense for out-of-vocabulary targets.
        #[arg(long)]
        mfs_backoff: bool,
    },
    /// Write per-stream and fused attention matrices for one sentence.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus-format file, or plain whitespace-separated text.
        #[arg(long)]
        sentence: PathBuf,
        /// Which sentence of the file to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every operation and architecture.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. --set learning_rate=0.1.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training corpus; same as --set corpus=PATH.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Seed for training and for drawing the split.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> wsdattn::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(c) = &self.corpus {
            cfg.corpus = Some(c.clone());
        }
        if let Some(s) = self.seed {
            cfg.training.seed = s;
            cfg.split_seed = s;
        }
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => 1,
        Some(Error::Parse { .. } | Error::Vocabulary { .. } | Error::Io { .. } | Error::Format { .. }) => 2,
        Some(Error::Numeric { .. } | Error::Diverged { .. } | Error::Dimension { .. } | Error::Shape { .. }) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Prepare { run, out } => prepare(&run.resolve()?, &out),
        Command::Train { run, out } => {
            let cfg = run.resolve()?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-seed{}", cfg.model.architecture, cfg.training.seed))
            });
            train(&cfg, &out)
        }
        Command::Eval {
            checkpoint,
            test,
            out,
            train_name,
            mfs_backoff,
        } => eval(&checkpoint, &test, out.as_deref(), &train_name, mfs_backoff),
        Command::DumpAttn {
            checkpoint,
            sentence,
            index,
            out,
        } => dump(&checkpoint, &sentence, index, &out),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn load_corpus(path: &Path) -> anyhow::Result<SenseCorpus> {
    let (corpus, warnings) = read_corpus(path)?;
    for w in warnings {
        log::warn!("{}:{}: {}", path.display(), w.line, w.message);
    }
    if corpus.is_empty() {
        return Err(Error::format(path, "no sentences").into());
    }
    Ok(corpus)
}

/// Reads the configured corpus and tags its splits.
fn split_input(cfg: &RunConfig) -> anyhow::Result<(SenseCorpus, SplitManifest)> {
    let path = cfg.corpus.as_deref().ok_or_else(|| Error::Usage("no corpus given (--corpus or --set corpus=PATH)".into()))?;
    let mut corpus = load_corpus(path)?;
    let manifest = match &cfg.split {
        Some(p) => {
            let m = SplitManifest::load(p)?;
            m.apply(&mut corpus).with_context(|| format!("applying {}", p.display()))?;
            m
        }
        None => split_corpus(&mut corpus, cfg.ratios(), cfg.split_seed)?,
    };
    Ok((corpus, manifest))
}

fn create_dir(dir: &Path) -> wsdattn::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn prepare(cfg: &RunConfig, out: &Path) -> anyhow::Result<u8> {
    let (corpus, manifest) = split_input(cfg)?;
    create_dir(out)?;
    manifest.save(&out.join("split.json"))?;
    let train = SenseCorpus::subset(corpus.split(Split::Train));
    let vocab = build_vocab(&train, cfg.training.min_count);
    vocab.save(out)?;
    let targets = |s: Split| corpus.split(s).map(|x| x.targets().count()).sum::<usize>();
    let summary = serde_json::json!({
        "sentences": { "train": manifest.train.len(), "dev": manifest.dev.len(), "test": manifest.test.len() },
        "targets": { "train": targets(Split::Train), "dev": targets(Split::Dev), "test": targets(Split::Test) },
        "vocabulary": { "words": vocab.words.len(), "pos": vocab.pos.len(), "output": vocab.output.len() },
    });
    wsdattn::io::write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(0)
}

fn write_reports(dir: &Path, reports: &[EvalReport]) -> anyhow::Result<()> {
    for r in reports {
        r.save(&dir.join(format!("report_{}.json", r.test)))?;
    }
    wsdattn::io::write_atomic(&dir.join("report.txt"), EvalReport::table(reports).as_bytes())?;
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> anyhow::Result<u8> {
    let (corpus, manifest) = split_input(cfg)?;
    create_dir(out)?;
    let mut snapshot = cfg.clone();
    snapshot.corpus = snapshot.corpus.map(|p| std::fs::canonicalize(&p).unwrap_or(p));
    snapshot.split = snapshot.split.map(|p| std::fs::canonicalize(&p).unwrap_or(p));
    snapshot.save(out)?;
    manifest.save(&out.join("split.json"))?;

    let log_path = out.join("train.log");
    let mut log_file = std::fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut hook = |r: &wsdattn::training::EpochRecord| {
        let mut line = format!("epoch {} loss {:.6}", r.epoch, r.loss);
        if let Some(f) = r.dev_f1 {
            let _ = write!(line, " dev_f1 {f:.4}");
        }
        let _ = writeln!(log_file, "{line}");
        log::info!("{line}");
    };
    let outcome = match train_with_hook(&corpus, &cfg.model, &cfg.training, &mut hook) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, last_good }) => {
            last_good.save(&out.join("last_good"))?;
            last_good.log.write(out)?;
            return Err(Error::Diverged { epoch, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    outcome.log.write(out)?;
    outcome.save(&out.join("best"))?;

    let opts = EvalOptions {
        window: cfg.training.window,
        backoff: cfg.backoff,
        ..Default::default()
    };
    let mut reports = Vec::new();
    for (split, name) in [(Split::Dev, "dev"), (Split::Test, "test")] {
        let part = SenseCorpus::subset(corpus.split(split));
        if part.sentences.iter().any(|s| s.targets().next().is_some()) {
            reports.push(report(&outcome, &part, &opts, name)?);
        }
    }
    write_reports(out, &reports)?;
    println!("best epoch {} of {}", outcome.best_epoch, cfg.training.epochs);
    print!("{}", EvalReport::table(&reports));
    println!("run written to {}", out.display());
    Ok(0)
}

fn report(outcome: &TrainOutcome, part: &SenseCorpus, opts: &EvalOptions, name: &str) -> wsdattn::Result<EvalReport> {
    let ck = &outcome.checkpoint;
    evaluate(&ck.model, &ck.params, &ck.vocab, &outcome.inventory, part, opts, "train", name)
}

fn eval(checkpoint: &Path, test: &Path, out: Option<&Path>, train_name: &str, mfs: bool) -> anyhow::Result<u8> {
    let ck = Checkpoint::load(checkpoint)?;
    let inventory = SenseInventory::load(checkpoint, ck.vocab.output.len())?;
    let corpus = load_corpus(test)?;
    let opts = EvalOptions {
        backoff: if mfs { wsdattn::eval::Backoff::MostFrequent } else { Default::default() },
        ..Default::default()
    };
    let test_name = test.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "test".into());
    let report = evaluate(&ck.model, &ck.params, &ck.vocab, &inventory, &corpus, &opts, train_name, &test_name)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        report.save(&dir.join("report.json"))?;
        wsdattn::io::write_atomic(&dir.join("report.txt"), EvalReport::table(std::slice::from_ref(&report)).as_bytes())?;
    }
    print!("{}", EvalReport::table(std::slice::from_ref(&report)));
    Ok(0)
}

/// Plain text becomes one sentence per line with every token tagged `other`.
fn read_sentences(path: &Path) -> anyhow::Result<SenseCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.lines().any(|l| l.contains('\t')) {
        return Ok(parse_corpus(&text, &path.display().to_string())?.0);
    }
    let mut tsv = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        for tok in line.split_whitespace() {
            let _ = writeln!(tsv, "{tok}\t{}\tother", tok.to_lowercase());
        }
        tsv.push('\n');
    }
    Ok(parse_corpus(&tsv, &path.display().to_string())?.0)
}

fn dump(checkpoint: &Path, sentence: &Path, index: usize, out: &Path) -> anyhow::Result<u8> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = read_sentences(sentence)?;
    let n = corpus.len();
    let s = corpus
        .sentences
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::Usage(format!("--index {index}: {} has {n} sentences", sentence.display())))?;
    let manifest = dump_attention(&ck, &s, out)?;
    if !manifest.unk_positions.is_empty() {
        let words: Vec<&str> = manifest.unk_positions.iter().map(|&i| manifest.tokens[i].as_str()).collect();
        log::warn!("out-of-vocabulary tokens replaced by <unk>: {}", words.join(" "));
    }
    println!("{} matrices of {}x{} written to {}", manifest.files.len(), manifest.steps, manifest.source_length, out.display());
    Ok(0)
}

fn gradcheck(seed: u64) -> anyhow::Result<u8> {
    let mut checks = operation_checks(seed)?;
    checks.extend(architecture_checks(seed)?);
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:width$}  {:>10}  result", "check", "max error")?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.report.passed;
        failed += (!ok) as usize;
        writeln!(stdout, "{:width$}  {:>10.2e}  {}", c.name, c.report.max_rel_error(), if ok { "ok" } else { "FAILED" })?;
    }
    writeln!(stdout, "{} of {} checks passed", checks.len() - failed, checks.len())?;
    if failed > 0 {
        return Err(anyhow!(Error::Numeric {
            name: format!("{failed} gradient checks"),
        }));
    }
    Ok(0)
}
