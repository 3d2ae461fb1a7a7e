use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mpi_nli::data::{self, OverlapNorm, SyntheticSpec};
use mpi_nli::gradcheck::{self, SUITE_TOLERANCE};
use mpi_nli::train::{self, Checkpoint, Dataset, TrainConfig};
use mpi_nli::{Error, Label};

#[derive(Parser)]
#[command(name = "mpi-nli", version, about = "Multi-perspective inference for NLI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Matched,
    Mismatched,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a JSONL dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write one predicted label per line.
        #[arg(long)]
        preds_out: Option<PathBuf>,
    },
    /// Word-overlap binning, optional error report and reference comparison.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        /// Predicted labels, one per line, aligned with the data.
        #[arg(long)]
        preds: Option<PathBuf>,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
        /// Normalize overlap by premise length instead of hypothesis length.
        #[arg(long)]
        premise_normalized: bool,
        /// Compare bin counts with the published MultiNLI development-set counts.
        #[arg(long, value_enum)]
        reference: Option<Reference>,
    },
    /// Export routing weights for one sentence pair as JSON.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        premise: String,
        #[arg(long)]
        hypothesis: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every operation and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic corpus as JSONL.
    Synth {
        /// key = value spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => run_train(&config, out),
        Command::Eval { ckpt, data, preds_out } => run_eval(&ckpt, &data, preds_out.as_deref()),
        Command::Analyze {
            data,
            preds,
            out,
            premise_normalized,
            reference,
        } => run_analyze(&data, preds.as_deref(), &out, premise_normalized, reference),
        Command::Trace {
            ckpt,
            premise,
            hypothesis,
            out,
        } => run_trace(&ckpt, &premise, &hypothesis, &out),
        Command::Gradcheck { seed } => run_gradcheck(seed),
        Command::Synth { spec, out } => run_synth(spec.as_deref(), &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the error chain, skipping causes already quoted by an outer message.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if msg.contains(&s) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&s);
    }
    msg
}

fn run_train(config: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg = TrainConfig::from_file(config).with_context(|| format!("loading config {}", config.display()))?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    let dir = cfg.out_dir.get_or_insert_with(|| PathBuf::from("run")).clone();
    println!(
        "training {} (embedding {}, hidden {}, d_high {}, r {}) seed {}",
        cfg.variant, cfg.embedding_dim, cfg.hidden, cfg.d_high, cfg.iterations, cfg.seed
    );
    let run = match train::train(&cfg) {
        Ok(run) => run,
        Err(Error::Diverged {
            epoch,
            step,
            reason,
            last_good,
        }) => {
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("last_good.ckpt");
            last_good.save(&path)?;
            bail!(
                "training diverged at epoch {epoch}, step {step}: {reason}; last good checkpoint saved to {}",
                path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    for e in &run.epochs {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3} lr {:.2e} loss {:.4} (main {:.4} ce {:.4} margin {:.4}) train acc {} dev loss {} dev acc {} dev aux {}",
            e.epoch,
            e.lr,
            e.total,
            e.main,
            e.aux_ce,
            e.aux_margin,
            opt(e.train_accuracy),
            opt(e.dev_loss),
            opt(e.dev_accuracy),
            opt(e.dev_aux_accuracy)
        );
    }
    println!(
        "best epoch {} (metric {:.4}); checkpoint and logs in {}",
        run.best.epoch,
        run.best.best_metric,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_eval(ckpt: &Path, data_path: &Path, preds_out: Option<&Path>) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(ckpt)?;
    let loaded = data::load_jsonl(data_path)?;
    let data = Dataset::new(loaded.examples, &ckpt.vocab)?;
    let eval = train::evaluate(&ckpt.model, &data, &ckpt.config.objective)?;
    println!("examples {} (dropped {})", eval.examples, loaded.dropped);
    println!("accuracy {:.4}", eval.accuracy);
    if let Some(aux) = eval.aux_accuracy {
        println!("aux_accuracy {aux:.4}");
    }
    println!("confusion (rows gold, columns predicted)");
    println!("{:>14} {:>10} {:>10} {:>13}", "", "entailment", "neutral", "contradiction");
    for gold in Label::ALL {
        let row = eval.confusion[gold.index()];
        println!("{:>14} {:>10} {:>10} {:>13}", gold.name(), row[0], row[1], row[2]);
    }
    if let Some(path) = preds_out {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for p in &eval.predictions {
            writeln!(w, "{p}")?;
        }
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn read_predictions(path: &Path) -> Result<Vec<Label>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(line.parse().with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn run_analyze(
    data_path: &Path,
    preds: Option<&Path>,
    out: &Path,
    premise_normalized: bool,
    reference: Option<Reference>,
) -> Result<ExitCode> {
    let loaded = data::load_jsonl(data_path)?;
    let examples = loaded.examples;
    let norm = if premise_normalized { OverlapNorm::Premise } else { OverlapNorm::Hypothesis };
    let binning = data::bin_by_overlap(&examples, norm)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let create = |name: &str| -> Result<File> {
        let p = out.join(name);
        File::create(&p).with_context(|| format!("creating {}", p.display()))
    };
    data::write_csv(create("overlap.csv")?, &data::overlap_rows(&examples, &binning))?;
    let errors = match preds {
        Some(p) => {
            let predictions = read_predictions(p)?;
            let rows = data::error_report(&binning, &examples, &predictions)?;
            data::write_csv(create("errors.csv")?, &rows)?;
            Some(rows)
        }
        None => None,
    };
    if let Some(r) = reference {
        let table = match r {
            Reference::Matched => &data::REFERENCE_MATCHED,
            Reference::Mismatched => &data::REFERENCE_MISMATCHED,
        };
        let rows = data::compare_reference(&binning, table);
        data::write_csv(create("reference.csv")?, &rows)?;
    }
    let summary = data::summarize(&binning, errors.as_deref());
    train::write_json(&out.join("summary.json"), &summary)?;

    println!("{} examples (dropped {})", examples.len(), loaded.dropped);
    for b in &summary.bins {
        let rate = b.error_rate.map_or(String::new(), |r| format!(" error rate {r:.4}"));
        println!(
            "{:<10} EN {:>5} NE {:>5} CON {:>5} total {:>6}{rate}",
            b.bin, b.entailment, b.neutral, b.contradiction, b.total
        );
    }
    println!("reports written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_trace(ckpt: &Path, premise: &str, hypothesis: &str, out: &Path) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(ckpt)?;
    let export = train::export_routing(&ckpt, &data::tokenize(premise), &data::tokenize(hypothesis))?;
    train::write_json(out, &export)?;
    let probs: Vec<String> = export.probabilities.iter().map(|p| format!("{p:.4}")).collect();
    println!("prediction {} [{}]; trace written to {}", export.prediction, probs.join(", "), out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(seed: u64) -> Result<ExitCode> {
    let mut entries = gradcheck::op_suite(seed)?;
    entries.extend(gradcheck::model_suite(seed)?);
    let mut worst = 0.0f64;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} {:>6} entries  max rel error {:.3e}  {status}",
            e.name, e.report.entries, e.report.max_rel_error
        );
        worst = worst.max(e.report.max_rel_error);
        failed += usize::from(!e.passed());
    }
    println!("max relative error {worst:.3e} (tolerance {SUITE_TOLERANCE:.0e})");
    if failed > 0 {
        eprintln!("{failed} check(s) failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_synth(spec: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let spec = match spec {
        Some(p) => SyntheticSpec::from_file(p)?,
        None => SyntheticSpec::default(),
    };
    let examples = data::gen_synthetic(&spec)?;
    data::save_jsonl(out, &examples)?;
    println!("{} examples written to {}", examples.len(), out.display());
    Ok(ExitCode::SUCCESS)
}
