//! The `radicalc` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::bank::{build_bank, encode_char, BankDir, Charset};
use crate::error::{Error, Result};
use crate::gradcheck::pipeline_grad_check;
use crate::ids::{load_ids_table, parse_ids_str, IdsNode};
use crate::metrics::{evaluate, load_eval_files};
use crate::pgm::{read_pgm, write_pgm};
use crate::trainer::{pad_image, summarize, Checkpoint, TrainConfig, Trainer};

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Word accuracy that `train-toy` reports as reaching the target.
pub const TARGET_WORD_ACC: f64 = 0.9;

#[derive(Debug, Parser)]
#[command(
    name = "radicalc",
    version,
    about = "Bag-of-radicals tooling for Chinese scene-text recognition"
)]
pub struct Cli {
    /// Seed for every random stream [default: 7, or the config file's seed]
    #[arg(long, global = true, env = "RADICALC_SEED")]
    pub seed: Option<u64>,
    /// Machine-readable JSON output
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect ideographic description sequences
    #[command(subcommand)]
    Ids(IdsCommand),
    /// Build the radical bank
    #[command(subcommand)]
    Bank(BankCommand),
    /// Print a character's radicals and bag-of-radicals indices
    Encode {
        /// The character to encode
        character: char,
        /// Bank directory written by `bank build`
        #[arg(long)]
        bank: PathBuf,
    },
    /// Finite-difference check of the full model's gradients
    Gradcheck,
    /// Train the toy model on synthetic glyph words
    TrainToy(TrainArgs),
    /// Score predictions against ground truth
    Eval {
        /// Predictions, `id<TAB>transcript` per line
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth, `id<TAB>transcript` per line
        #[arg(long)]
        gt: PathBuf,
        /// Compare Latin letters without lowercasing
        #[arg(long)]
        case_sensitive: bool,
    },
    /// Greedy-decode a PGM image with a trained checkpoint
    Decode {
        /// Checkpoint written by `train-toy`
        #[arg(long)]
        ckpt: PathBuf,
        /// Greyscale PGM (P2 or P5)
        #[arg(long)]
        image: PathBuf,
    },
    /// Render the training words of a config as PGM images
    Synth {
        /// Training config file
        #[arg(long)]
        config: PathBuf,
        /// Output directory for images and labels.tsv
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        /// Number of words to render
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum IdsCommand {
    /// Parse every entry of an IDS table and report failures
    Check {
        /// Table in `U+XXXX<TAB>char<TAB>IDS...` format
        file: PathBuf,
    },
    /// Parse one IDS and print its tree
    Parse {
        /// The sequence, e.g. ⿱彗心
        ids: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum BankCommand {
    /// Collect the radicals of a charset into a bank directory
    Build {
        /// Charset file, one character per line
        #[arg(long)]
        charset: PathBuf,
        /// IDS table
        #[arg(long)]
        ids: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; paths inside are relative to it
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for train_log.jsonl and checkpoint.rdcl
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Override the configured number of steps (with --resume: stop at this step
    /// without changing the schedule)
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint instead of fresh parameters
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Feed the plain character embedding instead of the fused one
    #[arg(long)]
    pub no_cvfm: bool,
    /// Drop the radical BCE term from the loss
    #[arg(long)]
    pub no_bce: bool,
    /// Replace every bag-of-radicals row with zeros
    #[arg(long)]
    pub re_zero: bool,
    /// Remove the learnable scaler on the embedding
    #[arg(long)]
    pub no_scaler: bool,
    /// Disable dropout
    #[arg(long)]
    pub no_dropout: bool,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.rdcl";

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn emit(json: bool, value: serde_json::Value, text: String) {
    if json {
        println!("{value}");
    } else {
        print!("{text}");
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let seed = cli.seed.unwrap_or(7);
    match &cli.command {
        Command::Ids(IdsCommand::Check { file }) => ids_check(cli.json, file),
        Command::Ids(IdsCommand::Parse { ids }) => {
            let tree = parse_ids_str(ids).map_err(Error::Ids)?;
            let mut text = String::new();
            tree_lines(&tree, "", "", &mut text);
            emit(cli.json, tree_json(&tree), text);
            Ok(0)
        }
        Command::Bank(BankCommand::Build { charset, ids, out }) => {
            let cs = Charset::load(charset)?;
            let ids_text = fs::read_to_string(ids).map_err(|e| Error::unreadable(ids, e))?;
            let table = crate::ids::DecompositionTable::parse(&ids_text)?;
            let bank = build_bank(&cs, &table)?;
            let matrix = BankDir::write(out, &cs, &bank, &ids_text, &table)?;
            let (rows, cols) = matrix.shape();
            emit(
                cli.json,
                json!({"radicals": cols, "classes": rows, "characters": cs.chars().len(),
                       "table_warnings": table.warnings().len(), "out": out}),
                format!(
                    "{} characters, {} radicals, BoR matrix {rows}x{cols} written to {}\n",
                    cs.chars().len(),
                    cols,
                    out.display()
                ),
            );
            Ok(0)
        }
        Command::Encode { character, bank } => {
            let dir = BankDir::load(bank)?;
            let enc = encode_char(*character, &dir.bank, &dir.table);
            let radicals: Vec<(usize, String)> = enc
                .vector
                .ones()
                .map(|i| (i, dir.bank.radicals()[i].to_string()))
                .collect();
            let mut text = format!("{character}: {} radicals\n", radicals.len());
            for (i, r) in &radicals {
                text.push_str(&format!("{i:>6}  {r}\n"));
            }
            for m in &enc.missing {
                text.push_str(&format!("  not in bank: {m}\n"));
            }
            emit(
                cli.json,
                json!({
                    "character": character.to_string(),
                    "radicals": radicals.iter().map(|(i, r)| json!({"index": i, "radical": r})).collect::<Vec<_>>(),
                    "missing": enc.missing.iter().map(ToString::to_string).collect::<Vec<_>>(),
                }),
                text,
            );
            Ok(0)
        }
        Command::Gradcheck => {
            let report = pipeline_grad_check(seed)?;
            let pass = report.max_rel_err < GRADCHECK_TOLERANCE;
            let worst = report
                .worst
                .as_ref()
                .map(|(n, i)| format!("{n}[{i}]"))
                .unwrap_or_default();
            emit(
                cli.json,
                json!({"seed": seed, "max_rel_err": report.max_rel_err, "worst": worst,
                       "entries": report.entries_checked, "pass": pass}),
                format!(
                    "max rel err {:.3e} over {} entries (worst {worst}), {}\n",
                    report.max_rel_err,
                    report.entries_checked,
                    if pass { "ok" } else { "FAILED" }
                ),
            );
            Ok(if pass { 0 } else { 1 })
        }
        Command::TrainToy(args) => train_toy(cli, args),
        Command::Eval {
            pred,
            gt,
            case_sensitive,
        } => {
            let input = load_eval_files(pred, gt)?;
            for w in &input.warnings {
                eprintln!("warning: {w}");
            }
            let report = evaluate(&input.pairs, *case_sensitive)?;
            emit(
                cli.json,
                serde_json::to_value(&report).expect("report serialises"),
                report.to_table(),
            );
            Ok(0)
        }
        Command::Decode { ckpt, image } => {
            let trainer = Checkpoint::load(ckpt)?.into_trainer()?;
            let img = read_pgm(image)?;
            let img = pad_image(&img, trainer.model.img_width)?;
            let text = trainer
                .decoder()
                .decode_greedy(&img, &trainer.charset, trainer.model.max_decode_len)?;
            emit(cli.json, json!({"text": text}), format!("{text}\n"));
            Ok(0)
        }
        Command::Synth { config, out, count } => {
            let (cfg, base) = read_config(config, cli.seed)?;
            let (charset, bor) = cfg.load_data(&base)?;
            let trainer = Trainer::new(cfg, charset, &bor.to_tensor())?;
            fs::create_dir_all(out)?;
            let mut labels = String::new();
            for (i, (word, img)) in trainer.probe_set().take(*count).enumerate() {
                let name = format!("word_{i:04}.pgm");
                write_pgm(&out.join(&name), img)?;
                labels.push_str(&format!("{name}\t{word}\n"));
            }
            fs::write(out.join("labels.tsv"), &labels)?;
            emit(
                cli.json,
                json!({"images": labels.lines().count(), "out": out}),
                format!("{} images written to {}\n", labels.lines().count(), out.display()),
            );
            Ok(0)
        }
    }
}

fn ids_check(json_out: bool, file: &Path) -> Result<i32> {
    let table = load_ids_table(file)?;
    let failures: Vec<_> = table.warnings().iter().map(ToString::to_string).collect();
    let mut text = format!("{} characters parsed, {} failures\n", table.len(), failures.len());
    for f in &failures {
        text.push_str(&format!("  {f}\n"));
    }
    emit(json_out, json!({"entries": table.len(), "failures": failures}), text);
    Ok(if failures.is_empty() { 0 } else { 1 })
}

fn tree_lines(node: &IdsNode, lead: &str, child_lead: &str, out: &mut String) {
    match node {
        IdsNode::Leaf(c) => out.push_str(&format!("{lead}{c}\n")),
        IdsNode::Internal { op, children } => {
            out.push_str(&format!("{lead}{op}\n"));
            for (i, child) in children.iter().enumerate() {
                let last = i + 1 == children.len();
                let (branch, cont) = if last { ("└─ ", "   ") } else { ("├─ ", "│  ") };
                tree_lines(
                    child,
                    &format!("{child_lead}{branch}"),
                    &format!("{child_lead}{cont}"),
                    out,
                );
            }
        }
    }
}

fn tree_json(node: &IdsNode) -> serde_json::Value {
    match node {
        IdsNode::Leaf(c) => json!(c.to_string()),
        IdsNode::Internal { op, children } => {
            json!({"op": op.to_string(), "children": children.iter().map(tree_json).collect::<Vec<_>>()})
        }
    }
}

fn read_config(path: &Path, seed: Option<u64>) -> Result<(TrainConfig, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::unreadable(path, e))?;
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn train_toy(cli: &Cli, args: &TrainArgs) -> Result<i32> {
    let (mut cfg, base) = read_config(&args.config, cli.seed)?;
    cfg.no_cvfm |= args.no_cvfm;
    cfg.no_bce |= args.no_bce;
    cfg.re_zero |= args.re_zero;
    cfg.no_scaler |= args.no_scaler;
    cfg.no_dropout |= args.no_dropout;
    let mut trainer = match &args.resume {
        Some(path) => Checkpoint::load(path)?.into_trainer()?,
        None => {
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            let (charset, bor) = cfg.load_data(&base)?;
            Trainer::new(cfg, charset, &bor.to_tensor())?
        }
    };
    let until = args.steps.unwrap_or(trainer.config.steps);
    fs::create_dir_all(&args.out)?;
    let mut log = std::io::BufWriter::new(fs::File::create(args.out.join(LOG_FILE))?);
    let mut records = Vec::new();
    while trainer.step < until {
        let rec = trainer.train_step()?;
        serde_json::to_writer(&mut log, &rec).map_err(|e| Error::format("training log", e.to_string()))?;
        writeln!(log)?;
        if let Some(acc) = rec.probe_word_acc {
            if !cli.json {
                eprintln!(
                    "step {:>5}  L {:.4}  l_r {:.4}  word_acc {:.3}",
                    rec.step, rec.total, rec.l_r, acc
                );
            }
        }
        records.push(rec);
    }
    log.flush()?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    Checkpoint::of(&trainer).save(&ckpt)?;
    let summary = summarize(&records, TARGET_WORD_ACC);
    let mut value = serde_json::to_value(&summary).expect("summary serialises");
    value["checkpoint"] = json!(ckpt);
    emit(
        cli.json,
        value,
        format!(
            "{} steps, word accuracy {:.3} (target {TARGET_WORD_ACC} {}), l_r {:.4} -> {:.4} ({:.1}% lower)\ncheckpoint: {}\n",
            summary.steps,
            summary.final_word_acc,
            match summary.reached_target_at {
                Some(s) => format!("reached at step {s}"),
                None => "not reached".into(),
            },
            summary.early_l_r,
            summary.late_l_r,
            100.0 * summary.l_r_reduction,
            ckpt.display()
        ),
    );
    Ok(0)
}
