//! `mmger` command line.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lm::{pretrain_lm, sample_text_corpus, FrozenLm};
use crate::synthdata::{
    generate_corpus, load_split, manifest_path, CorpusManifest, Utterance, MANIFEST_FILE,
};
use crate::trainer::{
    ablation_row, evaluate, render_ablation_table, run_ablation_matrix, DecodeRow, StepRecord,
    Trainer, ABLATION_ROWS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Parser)]
#[command(
    name = "mmger",
    version,
    about = "Joint accent recognition and generative error correction on synthetic speech"
)]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every run seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output location (directory, or file for `pretrain-lm`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic corpus (frames, index, manifest).
    GenerateData(Common),
    /// Pretrains the toy language model on grammar text and freezes it.
    PretrainLm(Common),
    /// Jointly trains the recognizer, accent classifier and prompt components.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scores a checkpoint on a split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Prints id, CTC greedy, corrected and reference transcriptions.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Trains and evaluates the ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Row ids to run (repeatable or comma separated); all rows by default.
        #[arg(long, value_delimiter = ',')]
        row: Vec<String>,
        #[arg(long, default_value = "dev")]
        split: String,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::invalid_argument(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Data {
    manifest: CorpusManifest,
    path: PathBuf,
}

impl Data {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let path = manifest_path(&cfg.paths.data_dir);
        require(&path, "corpus manifest")?;
        Ok(Self {
            manifest: CorpusManifest::load(&path)?,
            path,
        })
    }

    fn split(&self, name: &str) -> Result<Vec<Utterance>> {
        Ok(load_split(&self.path, name)?.1)
    }

    fn num_accents(&self) -> usize {
        self.manifest.generator.num_accents
    }
}

fn open_lm(cfg: &RunConfig, data: &Data) -> Result<FrozenLm> {
    require(&cfg.paths.lm_path, "frozen LM")?;
    let lm = FrozenLm::load(&cfg.paths.lm_path, DType::F32)?;
    if lm.vocab().num_symbols != data.manifest.generator.num_symbols {
        return Err(Error::invalid_state(format!(
            "LM has {} symbols, corpus has {}",
            lm.vocab().num_symbols,
            data.manifest.generator.num_symbols
        )));
    }
    Ok(lm)
}

fn open_checkpoint(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(Data, Trainer)> {
    let data = Data::open(cfg)?;
    let lm = open_lm(cfg, &data)?;
    let path = checkpoint.unwrap_or_else(|| cfg.paths.run_dir.join(CHECKPOINT_FILE));
    require(&path, "checkpoint")?;
    let trainer = Trainer::load_checkpoint(&path, lm)?;
    Ok((data, trainer))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(common) => {
            let cfg = load_config(&common)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.data_dir.clone());
            generate_corpus(&cfg.synthdata, &out)?;
            cfg.echo_into(&out)?;
            println!("{}", out.join(MANIFEST_FILE).display());
        }
        Command::PretrainLm(common) => {
            let cfg = load_config(&common)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.lm_path.clone());
            let grammar = cfg.synthdata.grammar()?;
            let text = sample_text_corpus(
                &grammar,
                cfg.lm.pretrain.corpus_size,
                cfg.synthdata.length_range,
                cfg.lm.pretrain.seed,
            )?;
            let (lm, report) =
                pretrain_lm(&text, grammar.vocab(), &cfg.lm.model, &cfg.lm.pretrain)?;
            lm.save(&out)?;
            let dir = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            cfg.echo_into(dir)?;
            write_text(
                &dir.join("pretrain_report.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "{}\theld-out perplexity {:.3}",
                out.display(),
                report.heldout_perplexity
            );
        }
        Command::Train { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.run_dir.clone());
            let data = Data::open(&cfg)?;
            let lm = open_lm(&cfg, &data)?;
            let train = data.split("train")?;
            let mut trainer = match checkpoint {
                Some(path) => {
                    require(&path, "checkpoint")?;
                    Trainer::load_checkpoint(&path, lm)?
                }
                None => Trainer::new(&cfg.model(), lm, data.num_accents(), DType::F32)?,
            };
            cfg.echo_into(&out)?;
            let metrics_path = out.join(METRICS_FILE);
            let resuming = trainer.position() > 0;
            let file = fs::OpenOptions::new()
                .create(true)
                .append(resuming)
                .write(true)
                .truncate(!resuming)
                .open(&metrics_path)
                .map_err(|e| Error::io(&metrics_path, e))?;
            let mut log = BufWriter::new(file);
            if !resuming {
                writeln!(log, "{}", StepRecord::TSV_HEADER)
                    .map_err(|e| Error::io(&metrics_path, e))?;
            }
            trainer.fit(&train, None, Some(&mut log))?;
            log.flush().map_err(|e| Error::io(&metrics_path, e))?;
            let ckpt = out.join(CHECKPOINT_FILE);
            trainer.save_checkpoint(&ckpt)?;
            info!(
                "trained {} steps, skipped {} infeasible utterances",
                trainer.optimizer().step_count(),
                trainer.skipped_infeasible()
            );
            println!("{}", ckpt.display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&common)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.run_dir.clone());
            let (data, trainer) = open_checkpoint(&cfg, checkpoint)?;
            let utts = data.split(&split)?;
            let (report, _) = evaluate(trainer.model(), &utts, &split)?;
            cfg.echo_into(&out)?;
            write_text(
                &out.join(format!("eval_{split}.json")),
                &serde_json::to_string_pretty(&report)?,
            )?;
            write_text(&out.join(format!("eval_{split}.txt")), &report.to_string())?;
            print!("{report}");
        }
        Command::Decode {
            common,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&common)?;
            let (data, trainer) = open_checkpoint(&cfg, checkpoint)?;
            let utts = data.split(&split)?;
            let (_, rows) = evaluate(trainer.model(), &utts, &split)?;
            let mut text = format!("{}\n", DecodeRow::TSV_HEADER);
            for r in &rows {
                text.push_str(&r.tsv());
                text.push('\n');
            }
            if let Some(out) = &common.out {
                cfg.echo_into(out)?;
                write_text(&out.join(format!("decode_{split}.tsv")), &text)?;
            }
            print!("{text}");
        }
        Command::Ablate { common, row, split } => {
            let cfg = load_config(&common)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.run_dir.join("ablation"));
            let rows = if row.is_empty() {
                ABLATION_ROWS.to_vec()
            } else {
                row.iter()
                    .map(|r| ablation_row(r.trim()))
                    .collect::<Result<Vec<_>>>()?
            };
            let data = Data::open(&cfg)?;
            let lm = open_lm(&cfg, &data)?;
            let train = data.split("train")?;
            let eval = data.split(&split)?;
            let report = run_ablation_matrix(
                &cfg.model(),
                &rows,
                &lm,
                data.num_accents(),
                &train,
                &eval,
                &split,
            )?;
            cfg.echo_into(&out)?;
            let table = render_ablation_table(&report);
            write_text(
                &out.join("ablation.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            write_text(&out.join("ablation.txt"), &table)?;
            print!("{table}");
            if let Some(ok) = report.a3_beats_single_granularity() {
                info!("A3 no worse than G1 and G2: {ok}");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mmger", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["mmger", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["mmger", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_config_is_runtime_failure() {
        assert_eq!(
            run([
                "mmger",
                "--quiet",
                "generate-data",
                "--config",
                "/nonexistent/cfg.toml"
            ]),
            EXIT_FAILURE
        );
    }
}
